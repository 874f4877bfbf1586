"""JSON and CSV emission with fixed significant digits and schema lookup."""

from __future__ import annotations

import logging
import math
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import orjson
import pandas as pd

from .config import settings


logger = logging.getLogger("trendbal.report")

PathLike = Union[str, Path]

_JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def round_sig(value: float, digits: int = settings.sig_digits) -> Optional[float]:
    if not math.isfinite(value):
        return None
    return float(f"{value:.{digits}g}")


def normalize(value: Any, digits: int = settings.sig_digits) -> Any:
    """Round every float in a nested structure; non-finite floats become null."""
    if isinstance(value, np.ndarray):
        return normalize(value.tolist(), digits)
    if isinstance(value, np.generic):
        return normalize(value.item(), digits)
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        return round_sig(value, digits)
    if isinstance(value, dict):
        return {str(key): normalize(item, digits) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [normalize(item, digits) for item in value]
    return value


def metadata(command: str, seed: Optional[int], deterministic: bool) -> Dict[str, Any]:
    from . import __version__

    meta: Dict[str, Any] = {"tool": "trendbal", "version": __version__, "command": command, "seed": seed}
    if not deterministic:
        meta["generated_at"] = datetime.now(timezone.utc).isoformat()
    return meta


def dumps(document: Dict[str, Any]) -> bytes:
    return orjson.dumps(normalize(document), option=_JSON_OPTIONS)


def write_json(
    path: PathLike,
    document: Dict[str, Any],
    *,
    command: str,
    seed: Optional[int] = None,
    deterministic: bool = False,
) -> Path:
    payload = dict(document)
    payload["metadata"] = metadata(command, seed, deterministic)
    target = Path(path)
    target.write_bytes(dumps(payload) + b"\n")
    logger.info("wrote %s", target)
    return target


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    target = Path(path)
    frame.to_csv(target, index=False, float_format=f"%.{settings.sig_digits}g")
    logger.info("wrote %s", target)
    return target


def schema_path(name: str) -> Path:
    return Path(str(resources.files("trendbal").joinpath("schemas", f"{name}.schema.json")))


def load_schema(name: str) -> Dict[str, Any]:
    return orjson.loads(schema_path(name).read_bytes())


def missing_keys(document: Any, schema: Dict[str, Any], prefix: str = "") -> List[str]:
    """Required keys of ``schema`` (recursively through object properties and array items) absent from ``document``."""
    missing: List[str] = []
    if isinstance(document, dict):
        for key in schema.get("required", []):
            if key not in document:
                missing.append(f"{prefix}{key}")
        for key, sub in schema.get("properties", {}).items():
            if key in document and isinstance(sub, dict):
                missing.extend(missing_keys(document[key], sub, f"{prefix}{key}."))
        extra = schema.get("additionalProperties")
        if isinstance(extra, dict):
            for key, item in document.items():
                if key not in schema.get("properties", {}):
                    missing.extend(missing_keys(item, extra, f"{prefix}{key}."))
    elif isinstance(document, list) and isinstance(schema.get("items"), dict):
        for idx, item in enumerate(document):
            missing.extend(missing_keys(item, schema["items"], f"{prefix}{idx}."))
    return missing


__all__ = [
    "round_sig",
    "normalize",
    "metadata",
    "dumps",
    "write_json",
    "write_csv",
    "schema_path",
    "load_schema",
    "missing_keys",
]
