import numpy as np
import scipy.linalg

from trendbal.dto import CovariateProblem, PanelDataset


def make_problem(z1, Z, q1=None, Q=None, **kwargs):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Q is None:
        Q = np.zeros((0, Z.shape[1]))
        q1 = np.zeros(0)
    return CovariateProblem(z1=z1, Z=Z, q1=q1, Q=np.atleast_2d(Q), **kwargs)


def random_problem(rng, J=10, K=2, m=6, nonneg=False):
    """Intercept row plus K Gaussian rows; ``z1`` is the image of a feasible weight."""
    Z = np.vstack([np.ones(J), rng.standard_normal((K, J))])
    if nonneg:
        w0 = rng.uniform(0.5, 1.5, size=J)
        w0 /= w0.sum()
    else:
        w0 = rng.standard_normal(J)
        w0 += 1.0 / J - w0.mean()
    Q = rng.standard_normal((m, J))
    q1 = rng.standard_normal(m)
    return make_problem(Z @ w0, Z, q1, Q)


def feasible_samples(prob, rng, n=100, scale=1.0):
    """Points ``w_a + N v`` on the constraint set, N spanning the null space of Z."""
    w_a = np.linalg.lstsq(prob.Z, prob.z1, rcond=None)[0]
    null = scipy.linalg.null_space(prob.Z)
    return [w_a + null @ (scale * rng.standard_normal(null.shape[1])) for _ in range(n)]


def make_panel(outcomes, t0, units=None, periods=None):
    outcomes = np.asarray(outcomes, dtype=float)
    T, n_units = outcomes.shape
    units = units or ["treated"] + [f"c{j}" for j in range(1, n_units)]
    periods = periods or list(range(1, T + 1))
    return PanelDataset(outcomes=outcomes, unit_labels=units, period_labels=periods, t0=t0)


def random_panel(rng, T=12, J=6, t0=8):
    return make_panel(rng.standard_normal((T, J + 1)), t0)


def factor_panel(rng, T=30, J=12, t0=20, r=1, noise=0.0):
    """``mu_i + gamma_t + delta_t'h_i`` plus optional white noise; returns the panel and h."""
    mu = rng.standard_normal(J + 1)
    gamma = rng.standard_normal(T)
    delta = rng.standard_normal((T, r))
    h = rng.standard_normal((J + 1, r))
    y = mu[None, :] + gamma[:, None] + delta @ h.T + noise * rng.standard_normal((T, J + 1))
    return make_panel(y, t0), h


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path
