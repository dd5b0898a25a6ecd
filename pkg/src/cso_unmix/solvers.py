"""Classical l1 sparse recovery: soft thresholding, ISTA and a linear initializer.

The objective is ``F(s) = 0.5 * ||z - G s||^2 + lam * ||s||_1`` so that the
gradient step and the proximal step share one scaling (threshold ``rho*lam``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# lambda grid for the baseline, as multiples of max|G^T z| over the tuning set
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0)


# condition number of Z Z^T above which fit_linear_init adds its ridge
RIDGE_COND = 1e8


class StepSizeError(RuntimeError):
    """ISTA objective kept growing; the step size is too large."""


@dataclass(frozen=True)
class SolverConfig:
    step_size: float
    reg_weight: float = 0.0
    max_iters: int = 2000
    stop_tol: float = 1e-6

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.reg_weight >= 0:
            raise ValueError("reg_weight must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.stop_tol >= 0:
            raise ValueError("stop_tol must be non-negative")


def soft_threshold(v, theta):
    """Elementwise ``sign(v) * max(|v| - theta, 0)``."""
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("threshold must be non-negative")
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def _check_shapes(s, z, G):
    if G.ndim != 2 or s.shape[0] != G.shape[1] or z.shape[0] != G.shape[0]:
        raise ValueError(f"shape mismatch: G {G.shape}, s {s.shape}, z {z.shape}")
    if s.shape[1:] != z.shape[1:]:
        raise ValueError(f"batch mismatch: s {s.shape}, z {z.shape}")


def ista_step(s, z, G, rho: float, lam: float):
    """One gradient step on the data term followed by the l1 prox.

    ``s`` and ``z`` may carry a trailing batch axis (one problem per column).
    """
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_shapes(s, z, G)
    r = s - rho * (G.T @ (G @ s - z))
    return soft_threshold(r, rho * lam)


def objective(s, z, G, lam: float) -> float:
    res = z - G @ s
    return 0.5 * float(np.sum(res * res)) + lam * float(np.sum(np.abs(s)))


def ista_solve(z, G, config: SolverConfig, s0=None):
    """Run ISTA from ``s0`` (zeros by default).

    Returns the final iterate and the objective after every iteration. With a
    batch of columns the objective is summed and the relative change is the
    worst column's. Raises ``StepSizeError`` if the objective grows for ten
    consecutive iterations.
    """
    z = np.asarray(z, dtype=float)
    s = np.zeros((G.shape[1],) + z.shape[1:]) if s0 is None else np.array(s0, dtype=float)
    _check_shapes(s, z, G)
    rho, lam = config.step_size, config.reg_weight
    Gt = G.T
    trace = []
    growing = 0
    for _ in range(config.max_iters):
        s_new = soft_threshold(s - rho * (Gt @ (G @ s - z)), rho * lam)
        trace.append(objective(s_new, z, G, lam))
        if len(trace) > 1 and trace[-1] > trace[-2]:
            growing += 1
            if growing >= 10:
                raise StepSizeError(f"objective increased for 10 iterations (rho={rho}, lam={lam})")
        else:
            growing = 0
        diff = np.linalg.norm((s_new - s).reshape(s.shape[0], -1), axis=0)
        ref = np.maximum(np.linalg.norm(s.reshape(s.shape[0], -1), axis=0), np.finfo(float).eps)
        s = s_new
        if np.max(diff / ref) < config.stop_tol or not np.any(diff):
            break
    return s, np.asarray(trace)


def estimate_step_size(G, iters: int = 50, tol: float = 1e-10, seed: int = 0) -> float:
    """``1 / sigma_max(G)**2`` by power iteration on ``G^T G``."""
    G = np.asarray(G, dtype=float)
    if not np.any(G):
        raise ValueError("steering matrix is zero")
    v = np.random.default_rng(seed).standard_normal(G.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G.T @ (G @ v)
        new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return 1.0 / lam


@dataclass
class LinearInit:
    Q: np.ndarray  # (L, U*V)

    def __post_init__(self):
        if not np.all(np.isfinite(self.Q)):
            raise ValueError("Q_init has non-finite entries")


def fit_linear_init(Z, S, ridge: float | None = None) -> LinearInit:
    """Least-squares map ``Q = S Z^T (Z Z^T + eps I)^-1`` from measurements to grids.

    ``Z`` is (U*V, M) and ``S`` is (L, M), one sample per column. By default
    ``eps = 1e-8 * trace(Z Z^T) / (U*V)`` is added only when ``Z Z^T`` is
    ill-conditioned (condition number above ``RIDGE_COND``), so well-posed
    fits stay unbiased. Pass ``ridge`` to force a value; ``ridge=0`` gives
    the plain normal equations.
    """
    Z = np.asarray(Z, dtype=float)
    S = np.asarray(S, dtype=float)
    if Z.shape[1] != S.shape[1]:
        raise ValueError("Z and S need the same number of columns")
    ZZt = Z @ Z.T
    if ridge is None:
        eps = 1e-8 * np.trace(ZZt) / ZZt.shape[0] if np.linalg.cond(ZZt) > RIDGE_COND else 0.0
    else:
        eps = ridge
    A = ZZt + eps * np.eye(ZZt.shape[0])
    # Q A = S Z^T  <=>  A^T Q^T = Z S^T ; A is symmetric
    try:
        if eps == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
            raise np.linalg.LinAlgError("Z Z^T is singular")
        Q = np.linalg.solve(A, Z @ S.T).T
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"cannot fit Q_init: {e}") from e
    return LinearInit(Q)


def apply_init(init: LinearInit, z):
    z = np.asarray(z, dtype=float)
    if z.shape[0] != init.Q.shape[1]:
        raise ValueError(f"Q_init expects {init.Q.shape[1]} measurements, got {z.shape[0]}")
    return init.Q @ z
