"""Classical reconstruction algorithms for y = A x.

All solvers work on flat vectors internally and return the image reshaped
to the operator's image shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .operator import SparseOperator, op_norm, pinv_dense


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, what: str = "iterate"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


class SolverConfigError(ValueError):
    pass


@dataclass
class SolverConfig:
    max_iters: int = 500
    lam: float = 1.0
    step: float | None = None
    tau: float = 0.0
    tol: float = 0.0
    dual_step: float | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise SolverConfigError("max_iters must be >= 1")
        if not self.lam > 0:
            raise SolverConfigError("lam must be > 0")
        if self.tol < 0:
            raise SolverConfigError("tol must be >= 0")
        if self.tau < 0:
            raise SolverConfigError("tau must be >= 0")
        if self.step is not None and not self.step > 0:
            raise SolverConfigError("step must be > 0")


@dataclass
class ReconResult:
    image: np.ndarray
    residual_history: list = field(default_factory=list)
    iterations_run: int = 0
    objective_history: list = field(default_factory=list)


def _flat_y(A: SparseOperator, y) -> np.ndarray:
    arr = getattr(y, "data", y)
    arr = np.asarray(arr, dtype=np.float64).ravel()
    if arr.size != A.m:
        raise ValueError(f"data length {arr.size} != operator rows {A.m}")
    return arr


def _stalled(hist, tol) -> bool:
    if tol <= 0 or len(hist) < 2 or hist[-2] == 0:
        return False
    return abs(hist[-1] - hist[-2]) / hist[-2] < tol


# -- data-term operators -----------------------------------------------------

class DataOperator:
    """Linear map D from sinogram space to image space, with its transpose."""

    name = "base"

    def apply(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.name}


class AdjointData(DataOperator):
    """D = scale * A^T."""

    name = "adjoint"

    def __init__(self, A: SparseOperator, scale: float = 1.0):
        self.A = A
        self.scale = float(scale)

    @classmethod
    def normalized(cls, A: SparseOperator) -> "AdjointData":
        nrm = op_norm(A)
        return cls(A, 1.0 / nrm**2 if nrm > 0 else 1.0)

    def apply(self, r):
        return self.scale * (self.A.matrix.T @ r)

    def adjoint(self, v):
        return self.scale * (self.A.matrix @ v)

    def config(self):
        return {"kind": self.name, "scale": self.scale}


class PinvData(DataOperator):
    """D = (A^T A + tau I)^-1 A^T, materialized densely."""

    name = "pinv"

    def __init__(self, A: SparseOperator, tau: float = 1e-3, dtype=np.float64):
        self.tau = float(tau)
        self.matrix = pinv_dense(A, tau).astype(dtype)

    def apply(self, r):
        return self.matrix @ r

    def adjoint(self, v):
        return self.matrix.T @ v

    def config(self):
        return {"kind": self.name, "tau": self.tau}


class CGLSData(DataOperator):
    """k CGLS steps with their step scalars frozen, which makes them linear.

    The scalars come from one reference CGLS run (right-hand side A * 1).
    Replaying the recurrence with fixed scalars computes ``P(A^T A) A^T r``
    for a fixed polynomial ``P``, so the transpose is ``A P(A^T A) v``.
    """

    name = "cgls"

    def __init__(self, A: SparseOperator, k: int = 10, tau: float = 0.0):
        self.A = A
        self.k = int(k)
        self.tau = float(tau)
        self.alphas, self.betas = self._reference_scalars()

    def _normal(self, v):
        M = self.A.matrix
        return M.T @ (M @ v) + self.tau * v

    def _reference_scalars(self):
        s = self.A.matrix.T @ (self.A.matrix @ np.ones(self.A.n))
        p = s.copy()
        gamma = s @ s
        alphas, betas = [], []
        for _ in range(self.k):
            q = self._normal(p)
            delta = p @ q
            if delta <= 0 or gamma == 0:
                break
            a = gamma / delta
            s = s - a * q
            g_new = s @ s
            alphas.append(a)
            betas.append(g_new / gamma)
            p = s + betas[-1] * p
            gamma = g_new
        return alphas, betas

    def _poly(self, u):
        x = np.zeros_like(u)
        s = u.copy()
        p = u.copy()
        for a, b in zip(self.alphas, self.betas):
            q = self._normal(p)
            x += a * p
            s -= a * q
            p = s + b * p
        return x

    def apply(self, r):
        return self._poly(self.A.matrix.T @ r)

    def adjoint(self, v):
        return self.A.matrix @ self._poly(v)

    def config(self):
        return {"kind": self.name, "k": self.k, "tau": self.tau}


def make_data_operator(A: SparseOperator, kind: str = "adjoint", **kw) -> DataOperator:
    if kind == "adjoint":
        return AdjointData.normalized(A) if kw.get("normalize") else AdjointData(A, kw.get("scale", 1.0))
    if kind == "pinv":
        return PinvData(A, kw.get("tau", 1e-3), kw.get("dtype", np.float64))
    if kind == "cgls":
        return CGLSData(A, kw.get("k", 10), kw.get("tau", 0.0))
    raise ValueError(f"unknown data operator {kind!r}")


# -- solvers ----------------------------------------------------------------

def cgls(A: SparseOperator, y, cfg: SolverConfig, x0=None) -> ReconResult:
    """CGLS for min ||A x - y||^2 + tau ||x||^2.

    ``residual_history`` holds ||A x_k - y||; the damped residual
    ``||A x - y||^2 + tau ||x||^2`` decreases monotonically.
    """
    M = A.matrix
    b = _flat_y(A, y)
    tau = cfg.tau
    x = np.zeros(A.n) if x0 is None else np.asarray(x0, dtype=np.float64).ravel().copy()
    r = b - M @ x
    s = M.T @ r - tau * x
    p = s.copy()
    gamma = s @ s
    hist, obj = [], []
    for it in range(cfg.max_iters):
        if gamma == 0:
            break
        q = M @ p
        delta = q @ q + tau * (p @ p)
        if delta == 0:
            break
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        s = M.T @ r - tau * x
        gamma_new = s @ s
        rn = float(np.linalg.norm(r))
        if not (math.isfinite(rn) and math.isfinite(gamma_new)):
            raise DivergenceError(it)
        hist.append(rn)
        obj.append(rn**2 + tau * float(x @ x))
        if _stalled(hist, cfg.tol):
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return ReconResult(x.reshape(A.image_shape), hist, len(hist), obj)


def kaczmarz(A: SparseOperator, y, relaxation: float = 1.0, sweeps: int = 10, x0=None) -> ReconResult:
    """Cyclic ART; one history entry per full sweep."""
    if not (0.0 < relaxation < 2.0):
        raise SolverConfigError("relaxation must lie in (0, 2)")
    M = A.matrix.tocsr()
    b = _flat_y(A, y)
    x = np.zeros(A.n) if x0 is None else np.asarray(x0, dtype=np.float64).ravel().copy()
    indptr, indices, data = M.indptr, M.indices, M.data
    row_norm2 = np.asarray(M.multiply(M).sum(axis=1)).ravel()
    hist = []
    for sweep in range(sweeps):
        for i in range(A.m):
            if row_norm2[i] == 0:
                continue
            lo, hi = indptr[i], indptr[i + 1]
            cols, vals = indices[lo:hi], data[lo:hi]
            corr = relaxation * (b[i] - vals @ x[cols]) / row_norm2[i]
            x[cols] += corr * vals
        rn = float(np.linalg.norm(M @ x - b))
        if not math.isfinite(rn):
            raise DivergenceError(sweep)
        hist.append(rn)
    return ReconResult(x.reshape(A.image_shape), hist, len(hist))


def _data_normal_map(A: SparseOperator, D: DataOperator) -> LinearOperator:
    M = A.matrix
    return LinearOperator((A.n, A.n), matvec=lambda v: D.apply(M @ v), rmatvec=lambda v: M.T @ D.adjoint(v),
                          dtype=np.float64)


def gradient_descent_recon(A: SparseOperator, y, cfg: SolverConfig,
                           reg_grad: Callable[[np.ndarray], np.ndarray] | None = None,
                           data_op: DataOperator | None = None, x0=None) -> ReconResult:
    """x <- x - step * (lam * D(A x - y) + reg_grad(x)).

    ``D`` defaults to the plain adjoint. Without an explicit step the
    largest stable-by-construction step ``1 / (lam ||D A||)`` is used.
    """
    M = A.matrix
    b = _flat_y(A, y)
    D = data_op or AdjointData(A)
    step = cfg.step
    if step is None:
        nrm = op_norm(_data_normal_map(A, D))
        step = 1.0 / (cfg.lam * nrm) if nrm > 0 else 1.0
    x = np.zeros(A.n) if x0 is None else np.asarray(x0, dtype=np.float64).ravel().copy()
    hist, obj = [], []
    for it in range(cfg.max_iters):
        r = M @ x - b
        g = cfg.lam * D.apply(r)
        if reg_grad is not None:
            g = g + np.asarray(reg_grad(x.reshape(A.image_shape))).ravel()
        x = x - step * g
        rn = float(np.linalg.norm(M @ x - b))
        if not (math.isfinite(rn) and np.all(np.isfinite(x))):
            raise DivergenceError(it)
        hist.append(rn)
        obj.append(0.5 * cfg.lam * rn**2)
        if _stalled(hist, cfg.tol):
            break
    return ReconResult(x.reshape(A.image_shape), hist, len(hist), obj)


# -- total variation --------------------------------------------------------

def grad2d(x: np.ndarray) -> np.ndarray:
    """Forward differences with Neumann boundary; returns (2, h, w)."""
    g = np.zeros((2,) + x.shape, dtype=x.dtype)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def div2d(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad2d`."""
    py, px = p
    d = np.zeros_like(py)
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] -= py[-2, :]
    d[:, 0] += px[:, 0]
    d[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    d[:, -1] -= px[:, -2]
    return d


def total_variation(x: np.ndarray) -> float:
    g = grad2d(np.asarray(x, dtype=np.float64))
    return float(np.sqrt(g[0] ** 2 + g[1] ** 2).sum())


# Ratio of primal to dual step. Image values are O(1) while the data dual
# scales with lam * residual; a small primal step converges far faster than
# the symmetric choice on this operator and keeps the objective ripple low.
CP_BALANCE = 0.03


def chambolle_pock_tv(A: SparseOperator, y, cfg: SolverConfig, x0=None) -> ReconResult:
    """Primal-dual minimization of lam/2 ||A x - y||^2 + TV(x), isotropic TV.

    ``cfg.step`` is the primal step; ``cfg.dual_step`` the dual one. With
    L bounding ||[A; grad]||, the defaults are ``CP_BALANCE / L`` and
    ``1 / (CP_BALANCE * L)``; a single given step fixes the other through
    sigma * tau * L^2 = 1. Steps with sigma * tau * L^2 > 1 are rejected
    before iterating.
    """
    M = A.matrix
    b = _flat_y(A, y)
    shape = A.image_shape
    L = math.sqrt(op_norm(A) ** 2 + 8.0)
    if cfg.step is not None:
        tau_p = cfg.step
    elif cfg.dual_step is not None:
        tau_p = 1.0 / (cfg.dual_step * L**2)
    else:
        tau_p = CP_BALANCE / L
    sigma = cfg.dual_step if cfg.dual_step is not None else 1.0 / (tau_p * L**2)
    if sigma * tau_p * L**2 > 1.0 + 1e-9:
        raise SolverConfigError(f"step sizes violate sigma*tau*L^2 <= 1 (got {sigma * tau_p * L**2:.4f}, L={L:.4f})")
    lam = cfg.lam

    x = np.zeros(shape) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(shape).copy()
    xbar = x.copy()
    p = np.zeros(A.m)
    q = np.zeros((2,) + shape)
    hist, obj = [], []
    for it in range(cfg.max_iters):
        p = (p + sigma * (M @ xbar.ravel() - b)) / (1.0 + sigma / lam)
        q = q + sigma * grad2d(xbar)
        q /= np.maximum(1.0, np.sqrt(q[0] ** 2 + q[1] ** 2))
        x_new = x - tau_p * ((M.T @ p).reshape(shape) - div2d(q))
        xbar = 2.0 * x_new - x
        x = x_new
        res = M @ x.ravel() - b
        rn = float(np.linalg.norm(res))
        if not math.isfinite(rn):
            raise DivergenceError(it)
        hist.append(rn)
        obj.append(0.5 * lam * rn**2 + total_variation(x))
        if _stalled(hist, cfg.tol):
            break
    return ReconResult(x, hist, len(hist), obj)


# -- direct methods ---------------------------------------------------------

def tsvd_reconstruct(A: SparseOperator, y, rank: int) -> np.ndarray:
    u, s, vt = A.svd
    if not (1 <= rank <= min(A.m, A.n)):
        raise ValueError(f"rank must lie in [1, {min(A.m, A.n)}], got {rank}")
    b = _flat_y(A, y)
    coef = (u[:, :rank].T @ b) / s[:rank]
    return (vt[:rank].T @ coef).reshape(A.image_shape)


def pinv_reconstruct(A: SparseOperator, y, tau: float = 1e-3) -> np.ndarray:
    """Tikhonov pseudo-inverse reconstruction via the cached SVD."""
    u, s, vt = A.svd
    b = _flat_y(A, y)
    gain = s / (s**2 + tau) if tau > 0 else 1.0 / s
    return (vt.T @ (gain * (u.T @ b))).reshape(A.image_shape)
