"""Discrete double-arc forward model.

Row ``k * n_e + j`` of the matrix integrates the image over both scanning
arcs of detector ``k`` at energy bin ``j``. Each arc is sampled at the
midpoints of equal polar-angle steps; a sample at polar angle theta carries
mass ``rho * dtheta`` (the arc-length element of a circle through the
origin) and is splatted bilinearly onto the four nearest pixel centres.
Because projection and backprojection share the same sparse matrix, the
adjoint is exact by construction.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .geometry import EnergyGrid, SystemGeometry, arc_parameters

OPERATOR_MAGIC = b"CSTA"
OPERATOR_VERSION = 1
DENSE_LIMIT = 16384


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImageGrid:
    """Square pixel grid covering the support disc of diameter ``p``.

    Row 0 is the row nearest the source (y close to 0); column 0 is at
    x close to -p/2.
    """

    h: int
    w: int
    p: float = 1.0

    def __post_init__(self):
        if self.h % 2 or self.w % 2:
            raise ValueError(f"image dimensions must be even, got {self.h}x{self.w}")
        if self.h != self.w:
            raise ValueError("the pixel grid must be square to cover the support disc")
        if not self.p > 0:
            raise ValueError("p must be positive")

    @property
    def pixel_size(self) -> float:
        return self.p / self.w

    @property
    def n(self) -> int:
        return self.h * self.w

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) centre coordinates, each shaped (h, w)."""
        ps = self.pixel_size
        xs = -self.p / 2 + (np.arange(self.w) + 0.5) * ps
        ys = -(np.arange(self.h) + 0.5) * ps
        return np.meshgrid(xs, ys, indexing="xy")

    def support_mask(self) -> np.ndarray:
        x, y = self.pixel_centers()
        return x**2 + (y + self.p / 2) ** 2 <= (self.p / 2) ** 2


@dataclass(eq=False)
class SparseOperator:
    """An m x n CSR matrix plus the sinogram and image shapes it maps between."""

    matrix: sp.csr_matrix
    sino_shape: tuple[int, int]
    image_shape: tuple[int, int]

    def __post_init__(self):
        m, n = self.matrix.shape
        if m != self.sino_shape[0] * self.sino_shape[1] or n != self.image_shape[0] * self.image_shape[1]:
            raise ValueError(f"matrix {self.matrix.shape} incompatible with {self.sino_shape} / {self.image_shape}")

    @classmethod
    def from_dense(cls, mat, sino_shape=None, image_shape=None) -> "SparseOperator":
        mat = np.asarray(mat, dtype=np.float64)
        m, n = mat.shape
        return cls(sp.csr_matrix(mat), sino_shape or (1, m), image_shape or (1, n))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def astype(self, dtype) -> "SparseOperator":
        return SparseOperator(self.matrix.astype(dtype), self.sino_shape, self.image_shape)

    @cached_property
    def svd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Thin SVD ``(U, s, Vt)`` of the dense matrix, computed once."""
        if self.n > DENSE_LIMIT:
            raise MemoryError(f"n={self.n} exceeds the dense limit {DENSE_LIMIT}; use solvers.cgls instead")
        u, s, vt = np.linalg.svd(self.matrix.toarray(), full_matrices=False)
        return u, s, vt


@dataclass
class Sinogram:
    data: np.ndarray
    geometry: SystemGeometry | None = None
    grid: EnergyGrid | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"sinogram must be 2-D (K, N_E), got shape {self.data.shape}")
        if self.geometry is not None and self.grid is not None:
            if self.data.shape != (self.geometry.k, self.grid.n_e):
                raise ValueError(f"sinogram shape {self.data.shape} != ({self.geometry.k}, {self.grid.n_e})")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram has non-finite entries")

    @property
    def shape(self):
        return self.data.shape

    def ravel(self) -> np.ndarray:
        return self.data.ravel()


def _as_sino_vector(A: SparseOperator, y) -> np.ndarray:
    arr = y.data if isinstance(y, Sinogram) else np.asarray(y)
    if arr.shape not in (tuple(A.sino_shape), (A.m,)):
        raise ValueError(f"sinogram shape {arr.shape} does not match operator {A.sino_shape}")
    return arr.ravel()


def _as_image_vector(A: SparseOperator, x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.shape not in (tuple(A.image_shape), (A.n,)):
        raise ValueError(f"image shape {arr.shape} does not match operator {A.image_shape}")
    return arr.ravel()


def apply(A: SparseOperator, x) -> Sinogram:
    """Forward projection y = A x."""
    y = A.matrix @ _as_image_vector(A, x)
    return Sinogram(y.reshape(A.sino_shape))


def apply_adjoint(A: SparseOperator, y) -> np.ndarray:
    """Backprojection A^T y, returned as a flat image vector."""
    return A.matrix.T @ _as_sino_vector(A, y)


def _splat_bilinear(px, py, mass, img: ImageGrid):
    """Distribute point masses onto pixel centres; returns (flat cols, weights)."""
    ps = img.pixel_size
    u = (px + img.p / 2) / ps - 0.5
    v = -py / ps - 0.5
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    cols = []
    weights = []
    for dj, wv in ((0, 1.0 - fv), (1, fv)):
        rr = np.clip(j0 + dj, 0, img.h - 1)
        for di, wu in ((0, 1.0 - fu), (1, fu)):
            cc = np.clip(i0 + di, 0, img.w - 1)
            cols.append(rr * img.w + cc)
            weights.append(mass * wv * wu)
    return np.concatenate(cols), np.concatenate(weights)


def _arc_samples(arcs, which: str, img: ImageGrid, samples_per_pixel: int):
    lo, hi = arcs.theta_range_plus if which == "plus" else arcs.theta_range_minus
    span = hi - lo
    rho = abs(arcs.rho)
    step_len = img.pixel_size / samples_per_pixel
    count = max(1, int(math.ceil(rho * span / step_len)))
    dtheta = span / count
    theta = lo + (np.arange(count) + 0.5) * dtheta
    pts = arcs.points(theta, which)
    x, y = pts[:, 0], pts[:, 1]
    inside = x**2 + (y + img.p / 2) ** 2 <= (img.p / 2) ** 2
    return x[inside], y[inside], rho * dtheta


def assemble_row(geom: SystemGeometry, omega: float, beta: float, img: ImageGrid, samples_per_pixel: int = 4):
    """Sorted unique column indices and summed weights of one measurement."""
    arcs = arc_parameters(geom, omega, beta)
    if not (np.isfinite(arcs.rho) and arcs.rho > 0):
        raise AssemblyError(f"degenerate arc for omega={omega}, beta={beta}")
    cols, weights = [], []
    for which in ("plus", "minus"):
        x, y, mass = _arc_samples(arcs, which, img, samples_per_pixel)
        if x.size:
            c, w = _splat_bilinear(x, y, mass, img)
            cols.append(c)
            weights.append(w)
    if not cols:
        return np.zeros(0, np.int64), np.zeros(0, np.float64)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)
    uniq, inv = np.unique(cols, return_inverse=True)
    summed = np.bincount(inv, weights=weights, minlength=uniq.size)
    keep = summed > 0
    return uniq[keep], summed[keep]


def assemble(geom: SystemGeometry, grid: EnergyGrid, img: ImageGrid, samples_per_pixel: int = 4,
             threads: int = 1) -> SparseOperator:
    """Build the m x n forward matrix, m = K * N_E, n = h * w.

    Rows are independent; with ``threads > 1`` detectors are processed
    concurrently and merged in detector order, so the result does not
    depend on the worker count.
    """
    if samples_per_pixel < 2:
        raise ValueError("samples_per_pixel must be >= 2")
    if not math.isclose(img.p, geom.p):
        raise ValueError(f"image grid diameter {img.p} != ring diameter {geom.p}")

    def detector_rows(beta):
        return [assemble_row(geom, omega, beta, img, samples_per_pixel) for omega in grid.omegas]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_det = list(pool.map(detector_rows, geom.betas))
    else:
        per_det = [detector_rows(beta) for beta in geom.betas]

    rows = [r for det in per_det for r in det]
    counts = np.array([len(c) for c, _ in rows], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate([c for c, _ in rows]) if rows else np.zeros(0, np.int64)
    data = np.concatenate([w for _, w in rows]) if rows else np.zeros(0)
    if not np.all(np.isfinite(data)):
        raise AssemblyError("non-finite operator weight")
    mat = sp.csr_matrix((data, indices.astype(np.int32), indptr), shape=(len(rows), img.n))
    return SparseOperator(mat, (geom.k, grid.n_e), (img.h, img.w))


def pinv_dense(A: SparseOperator, tau: float = 1e-3) -> np.ndarray:
    """Dense Tikhonov pseudo-inverse ``(A^T A + tau I)^-1 A^T`` (n x m)."""
    if A.n > DENSE_LIMIT:
        raise MemoryError(f"n={A.n} too large for a dense pseudo-inverse; use solvers.cgls")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    u, s, vt = A.svd
    if tau == 0:
        rcond = max(A.shape) * np.finfo(np.float64).eps
        if A.n > A.m or s.size == 0 or s[-1] <= rcond * s[0]:
            raise np.linalg.LinAlgError("A^T A is singular; tau = 0 requires full column rank")
        gain = 1.0 / s
    else:
        gain = s / (s**2 + tau)
    return (vt.T * gain) @ u.T


def op_norm(A, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral norm.

    ``A`` may be a :class:`SparseOperator`, a scipy/numpy matrix, or any
    object with ``matvec``/``rmatvec``.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    if isinstance(A, SparseOperator):
        A = A.matrix
    if hasattr(A, "matvec") and hasattr(A, "rmatvec"):
        fwd, adj, n = A.matvec, A.rmatvec, A.shape[1]
    else:
        fwd, adj, n = (lambda v: A @ v), (lambda v: A.T @ v), A.shape[1]
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        z = adj(fwd(x))
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        est = math.sqrt(nz)
        x = z / nz
    return est


def save_operator(path, A: SparseOperator) -> None:
    mat = A.matrix.tocsr()
    m, n = mat.shape
    with open(path, "wb") as fh:
        fh.write(OPERATOR_MAGIC)
        fh.write(struct.pack("<IQQ", OPERATOR_VERSION, m, n))
        fh.write(mat.indptr.astype("<u8").tobytes())
        fh.write(mat.indices.astype("<u4").tobytes())
        fh.write(mat.data.astype("<f8").tobytes())


def load_operator(path, sino_shape=None, image_shape=None) -> SparseOperator:
    raw = Path(path).read_bytes()
    if raw[:4] != OPERATOR_MAGIC:
        raise ValueError(f"{path}: not an operator file")
    version, m, n = struct.unpack_from("<IQQ", raw, 4)
    if version != OPERATOR_VERSION:
        raise ValueError(f"{path}: unsupported operator version {version}")
    off = 4 + struct.calcsize("<IQQ")
    indptr = np.frombuffer(raw, "<u8", m + 1, off).astype(np.int64)
    off += 8 * (m + 1)
    nnz = int(indptr[-1])
    indices = np.frombuffer(raw, "<u4", nnz, off).astype(np.int32)
    off += 4 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off).copy()
    mat = sp.csr_matrix((data, indices, indptr), shape=(m, n))
    return SparseOperator(mat, tuple(sino_shape or (1, m)), tuple(image_shape or (1, n)))
