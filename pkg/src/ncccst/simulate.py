"""Phantoms, measurement noise, image-quality metrics and dataset files."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d, zoom

from .operator import ImageGrid, Sinogram, SparseOperator

IMAGE_MAGIC = b"CSTI\0\0\0\0"
SINO_MAGIC = b"CSTS\0\0\0\0"
SPLIT_SEED_STRIDE = 10_000_000
NOISE_SEED_OFFSET = 1 << 40

# Shepp-Logan ellipses with the higher-contrast intensities of Toft's
# modified phantom: (intensity, semi-axis a, semi-axis b, x0, y0, angle deg)
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def unit_coordinates(img: ImageGrid) -> tuple[np.ndarray, np.ndarray]:
    """Pixel centres mapped so the support disc becomes the unit disc."""
    x, y = img.pixel_centers()
    r = img.p / 2
    return x / r, (y + r) / r


def rasterize_ellipses(ellipses, img: ImageGrid) -> np.ndarray:
    """Sum ellipse intensities at pixel centres; clip to support and [0, 1]."""
    u, v = unit_coordinates(img)
    out = np.zeros((img.h, img.w))
    for amp, a, b, x0, y0, deg in ellipses:
        t = math.radians(deg)
        ct, st = math.cos(t), math.sin(t)
        du, dv = u - x0, v - y0
        inside = ((du * ct + dv * st) / a) ** 2 + ((-du * st + dv * ct) / b) ** 2 <= 1.0
        out = out + np.where(inside, amp, 0.0)
    out[~img.support_mask()] = 0.0
    return np.clip(out, 0.0, 1.0)


def shepp_logan(h: int, w: int, p: float = 1.0) -> np.ndarray:
    if h < 16 or w < 16:
        raise ValueError("phantom needs at least 16x16 pixels")
    return rasterize_ellipses(SHEPP_LOGAN, ImageGrid(h, w, p))


def random_ellipses(seed: int, n_ellipses: int | None = None) -> list[tuple]:
    rng = _rng(seed)
    if n_ellipses is None:
        n_ellipses = int(rng.integers(3, 9))
    if not 1 <= n_ellipses <= 12:
        raise ValueError("n_ellipses must lie in [1, 12]")
    ell = []
    for _ in range(n_ellipses):
        rad = 0.6 * math.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * math.pi)
        ell.append((float(rng.uniform(0.1, 0.8)), float(rng.uniform(0.08, 0.5)), float(rng.uniform(0.08, 0.5)),
                    rad * math.cos(ang), rad * math.sin(ang), float(rng.uniform(0, 180))))
    return ell


def random_ellipse_phantom(seed: int, n_ellipses: int | None = None, h: int = 64, w: int = 64,
                           p: float = 1.0) -> np.ndarray:
    """Seeded superposition of random ellipses (drawn count 3-8 when unset)."""
    return rasterize_ellipses(random_ellipses(seed, n_ellipses), ImageGrid(h, w, p))


# -- noise ------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    gaussian_fraction: float = 0.05
    poisson_intensity: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_fraction < 0:
            raise ValueError("gaussian_fraction must be >= 0")
        if not self.poisson_intensity > 0:
            raise ValueError("poisson_intensity must be > 0")


def add_mixed_noise(y, spec: NoiseSpec):
    """Poisson counts at ``poisson_intensity`` total expected counts, then
    Gaussian noise with std ``gaussian_fraction`` times the mean positive
    Poisson-stage value. Returns the same type as ``y``.
    """
    is_sino = isinstance(y, Sinogram)
    data = np.asarray(y.data if is_sino else y, dtype=np.float64)
    if np.any(data < 0):
        raise ValueError("noise model needs non-negative data")
    rng = _rng(spec.seed)
    total = data.sum()
    if total > 0:
        scale = spec.poisson_intensity / total
        noisy = rng.poisson(scale * data) / scale
    else:
        noisy = data.copy()
    pos = noisy[noisy > 0]
    sigma = spec.gaussian_fraction * (pos.mean() if pos.size else 0.0)
    noisy = noisy + sigma * rng.standard_normal(data.shape)
    if is_sino:
        return Sinogram(noisy, y.geometry, y.grid)
    return noisy


# -- metrics ----------------------------------------------------------------

def psnr(x, ref, data_range: float = 1.0) -> float:
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(x, ref, data_range: float = 1.0, win: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """Mean SSIM over all fully covered 11x11 Gaussian windows."""
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if x.ndim != 2 or min(x.shape) < win:
        raise ValueError(f"ssim needs 2-D images of at least {win}x{win}")
    g = _gaussian_window(win, sigma)
    crop = (win - 1) // 2

    def blur(a):
        a = correlate1d(a, g, axis=0, mode="reflect")
        a = correlate1d(a, g, axis=1, mode="reflect")
        return a[crop:-crop, crop:-crop]

    mx, my = blur(x), blur(ref)
    vx = blur(x * x) - mx * mx
    vy = blur(ref * ref) - my * my
    cxy = blur(x * ref) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(smap.mean())


# -- raw files --------------------------------------------------------------

def _write_raw(path, arr, magic: bytes) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def _read_raw(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    a, b = struct.unpack_from("<II", raw, 8)
    return np.frombuffer(raw, "<f4", a * b, 16).reshape(a, b).astype(np.float32)


def write_image(path, img) -> None:
    _write_raw(path, img, IMAGE_MAGIC)


def read_image(path) -> np.ndarray:
    return _read_raw(path, IMAGE_MAGIC)


def write_sinogram(path, sino) -> None:
    _write_raw(path, getattr(sino, "data", sino), SINO_MAGIC)


def read_sinogram(path) -> np.ndarray:
    return _read_raw(path, SINO_MAGIC)


def write_pgm(path, img, vmin: float | None = None, vmax: float | None = None) -> None:
    """16-bit binary PGM (P5), linearly scaled from [vmin, vmax]."""
    img = np.asarray(img, dtype=np.float64)
    lo = float(img.min()) if vmin is None else vmin
    hi = float(img.max()) if vmax is None else vmax
    scaled = np.zeros_like(img) if hi <= lo else np.clip((img - lo) / (hi - lo), 0, 1)
    data = np.round(scaled * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(data.tobytes())


def ingest_raw_image(path, img: ImageGrid) -> np.ndarray:
    """Load a CSTI slice as a phantom: resample to the grid, rescale to [0, 1], mask the support."""
    src = read_image(path).astype(np.float64)
    out = zoom(src, (img.h / src.shape[0], img.w / src.shape[1]), order=1)
    out = out[: img.h, : img.w]
    lo, hi = out.min(), out.max()
    out = (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)
    out[~img.support_mask()] = 0.0
    return out


# -- datasets ---------------------------------------------------------------

@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    clean: np.ndarray
    sinogram: np.ndarray
    phantom_seed: int
    noise_seed: int | None = None


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return getattr(self, name)


def make_sample(A: SparseOperator, sample_id: str, phantom_seed: int, noise: NoiseSpec | None,
                n_ellipses: int | None = None) -> Sample:
    h, w = A.image_shape
    image = random_ellipse_phantom(phantom_seed, n_ellipses, h, w).astype(np.float32)
    clean = (A.matrix @ image.astype(np.float64).ravel()).reshape(A.sino_shape)
    noisy, noise_seed = clean, None
    if noise is not None:
        noise_seed = NOISE_SEED_OFFSET + noise.seed * (1 << 32) + phantom_seed
        noisy = add_mixed_noise(clean, NoiseSpec(noise.gaussian_fraction, noise.poisson_intensity, noise_seed))
    return Sample(sample_id, image, clean.astype(np.float32), np.asarray(noisy, dtype=np.float32),
                  phantom_seed, noise_seed)


def split_seeds(seed: int, split: str, n: int) -> list[int]:
    base = {"train": 0, "val": 1, "test": 2}[split]
    return [seed * 3 * SPLIT_SEED_STRIDE + base * SPLIT_SEED_STRIDE + i for i in range(n)]


def build_dataset(A: SparseOperator, n_train: int, n_val: int, seed: int = 0, noise: NoiseSpec | None = None,
                  out_dir=None, geometry_hash: str = "", n_test: int = 0,
                  n_ellipses: int | None = None) -> Dataset:
    """Generate phantom/sinogram pairs; optionally write them plus a manifest.

    Phantom seeds of the splits come from disjoint ranges. Each noise draw is
    keyed by its own seed, so samples can be generated in any order.
    """
    ds = Dataset()
    manifest = {"geometry_hash": geometry_hash, "image_shape": list(A.image_shape),
                "sino_shape": list(A.sino_shape), "seed": seed,
                "noise": asdict(noise) if noise is not None else None, "n_ellipses": n_ellipses, "splits": {}}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        entries = []
        for i, ps in enumerate(split_seeds(seed, split, n)):
            sid = f"{split}_{i:05d}"
            s = make_sample(A, sid, ps, noise, n_ellipses)
            ds.split(split).append(s)
            entry = {"id": sid, "phantom_seed": ps, "noise_seed": s.noise_seed,
                     "image": f"{sid}.csti", "clean": f"{sid}_clean.csts",
                     "noisy": f"{sid}_noisy.csts" if noise is not None else None}
            if out is not None:
                try:
                    write_image(out / entry["image"], s.image)
                    write_sinogram(out / entry["clean"], s.clean)
                    if noise is not None:
                        write_sinogram(out / entry["noisy"], s.sinogram)
                except OSError as exc:
                    raise OSError(f"failed writing dataset file in {out}: {exc}") from exc
            entries.append(entry)
        manifest["splits"][split] = entries
    ds.manifest = manifest
    if out is not None:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return ds


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    root = path.parent
    ds = Dataset(manifest=manifest)
    for split, entries in manifest["splits"].items():
        for e in entries:
            clean = read_sinogram(root / e["clean"])
            noisy = read_sinogram(root / e["noisy"]) if e.get("noisy") else clean
            ds.split(split).append(Sample(e["id"], read_image(root / e["image"]), clean, noisy,
                                          e["phantom_seed"], e.get("noise_seed")))
    return ds


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
