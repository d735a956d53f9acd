"""Unrolled wavelet network.

Each of the ``t`` iterations computes::

    x <- x - lambda_t * D(A x - y) + G_t(x)

where ``D`` is a fixed data-term operator (by default the Tikhonov
pseudo-inverse) and ``G_t`` is a learned block: a 5x5 convolution lifts the
image to ``c`` channels, the LL Haar subband goes through two Swin blocks
(plain, then shifted), the detail subbands pass through untouched, and a
final 5x5 convolution maps ``cat(z, f)`` back to one channel.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (OptimizerState, Tape, Tensor, adamw_step, backward, conv2d, conv_params, dwt2, idwt2,
                       linear_map, mse_loss, swin_block, swin_params, zero_grads)
from .autodiff.tensor import concat, getitem, reshape
from .operator import SparseOperator
from .simulate import psnr, ssim
from .solvers import DataOperator

CHECKPOINT_MAGIC = b"UWNC"
CHECKPOINT_VERSION = 1


def default_heads(c: int) -> int:
    return 4 if c >= 32 else 2


@dataclass
class ArchConfig:
    t: int = 4
    c: int = 8
    window: int = 8
    heads: int | None = None
    kernel: int = 5
    variant: str = "ll"

    def __post_init__(self):
        if self.heads is None:
            self.heads = default_heads(self.c)
        if self.t < 1 or self.c < 1:
            raise ValueError("t and c must be positive")
        if self.c % self.heads:
            raise ValueError(f"c={self.c} not divisible by heads={self.heads}")
        if self.variant not in ("ll", "fullres"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class UnWaveNetParams:
    arch: ArchConfig
    tensors: dict[str, Tensor]

    def block(self, t: int) -> dict[str, Tensor]:
        prefix = f"blocks.{t}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def lam(self, t: int) -> Tensor:
        return self.tensors[f"lambdas.{t}"]

    @property
    def lambdas(self) -> list[float]:
        return [float(self.lam(t).data) for t in range(self.arch.t)]

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def astype(self, dtype) -> "UnWaveNetParams":
        return UnWaveNetParams(self.arch, {k: Tensor(v.data.astype(dtype), requires_grad=True)
                                           for k, v in self.tensors.items()})

    def zero_(self, pattern: str = "") -> None:
        for k, v in self.tensors.items():
            if pattern in k:
                v.data = np.zeros_like(v.data)


def block_params(c: int, kernel: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    p = {}
    p["conv_in.w"], p["conv_in.b"] = conv_params(kernel, kernel, 1, c, rng, dtype)
    for i in range(2):
        for k, v in swin_params(c, rng, dtype).items():
            p[f"swin.{i}.{k}"] = v
    p["conv_out.w"], p["conv_out.b"] = conv_params(kernel, kernel, 2 * c, 1, rng, dtype)
    return p


def init_params(arch: ArchConfig, seed: int = 0, dtype=np.float32, lam0: float = 0.1) -> UnWaveNetParams:
    rng = np.random.Generator(np.random.Philox(seed))
    tensors = {}
    for t in range(arch.t):
        tensors[f"lambdas.{t}"] = Tensor(np.asarray(lam0, dtype=dtype), requires_grad=True)
        for k, v in block_params(arch.c, arch.kernel, rng, dtype).items():
            tensors[f"blocks.{t}.{k}"] = v
    return UnWaveNetParams(arch, tensors)


def _swin_pair(z: Tensor, bp: dict, arch: ArchConfig) -> Tensor:
    for i in range(2):
        sub = {k[len(f"swin.{i}."):]: v for k, v in bp.items() if k.startswith(f"swin.{i}.")}
        z = swin_block(z, sub, arch.window, arch.heads, shifted=(i == 1))
    return z


def wave_reg_block(x: Tensor, bp: dict, arch: ArchConfig, return_features: bool = False):
    """Learned regularization gradient G(x) for an (h, w, 1) image."""
    if x.ndim != 3 or x.shape[2] != 1:
        raise ValueError(f"expected an (h, w, 1) image, got {x.shape}")
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise ValueError(f"image dimensions must be even, got {x.shape[:2]}")
    c = arch.c
    z = conv2d(x, bp["conv_in.w"], bp["conv_in.b"])
    w = dwt2(z)
    ll = _swin_pair(getitem(w, (Ellipsis, slice(0, c))), bp, arch)
    f = idwt2(concat([ll, getitem(w, (Ellipsis, slice(c, None)))], axis=-1))
    out = conv2d(concat([z, f], axis=-1), bp["conv_out.w"], bp["conv_out.b"])
    return (out, z, f) if return_features else out


def ablation_fullres_variant(x: Tensor, bp: dict, arch: ArchConfig, return_features: bool = False):
    """Same block with the Swin pair applied to the full-resolution features."""
    if x.ndim != 3 or x.shape[2] != 1:
        raise ValueError(f"expected an (h, w, 1) image, got {x.shape}")
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise ValueError(f"image dimensions must be even, got {x.shape[:2]}")
    z = conv2d(x, bp["conv_in.w"], bp["conv_in.b"])
    f = _swin_pair(z, bp, arch)
    out = conv2d(concat([z, f], axis=-1), bp["conv_out.w"], bp["conv_out.b"])
    return (out, z, f) if return_features else out


def regularizer(arch: ArchConfig):
    return wave_reg_block if arch.variant == "ll" else ablation_fullres_variant


def unrolled_forward(y, A: SparseOperator, D: DataOperator, params: UnWaveNetParams, x0=None) -> Tensor:
    """Run ``t`` unrolled iterations; returns the (h, w) reconstruction.

    ``A`` and ``D`` are fixed. ``x0`` defaults to D(y).
    """
    arch = params.arch
    dtype = next(iter(params.tensors.values())).dtype
    h, w = A.image_shape
    yv = np.asarray(getattr(y, "data", y), dtype=dtype).ravel()
    if yv.size != A.m:
        raise ValueError(f"sinogram size {yv.size} does not match operator rows {A.m}")
    M = A.matrix
    if x0 is None:
        x0 = D.apply(yv)
    x0 = np.asarray(getattr(x0, "data", x0), dtype=dtype)
    if x0.size != A.n:
        raise ValueError(f"initial image size {x0.size} does not match operator columns {A.n}")
    x = Tensor(x0.reshape(h, w, 1))
    reg = regularizer(arch)
    for t in range(arch.t):
        r = linear_map(x, lambda v: M @ v, lambda g: M.T @ g) - yv
        d = reshape(linear_map(r, D.apply, D.adjoint), (h, w, 1))
        x = x - params.lam(t) * d + reg(x, params.block(t), arch)
    return reshape(x, (h, w))


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-2
    decay_at: float = 0.8
    decay_factor: float = 0.1
    seed: int = 0
    clip_norm: float = 1.0  # global gradient-norm clip; 0 disables

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.decay_factor if epoch >= int(round(self.decay_at * self.epochs)) else 1.0)


@dataclass
class Checkpoint:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    data_op: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    loss_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    geometry_hash: str = ""
    optimizer: dict | None = None
    version: int = CHECKPOINT_VERSION

    def to_params(self, dtype=np.float32) -> UnWaveNetParams:
        return UnWaveNetParams(self.arch, {k: Tensor(v.astype(dtype), requires_grad=True)
                                           for k, v in self.params.items()})

    def optimizer_state(self) -> OptimizerState | None:
        if self.optimizer is None:
            return None
        o = self.optimizer
        return OptimizerState(lr=o["lr"], weight_decay=o["weight_decay"], beta1=o["beta1"], beta2=o["beta2"],
                              eps=o["eps"], step=o["step"], m=dict(o["m"]), v=dict(o["v"]))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def _snapshot(params: UnWaveNetParams, opt: OptimizerState | None, tcfg: TrainConfig, D: DataOperator,
              epoch: int, losses: list, lrs: list, geometry_hash: str) -> Checkpoint:
    optimizer = None
    if opt is not None:
        optimizer = {"lr": opt.lr, "weight_decay": opt.weight_decay, "beta1": opt.beta1, "beta2": opt.beta2,
                     "eps": opt.eps, "step": opt.step,
                     "m": {k: v.copy() for k, v in opt.m.items()}, "v": {k: v.copy() for k, v in opt.v.items()}}
    return Checkpoint(arch=params.arch, params={k: v.data.copy() for k, v in params.tensors.items()},
                      data_op=D.config(), train=asdict(tcfg), epoch=epoch, seed=tcfg.seed,
                      loss_history=list(losses), lr_history=list(lrs), geometry_hash=geometry_hash,
                      optimizer=optimizer)


def clip_grad_norm(tensors: dict, max_norm: float) -> float:
    """Rescale all gradients in place so their joint l2 norm is at most ``max_norm``."""
    grads = [t.grad for t in tensors.values() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def train(samples, A: SparseOperator, D: DataOperator, arch: ArchConfig, tcfg: TrainConfig,
          resume: Checkpoint | None = None, geometry_hash: str = "", log=None,
          epoch_callback=None) -> Checkpoint:
    """AdamW + MSE, batch size 1, lr decayed once after ``decay_at`` of the epochs.

    ``samples`` is a sequence of objects with ``image`` (h, w) and ``sinogram``
    (K, N_E). Sample order per epoch is a seeded permutation, so a run
    resumed from a checkpoint reproduces the uninterrupted run.
    """
    dtype = np.float32
    if resume is not None:
        params = resume.to_params(dtype)
        opt = resume.optimizer_state() or OptimizerState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        losses, lrs, start = list(resume.loss_history), list(resume.lr_history), resume.epoch
    else:
        params = init_params(arch, tcfg.seed, dtype)
        opt = OptimizerState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        losses, lrs, start = [], [], 0
    gts = [np.asarray(s.image, dtype=dtype) for s in samples]
    ys = [np.asarray(getattr(s.sinogram, "data", s.sinogram), dtype=dtype).ravel() for s in samples]
    x0s = [np.asarray(D.apply(y), dtype=dtype) for y in ys]
    for epoch in range(start, tcfg.epochs):
        opt.lr = tcfg.lr_at(epoch)
        order = np.random.Generator(np.random.Philox(key=tcfg.seed, counter=epoch)).permutation(len(samples))
        total = 0.0
        for i in order:
            zero_grads(params.tensors)
            with Tape() as tape:
                out = unrolled_forward(ys[i], A, D, params, x0=x0s[i])
                loss = mse_loss(out, gts[i])
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, sample {i}",
                                       _snapshot(params, opt, tcfg, D, epoch, losses, lrs, geometry_hash))
            backward(loss, tape)
            if tcfg.clip_norm > 0:
                clip_grad_norm(params.tensors, tcfg.clip_norm)
            adamw_step(params.tensors, opt)
            total += lv
        losses.append(total / len(samples))
        lrs.append(opt.lr)
        if log:
            log(f"epoch {epoch + 1}/{tcfg.epochs} loss {losses[-1]:.6e} lr {opt.lr:.1e}")
        if epoch_callback:
            epoch_callback(_snapshot(params, opt, tcfg, D, epoch + 1, losses, lrs, geometry_hash))
    return _snapshot(params, opt, tcfg, D, tcfg.epochs, losses, lrs, geometry_hash)


# -- evaluation -------------------------------------------------------------

@dataclass
class MetricsTable:
    rows: list  # dicts: sample_id, psnr_db, ssim, wall_ms

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr_db"] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows]))

    def metric_rows(self) -> list:
        """Rows without timings, for reproducibility comparisons."""
        return [(r["sample_id"], r["psnr_db"], r["ssim"]) for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sample_id", "psnr_db", "ssim", "wall_ms"])
            for r in self.rows:
                wr.writerow([r["sample_id"], repr(r["psnr_db"]), repr(r["ssim"]), f"{r['wall_ms']:.3f}"])
            wr.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim), ""])


def evaluate_reconstructor(recon, samples, data_range: float = 1.0) -> MetricsTable:
    """Score ``recon(sample) -> image`` against each sample's ground truth."""
    rows = []
    for i, s in enumerate(samples):
        t0 = time.perf_counter()
        img = np.asarray(recon(s), dtype=np.float64)
        ms = (time.perf_counter() - t0) * 1e3
        truth = np.asarray(s.image, dtype=np.float64)
        rows.append({"sample_id": getattr(s, "sample_id", i), "psnr_db": psnr(img, truth, data_range),
                     "ssim": ssim(img, truth, data_range), "wall_ms": ms})
    return MetricsTable(rows)


def evaluate(ckpt: Checkpoint, samples, A: SparseOperator, D: DataOperator, geometry_hash: str | None = None,
             dtype=np.float32) -> MetricsTable:
    if geometry_hash and ckpt.geometry_hash and geometry_hash != ckpt.geometry_hash:
        raise ValueError("checkpoint geometry does not match the dataset geometry")
    params = ckpt.to_params(dtype)
    for s in samples:
        if np.shape(s.image) != tuple(A.image_shape):
            raise ValueError(f"sample image shape {np.shape(s.image)} != operator {A.image_shape}")

    def recon(s):
        return unrolled_forward(s.sinogram, A, D, params).data

    return evaluate_reconstructor(recon, samples)


# -- persistence ------------------------------------------------------------

def _arch_dict(arch: ArchConfig) -> dict:
    return asdict(arch)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    meta = {
        "version": ckpt.version, "arch": _arch_dict(ckpt.arch), "data_op": ckpt.data_op, "train": ckpt.train,
        "epoch": ckpt.epoch, "seed": ckpt.seed, "loss_history": ckpt.loss_history,
        "lr_history": ckpt.lr_history, "geometry_hash": ckpt.geometry_hash,
        "optimizer": None if ckpt.optimizer is None else {k: v for k, v in ckpt.optimizer.items()
                                                          if k not in ("m", "v")},
    }
    tensors = dict(ckpt.params)
    if ckpt.optimizer is not None:
        tensors.update({f"opt.m.{k}": v for k, v in ckpt.optimizer["m"].items()})
        tensors.update({f"opt.v.{k}": v for k, v in ckpt.optimizer["v"].items()})
    blob = json.dumps(meta, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(raw[off:off + n].decode())
    off += n
    tensors = {}
    while off < len(raw):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode()
        off += ln
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
        off += 4 * count
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    optimizer = meta.get("optimizer")
    if optimizer is not None:
        optimizer = dict(optimizer)
        optimizer["m"] = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        optimizer["v"] = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    return Checkpoint(arch=ArchConfig(**meta["arch"]), params=params, data_op=meta["data_op"], train=meta["train"],
                      epoch=meta["epoch"], seed=meta["seed"], loss_history=meta["loss_history"],
                      lr_history=meta.get("lr_history", []), geometry_hash=meta["geometry_hash"],
                      optimizer=optimizer, version=meta["version"])


def write_loss_csv(path, ckpt: Checkpoint) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "mean_loss", "lr"])
        for e, (loss, lr) in enumerate(zip(ckpt.loss_history, ckpt.lr_history), start=1):
            wr.writerow([e, repr(loss), repr(lr)])
