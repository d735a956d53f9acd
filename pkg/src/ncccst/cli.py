"""Command-line driver: simulate, reconstruct, train, evaluate, bench.

Every command reads one strict JSON run configuration. The resolved
configuration and its hash are copied into the output directory, and the
assembled forward operator is cached under a hash of the sections that
determine it.

Exit codes: 0 ok, 2 config/usage, 3 I/O, 4 incompatible inputs, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from . import operator as op
from . import simulate as sim
from . import solvers, unwavenet
from .autodiff import Tensor
from .geometry import ComptonSpec, DomainError, SystemGeometry, build_energy_grid

log = logging.getLogger("ncccst")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INCOMPATIBLE, EXIT_NUMERIC = 0, 2, 3, 4, 5
ENV_OUTPUT_DIR = "NCCCST_OUTPUT_DIR"
ENV_THREADS = "NCCCST_THREADS"
METHODS = ("pinv", "tsvd", "art", "tv", "gd", "unwavenet")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration ----------------------------------------------------------

@dataclass
class GeometrySection:
    P: float = 1.0
    K: int = 32


@dataclass
class EnergySection:
    E0: float = 0.3
    delta_e: float = 0.003375


@dataclass
class ImageSection:
    h: int = 64
    w: int = 64


@dataclass
class OperatorSection:
    samples_per_pixel: int = 4


@dataclass
class SolverSection:
    max_iters: int = 500
    lam: float = 1000.0
    tau: float = 1e-3
    rank: int = 200
    sweeps: int = 10
    relaxation: float = 1.0


@dataclass
class NetworkSection:
    t: int = 4
    c: int = 8
    window: int = 8
    heads: int | None = None
    kernel: int = 5
    variant: str = "ll"
    data_op: str = "pinv"
    data_tau: float = 1e-3
    cgls_k: int = 10


@dataclass
class TrainSection:
    epochs: int = 30
    lr: float = 3e-3
    weight_decay: float = 1e-2
    decay_at: float = 0.8
    decay_factor: float = 0.1
    clip_norm: float = 1.0


@dataclass
class NoiseSection:
    enabled: bool = True
    gaussian_fraction: float = 0.05
    poisson_intensity: float = 1e6


@dataclass
class DatasetSection:
    n_train: int = 200
    n_val: int = 10
    n_test: int = 20
    n_ellipses: int | None = None


@dataclass
class SeedsSection:
    data: int = 0
    noise: int = 0
    train: int = 0


@dataclass
class RunConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    energy: EnergySection = field(default_factory=EnergySection)
    image: ImageSection = field(default_factory=ImageSection)
    operator: OperatorSection = field(default_factory=OperatorSection)
    solver: SolverSection = field(default_factory=SolverSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    output_dir: str = "runs/default"
    cache_dir: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Hash of everything that affects results (not where they go)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("cache_dir")
        return _digest(d)

    def operator_hash(self) -> str:
        d = self.to_dict()
        return _digest({k: d[k] for k in ("geometry", "energy", "image", "operator")})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


def _key_line(text: str, path: list[str]) -> int | None:
    """Best-effort line number of the innermost key of ``path`` in ``text``."""
    pos = 0
    for key in path:
        hit = text.find(f'"{key}"', pos)
        if hit < 0:
            return None
        pos = hit
    return text.count("\n", 0, pos) + 1


def _check_type(value, annotation: str) -> bool:
    kinds = [a.strip() for a in annotation.split("|")]
    for k in kinds:
        if k == "None" and value is None:
            return True
        if k == "bool" and isinstance(value, bool):
            return True
        if k == "int" and isinstance(value, int) and not isinstance(value, bool):
            return True
        if k == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if k == "str" and isinstance(value, str):
            return True
    return False


# (section, field) -> (predicate, message)
_CONSTRAINTS = {
    ("geometry", "P"): (lambda v: v > 0 and math.isfinite(v), "must be a positive finite number"),
    ("geometry", "K"): (lambda v: v >= 1, "must be >= 1"),
    ("energy", "E0"): (lambda v: v > 0 and math.isfinite(v), "must be a positive finite number"),
    ("energy", "delta_e"): (lambda v: v > 0 and math.isfinite(v), "must be > 0"),
    ("image", "h"): (lambda v: v >= 4 and v % 2 == 0, "must be an even integer >= 4"),
    ("image", "w"): (lambda v: v >= 4 and v % 2 == 0, "must be an even integer >= 4"),
    ("operator", "samples_per_pixel"): (lambda v: v >= 2, "must be >= 2"),
    ("solver", "max_iters"): (lambda v: v >= 1, "must be >= 1"),
    ("solver", "lam"): (lambda v: v > 0, "must be > 0"),
    ("solver", "tau"): (lambda v: v >= 0, "must be >= 0"),
    ("solver", "rank"): (lambda v: v >= 1, "must be >= 1"),
    ("solver", "sweeps"): (lambda v: v >= 1, "must be >= 1"),
    ("solver", "relaxation"): (lambda v: 0 < v < 2, "must lie in (0, 2)"),
    ("network", "t"): (lambda v: v >= 1, "must be >= 1"),
    ("network", "c"): (lambda v: v >= 1, "must be >= 1"),
    ("network", "window"): (lambda v: v >= 1, "must be >= 1"),
    ("network", "heads"): (lambda v: v is None or v >= 1, "must be >= 1 or null"),
    ("network", "kernel"): (lambda v: v >= 1 and v % 2 == 1, "must be an odd integer"),
    ("network", "variant"): (lambda v: v in ("ll", "fullres"), "must be 'll' or 'fullres'"),
    ("network", "data_op"): (lambda v: v in ("pinv", "adjoint", "cgls"), "must be 'pinv', 'adjoint' or 'cgls'"),
    ("network", "data_tau"): (lambda v: v >= 0, "must be >= 0"),
    ("network", "cgls_k"): (lambda v: v >= 1, "must be >= 1"),
    ("train", "epochs"): (lambda v: v >= 1, "must be >= 1"),
    ("train", "lr"): (lambda v: v >= 0, "must be >= 0"),
    ("train", "weight_decay"): (lambda v: v >= 0, "must be >= 0"),
    ("train", "decay_at"): (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    ("train", "decay_factor"): (lambda v: v > 0, "must be > 0"),
    ("train", "clip_norm"): (lambda v: v >= 0, "must be >= 0"),
    ("noise", "gaussian_fraction"): (lambda v: v >= 0, "must be >= 0"),
    ("noise", "poisson_intensity"): (lambda v: v > 0, "must be > 0"),
    ("dataset", "n_train"): (lambda v: v >= 0, "must be >= 0"),
    ("dataset", "n_val"): (lambda v: v >= 0, "must be >= 0"),
    ("dataset", "n_test"): (lambda v: v >= 0, "must be >= 0"),
    ("dataset", "n_ellipses"): (lambda v: v is None or 1 <= v <= 12, "must lie in [1, 12] or be null"),
    ("seeds", "data"): (lambda v: v >= 0, "must be >= 0"),
    ("seeds", "noise"): (lambda v: v >= 0, "must be >= 0"),
    ("seeds", "train"): (lambda v: v >= 0, "must be >= 0"),
}


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError([f"duplicate key {k!r}"])
        out[k] = v
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a JSON run configuration.

    All problems are collected and reported as ``source:line: field: message``.
    """
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{source}:{exc.lineno}: invalid JSON: {exc.msg}"]) from None
    except ConfigError as exc:
        raise ConfigError([f"{source}: {e}" for e in exc.errors]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{source}:1: top level must be a JSON object"])

    errors = []

    def where(path):
        line = _key_line(text, path)
        return f"{source}:{line}" if line else source

    top = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in top:
            errors.append(f"{where([key])}: {key}: unknown key")
            continue
        f = top[key]
        if f.default_factory is not dataclasses.MISSING and dataclasses.is_dataclass(f.default_factory):
            cls = f.default_factory
            if not isinstance(value, dict):
                errors.append(f"{where([key])}: {key}: must be an object")
                continue
            sub = {g.name: g for g in dataclasses.fields(cls)}
            vals = {}
            for k2, v2 in value.items():
                name = f"{key}.{k2}"
                if k2 not in sub:
                    errors.append(f"{where([key, k2])}: {name}: unknown key")
                    continue
                if not _check_type(v2, str(sub[k2].type)):
                    errors.append(f"{where([key, k2])}: {name}: expected {sub[k2].type}, got {json.dumps(v2)}")
                    continue
                check = _CONSTRAINTS.get((key, k2))
                if check and not check[0](v2):
                    errors.append(f"{where([key, k2])}: {name}: {check[1]} (got {json.dumps(v2)})")
                    continue
                vals[k2] = float(v2) if str(sub[k2].type) == "float" else v2
            kwargs[key] = cls(**vals)
        else:
            if not _check_type(value, str(f.type)):
                errors.append(f"{where([key])}: {key}: expected {f.type}, got {json.dumps(value)}")
                continue
            kwargs[key] = value
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**kwargs)
    errors = _semantic_errors(cfg, where)
    if errors:
        raise ConfigError(errors)
    return cfg


def _semantic_errors(cfg: RunConfig, where) -> list[str]:
    """Cross-field checks that need the domain objects."""
    errors = []
    try:
        spec = ComptonSpec(cfg.energy.E0)
        build_energy_grid(spec, cfg.energy.delta_e)
    except (DomainError, ValueError) as exc:
        errors.append(f"{where(['energy', 'delta_e'])}: energy.delta_e: {exc}")
    if cfg.image.h != cfg.image.w:
        errors.append(f"{where(['image', 'w'])}: image.w: must equal image.h (square grid)")
    heads = cfg.network.heads or unwavenet.default_heads(cfg.network.c)
    if cfg.network.c % heads:
        errors.append(f"{where(['network', 'c'])}: network.c: not divisible by {heads} attention heads")
    return errors


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from None
    try:
        return parse_config(text, str(path))
    except ConfigError as exc:
        raise CLIError("invalid configuration:\n" + str(exc), EXIT_CONFIG) from None


# -- shared plumbing --------------------------------------------------------

@dataclass
class Context:
    cfg: RunConfig
    out: Path
    threads: int
    timings: dict = field(default_factory=dict)
    _A: op.SparseOperator | None = None

    @property
    def config_hash(self) -> str:
        return self.cfg.hash()

    @property
    def geometry_hash(self) -> str:
        return self.cfg.operator_hash()

    def operator(self) -> op.SparseOperator:
        if self._A is None:
            self._A = _cached_operator(self)
        return self._A

    @property
    def dataset_dir(self) -> Path:
        return self.out / "dataset"


def _make_context(args) -> Context:
    cfg = load_config(args.config)
    out = os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir
    if getattr(args, "output_dir", None):
        out = args.output_dir
    cfg.output_dir = str(out)
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "config.sha256").write_text(cfg.hash() + "\n")
    except OSError as exc:
        raise CLIError(f"cannot write to output directory {out}: {exc}", EXIT_IO) from None
    return Context(cfg, out, args.threads)


def _cached_operator(ctx: Context) -> op.SparseOperator:
    cfg = ctx.cfg
    spec = ComptonSpec(cfg.energy.E0)
    grid = build_energy_grid(spec, cfg.energy.delta_e)
    geom = SystemGeometry(cfg.geometry.P, cfg.geometry.K)
    img = op.ImageGrid(cfg.image.h, cfg.image.w, cfg.geometry.P)
    cache = Path(cfg.cache_dir) if cfg.cache_dir else ctx.out / "operator_cache"
    path = cache / f"{ctx.geometry_hash[:16]}.csta"
    sino_shape, image_shape = (geom.k, grid.n_e), (img.h, img.w)
    t0 = time.perf_counter()
    if path.exists():
        log.info("reusing cached operator %s", path)
        A = op.load_operator(path, sino_shape, image_shape)
        if A.shape != (geom.k * grid.n_e, img.n):
            raise CLIError(f"cached operator {path} has shape {A.shape}, expected "
                           f"{(geom.k * grid.n_e, img.n)}", EXIT_INCOMPATIBLE)
    else:
        log.info("assembling operator: K=%d, N_E=%d, %dx%d", geom.k, grid.n_e, img.h, img.w)
        A = op.assemble(geom, grid, img, cfg.operator.samples_per_pixel, threads=ctx.threads)
        cache.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        op.save_operator(tmp, A)
        os.replace(tmp, path)
        log.info("cached operator at %s", path)
    ctx.timings["assembly_ms"] = (time.perf_counter() - t0) * 1e3
    return A


def _noise_spec(cfg: RunConfig) -> sim.NoiseSpec | None:
    if not cfg.noise.enabled:
        return None
    return sim.NoiseSpec(cfg.noise.gaussian_fraction, cfg.noise.poisson_intensity, cfg.seeds.noise)


def _load_manifest(ctx: Context, manifest: str | None) -> sim.Dataset:
    path = Path(manifest) if manifest else ctx.dataset_dir / "manifest.json"
    if not path.exists():
        raise CLIError(f"dataset manifest not found: {path} (run 'simulate' first)", EXIT_CONFIG)
    ds = sim.load_dataset(path)
    mh = ds.manifest.get("geometry_hash")
    if mh and mh != ctx.geometry_hash:
        raise CLIError(f"dataset {path} was simulated for a different geometry", EXIT_INCOMPATIBLE)
    return ds


def _data_operator(A: op.SparseOperator, net: NetworkSection | dict) -> solvers.DataOperator:
    if isinstance(net, dict):
        kind = net.get("kind", "pinv")
        if kind == "pinv":
            return solvers.PinvData(A, net.get("tau", 1e-3), np.float32)
        if kind == "adjoint":
            return solvers.AdjointData(A, net.get("scale", 1.0))
        return solvers.CGLSData(A, net.get("k", 10), net.get("tau", 0.0))
    if net.data_op == "pinv":
        return solvers.PinvData(A, net.data_tau, np.float32)
    if net.data_op == "adjoint":
        return solvers.AdjointData.normalized(A)
    return solvers.CGLSData(A, net.cgls_k, net.data_tau)


def _arch(net: NetworkSection) -> unwavenet.ArchConfig:
    return unwavenet.ArchConfig(t=net.t, c=net.c, window=net.window, heads=net.heads, kernel=net.kernel,
                                variant=net.variant)


def _train_config(cfg: RunConfig) -> unwavenet.TrainConfig:
    t = cfg.train
    return unwavenet.TrainConfig(epochs=t.epochs, lr=t.lr, weight_decay=t.weight_decay, decay_at=t.decay_at,
                                 decay_factor=t.decay_factor, clip_norm=t.clip_norm,
                                 seed=cfg.seeds.train)


def _load_checkpoint(path) -> unwavenet.Checkpoint:
    if not path:
        raise CLIError("a checkpoint is required (--checkpoint)", EXIT_CONFIG)
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}", EXIT_CONFIG)
    try:
        return unwavenet.load_checkpoint(path)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_INCOMPATIBLE) from None


def _write_report(ctx: Context, path: Path, table: unwavenet.MetricsTable | None, extra: dict) -> None:
    report = {"config_hash": ctx.config_hash, "timings_ms": ctx.timings, **extra}
    if table is not None and table.rows:
        report["mean_psnr_db"] = table.mean_psnr
        report["mean_ssim"] = table.mean_ssim
        report["n_samples"] = len(table.rows)
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=float) + "\n")


# -- commands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    ctx = _make_context(args)
    A = ctx.operator()
    d = ctx.cfg.dataset
    t0 = time.perf_counter()
    sim.build_dataset(A, d.n_train, d.n_val, seed=ctx.cfg.seeds.data, noise=_noise_spec(ctx.cfg),
                      out_dir=ctx.dataset_dir, geometry_hash=ctx.geometry_hash, n_test=d.n_test,
                      n_ellipses=d.n_ellipses)
    ctx.timings["simulate_ms"] = (time.perf_counter() - t0) * 1e3
    log.info("wrote %d samples to %s", d.n_train + d.n_val + d.n_test, ctx.dataset_dir)
    return EXIT_OK


def _reconstructor(ctx: Context, method: str, checkpoint: str | None):
    """Return ``recon(sinogram) -> image`` for the chosen method."""
    A = ctx.operator()
    s = ctx.cfg.solver
    if method == "pinv":
        return lambda y: solvers.pinv_reconstruct(A, y, s.tau)
    if method == "tsvd":
        return lambda y: solvers.tsvd_reconstruct(A, y, min(s.rank, A.m, A.n))
    if method == "art":
        return lambda y: solvers.kaczmarz(A, y, s.relaxation, s.sweeps).image
    if method == "tv":
        return lambda y: solvers.chambolle_pock_tv(A, y, solvers.SolverConfig(max_iters=s.max_iters,
                                                                              lam=s.lam)).image
    if method == "gd":
        return lambda y: solvers.gradient_descent_recon(A, y, solvers.SolverConfig(max_iters=s.max_iters)).image
    ckpt = _load_checkpoint(checkpoint)
    if ckpt.geometry_hash and ckpt.geometry_hash != ctx.geometry_hash:
        raise CLIError("checkpoint was trained for a different geometry", EXIT_INCOMPATIBLE)
    A32 = A.astype(np.float32)
    D = _data_operator(A, ckpt.data_op)
    params = ckpt.to_params(np.float32)
    return lambda y: unwavenet.unrolled_forward(y, A32, D, params).data


def cmd_reconstruct(args) -> int:
    ctx = _make_context(args)
    A = ctx.operator()
    recon = _reconstructor(ctx, args.method, args.checkpoint)
    out = ctx.out / "recon" / args.method
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        y = sim.read_sinogram(args.input)
        if tuple(y.shape) != tuple(A.sino_shape):
            raise CLIError(f"sinogram shape {y.shape} does not match geometry {A.sino_shape}", EXIT_INCOMPATIBLE)
        truth = sim.read_image(args.truth) if args.truth else None
        if truth is not None and tuple(truth.shape) != tuple(A.image_shape):
            raise CLIError(f"truth shape {truth.shape} does not match image grid {A.image_shape}",
                           EXIT_INCOMPATIBLE)
        samples = [sim.Sample(Path(args.input).stem, truth, y, y, -1)]
    else:
        samples = _load_manifest(ctx, args.manifest).split(args.split)
        if not samples:
            raise CLIError(f"split {args.split!r} of the dataset is empty", EXIT_CONFIG)
    rows = []
    t_all = time.perf_counter()
    for smp in samples:
        t0 = time.perf_counter()
        img = np.asarray(recon(smp.sinogram), dtype=np.float64).reshape(A.image_shape)
        ms = (time.perf_counter() - t0) * 1e3
        if not np.all(np.isfinite(img)):
            raise CLIError(f"non-finite reconstruction for {smp.sample_id}", EXIT_NUMERIC)
        sim.write_image(out / f"{smp.sample_id}.csti", img)
        sim.write_pgm(out / f"{smp.sample_id}.pgm", img, 0.0, 1.0)
        if smp.image is not None:
            truth = np.asarray(smp.image, dtype=np.float64)
            rows.append({"sample_id": smp.sample_id, "psnr_db": sim.psnr(img, truth), "ssim": sim.ssim(img, truth),
                         "wall_ms": ms})
    ctx.timings["total_ms"] = (time.perf_counter() - t_all) * 1e3
    ctx.timings["per_sample_ms"] = ctx.timings["total_ms"] / len(samples)
    table = unwavenet.MetricsTable(rows) if rows else None
    if table is not None:
        table.write_csv(out / "metrics.csv")
        log.info("%s: mean PSNR %.3f dB, mean SSIM %.4f over %d samples", args.method, table.mean_psnr,
                 table.mean_ssim, len(rows))
    _write_report(ctx, out / "report.json", table, {"method": args.method})
    return EXIT_OK


def cmd_train(args) -> int:
    ctx = _make_context(args)
    ds = _load_manifest(ctx, args.manifest)
    if not ds.train:
        raise CLIError("the dataset has no training samples", EXIT_CONFIG)
    A = ctx.operator()
    arch = _arch(ctx.cfg.network)
    tcfg = _train_config(ctx.cfg)
    resume = None
    if args.resume:
        resume = _load_checkpoint(args.resume)
        if resume.geometry_hash and resume.geometry_hash != ctx.geometry_hash:
            raise CLIError("resume checkpoint was trained for a different geometry", EXIT_INCOMPATIBLE)
        if unwavenet._arch_dict(resume.arch) != unwavenet._arch_dict(arch):
            raise CLIError("resume checkpoint architecture differs from the configuration", EXIT_INCOMPATIBLE)
    D = _data_operator(A, ctx.cfg.network)
    ckpt_path = ctx.out / "checkpoint.uwnc"

    def on_epoch(ck):
        unwavenet.save_checkpoint(ckpt_path, ck)
        unwavenet.write_loss_csv(ctx.out / "loss.csv", ck)

    t0 = time.perf_counter()
    try:
        ck = unwavenet.train(ds.train, A.astype(np.float32), D, arch, tcfg, resume=resume,
                             geometry_hash=ctx.geometry_hash, log=log.info, epoch_callback=on_epoch)
    except unwavenet.TrainingDiverged as exc:
        diag = ctx.out / "checkpoint.diverged.uwnc"
        unwavenet.save_checkpoint(diag, exc.checkpoint)
        raise CLIError(f"{exc}; diagnostic checkpoint written to {diag}", EXIT_NUMERIC) from None
    ctx.timings["train_ms"] = (time.perf_counter() - t0) * 1e3
    on_epoch(ck)
    n_epochs = max(1, ck.epoch - (resume.epoch if resume else 0))
    ctx.timings["epoch_ms"] = ctx.timings["train_ms"] / n_epochs
    _write_report(ctx, ctx.out / "train_report.json", None,
                  {"parameters": int(sum(v.size for v in ck.params.values())), "epochs": ck.epoch,
                   "final_loss": ck.loss_history[-1] if ck.loss_history else None})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ctx = _make_context(args)
    ds = _load_manifest(ctx, args.manifest)
    ckpt = _load_checkpoint(args.checkpoint or str(ctx.out / "checkpoint.uwnc"))
    A = ctx.operator()
    if ckpt.geometry_hash and ckpt.geometry_hash != ctx.geometry_hash:
        raise CLIError("checkpoint was trained for a different geometry", EXIT_INCOMPATIBLE)
    samples = ds.split(args.split)
    if not samples:
        raise CLIError(f"split {args.split!r} of the dataset is empty", EXIT_CONFIG)
    t0 = time.perf_counter()
    table = unwavenet.evaluate(ckpt, samples, A.astype(np.float32), _data_operator(A, ckpt.data_op))
    ctx.timings["total_ms"] = (time.perf_counter() - t0) * 1e3
    out = ctx.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "metrics.csv")
    _write_report(ctx, out / "report.json", table, {"checkpoint": str(args.checkpoint), "split": args.split})
    log.info("mean PSNR %.3f dB, mean SSIM %.4f", table.mean_psnr, table.mean_ssim)
    return EXIT_OK


def time_call(fn, repeats: int = 5) -> tuple[float, float]:
    """Median and interquartile range of ``repeats`` wall times, in ms."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return float(med), float(q3 - q1)


def bench_regularizer(variant: str, size: int, c: int, window: int = 8, repeats: int = 5, seed: int = 0):
    arch = unwavenet.ArchConfig(t=1, c=c, window=window, variant=variant)
    params = unwavenet.init_params(arch, seed)
    rng = np.random.Generator(np.random.Philox(seed))
    x = Tensor(rng.random((size, size, 1)).astype(np.float32))
    reg = unwavenet.regularizer(arch)
    reg(x, params.block(0), arch)  # warm-up
    return time_call(lambda: reg(x, params.block(0), arch), repeats)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def cmd_bench(args) -> int:
    ctx = _make_context(args)
    if args.t_sweep:
        return _t_sweep(ctx, args)
    variants = [v for v in args.variants.split(",") if v]
    bad = [v for v in variants if v not in ("ll", "fullres")]
    if bad or not variants:
        raise CLIError(f"unknown variant(s) {bad}; choose from ll, fullres", EXIT_CONFIG)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError:
        raise CLIError(f"--sizes must be a comma-separated list of integers, got {args.sizes!r}", EXIT_CONFIG) from None
    if not sizes or any(s < 4 or s % 2 for s in sizes):
        raise CLIError("--sizes must be even integers >= 4", EXIT_CONFIG)
    c = args.channels or ctx.cfg.network.c
    rows = []
    for v in variants:
        for s in sizes:
            med, iqr = bench_regularizer(v, s, c, ctx.cfg.network.window, args.repeats, ctx.cfg.seeds.train)
            log.info("regularizer %s %dx%d: median %.2f ms (IQR %.2f)", v, s, s, med, iqr)
            rows.append([v, s, f"{med:.3f}", f"{iqr:.3f}"])
    path = Path(args.out) if args.out else ctx.out / "bench.csv"
    _write_rows(path, ["variant", "size", "median_ms", "iqr_ms"], rows)
    if args.unrolled:
        _bench_unrolled(ctx, variants, sizes, c, args.repeats, path.with_name(path.stem + "_unrolled.csv"))
    return EXIT_OK


def _bench_unrolled(ctx: Context, variants, sizes, c: int, repeats: int, path: Path) -> None:
    """Full unrolled inference per (variant, size); uses the scaled adjoint as D so any size is cheap."""
    cfg = ctx.cfg
    spec = ComptonSpec(cfg.energy.E0)
    grid = build_energy_grid(spec, cfg.energy.delta_e)
    geom = SystemGeometry(cfg.geometry.P, cfg.geometry.K)
    rows = []
    for s in sizes:
        A = op.assemble(geom, grid, op.ImageGrid(s, s, cfg.geometry.P), cfg.operator.samples_per_pixel,
                        threads=ctx.threads)
        A32 = A.astype(np.float32)
        D = solvers.AdjointData.normalized(A)
        y = (A.matrix @ sim.shepp_logan(s, s, cfg.geometry.P).ravel()).astype(np.float32)
        for v in variants:
            arch = unwavenet.ArchConfig(t=cfg.network.t, c=c, window=cfg.network.window, variant=v)
            params = unwavenet.init_params(arch, cfg.seeds.train)
            med, iqr = time_call(lambda: unwavenet.unrolled_forward(y, A32, D, params), repeats)
            log.info("unrolled %s %dx%d T=%d: median %.2f ms", v, s, s, arch.t, med)
            rows.append([v, s, f"{med:.3f}", f"{iqr:.3f}"])
    _write_rows(path, ["variant", "size", "median_ms", "iqr_ms"], rows)


def _t_sweep(ctx: Context, args) -> int:
    paths = [p for p in args.t_sweep.split(",") if p]
    missing = [p for p in paths if not Path(p).exists()]
    if not paths or missing:
        raise CLIError(f"T-sweep checkpoints not found: {missing or paths}", EXIT_CONFIG)
    ds = _load_manifest(ctx, args.manifest)
    samples = ds.split(args.split)
    A = ctx.operator()
    A32 = A.astype(np.float32)
    rows = []
    for p in paths:
        ck = _load_checkpoint(p)
        if ck.geometry_hash and ck.geometry_hash != ctx.geometry_hash:
            raise CLIError(f"{p} was trained for a different geometry", EXIT_INCOMPATIBLE)
        table = unwavenet.evaluate(ck, samples, A32, _data_operator(A, ck.data_op))
        rows.append([ck.arch.t, p, repr(table.mean_psnr), repr(table.mean_ssim)])
        log.info("T=%d: mean PSNR %.3f dB, mean SSIM %.4f", ck.arch.t, table.mean_psnr, table.mean_ssim)
    rows.sort(key=lambda r: r[0])
    path = Path(args.out) if args.out else ctx.out / "tsweep.csv"
    _write_rows(path, ["t", "checkpoint", "mean_psnr_db", "mean_ssim"], rows)
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def resolve_threads(flag: int | None) -> int:
    raw = flag if flag is not None else os.environ.get(ENV_THREADS, "1")
    try:
        n = int(raw)
    except ValueError:
        raise CLIError(f"{ENV_THREADS} must be an integer, got {raw!r}", EXIT_CONFIG) from None
    if n < 1:
        raise CLIError(f"thread count must be >= 1, got {n}", EXIT_CONFIG)
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncccst", description="Compton scatter tomography toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="JSON run configuration")
    common.add_argument("--threads", type=int, default=None,
                        help=f"operator-assembly worker threads (env {ENV_THREADS}, default 1)")
    common.add_argument("--output-dir", default=None, help=f"override output directory (env {ENV_OUTPUT_DIR})")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="assemble the operator and simulate a dataset")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct sinograms with a solver or network")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--input", help="single CSTS sinogram (default: the dataset split)")
    s.add_argument("--truth", help="CSTI ground truth for --input")
    s.add_argument("--checkpoint", help="network checkpoint (method unwavenet)")
    s.add_argument("--manifest", help="dataset manifest (default: <output>/dataset/manifest.json)")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("train", parents=[common], help="train the unrolled network")
    s.add_argument("--manifest")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a dataset split")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bench", parents=[common], help="time regularizer variants or sweep T")
    s.add_argument("--variants", default="ll,fullres")
    s.add_argument("--sizes", default="64,128")
    s.add_argument("--channels", type=int, default=None, help="feature depth (default: network.c)")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--unrolled", action="store_true", help="also time full unrolled inference")
    s.add_argument("--t-sweep", default=None, help="comma-separated checkpoints to evaluate against T")
    s.add_argument("--manifest")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--out", help="CSV path (default: <output>/bench.csv or tsweep.csv)")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        args.threads = resolve_threads(args.threads)
        # BLAS/LAPACK reductions are split differently at different thread
        # counts, which moves the last bits of dense results (SVD, pinv);
        # keep them serial so metrics do not depend on --threads, which
        # then only sets the operator-assembly worker count.
        with threadpool_limits(limits=1):
            return args.func(args)
    except CLIError as exc:
        log.error("%s", exc)
        return exc.code
    except (solvers.DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
