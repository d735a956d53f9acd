import numpy as np
import pytest

from ncccst.autodiff import Tensor, gradcheck, mse_loss
from ncccst.geometry import SystemGeometry, build_energy_grid
from ncccst.operator import ImageGrid, assemble
from ncccst.simulate import NoiseSpec, build_dataset
from ncccst.solvers import PinvData, SolverConfig, gradient_descent_recon
from ncccst.unwavenet import (ArchConfig, TrainConfig, TrainingDiverged, UnWaveNetParams, default_heads, evaluate,
                              init_params, load_checkpoint, save_checkpoint, train, unrolled_forward,
                              wave_reg_block, write_loss_csv, ablation_fullres_variant, clip_grad_norm)


def silence_regularizer(params: UnWaveNetParams) -> None:
    params.zero_("conv_out")


def identity_swin(params: UnWaveNetParams) -> None:
    for key in ("proj.w", "proj.b", "fc2.w", "fc2.b"):
        params.zero_(key)


@pytest.fixture(scope="module")
def op32(spec):
    return assemble(SystemGeometry(1.0, 8), build_energy_grid(spec, (spec.e0 - spec.e_min) / 12.5), ImageGrid(32, 32))


@pytest.fixture(scope="module")
def data32(op32):
    return build_dataset(op32, 20, 0, seed=3, noise=NoiseSpec(), n_test=4)


def test_arch_defaults():
    a = ArchConfig()
    assert (a.t, a.c, a.window, a.kernel, a.variant) == (4, 8, 8, 5, "ll")
    assert a.heads == 2 and default_heads(32) == 4 and default_heads(16) == 2
    with pytest.raises(ValueError):
        ArchConfig(c=6, heads=4)
    with pytest.raises(ValueError):
        ArchConfig(variant="global")


def test_param_count_matches_between_variants():
    a = init_params(ArchConfig(t=2, c=8))
    b = init_params(ArchConfig(t=2, c=8, variant="fullres"))
    assert a.count() == b.count() > 0
    assert sorted(a.tensors) == sorted(b.tensors)


def test_init_is_seeded():
    a, b = init_params(ArchConfig(t=2), seed=5), init_params(ArchConfig(t=2), seed=5)
    c = init_params(ArchConfig(t=2), seed=6)
    assert all(np.array_equal(a.tensors[k].data, b.tensors[k].data) for k in a.tensors)
    assert not np.array_equal(a.tensors["blocks.0.conv_in.w"].data, c.tensors["blocks.0.conv_in.w"].data)
    assert a.lambdas == pytest.approx([0.1, 0.1])


@pytest.mark.parametrize("size", [32, 64])
@pytest.mark.parametrize("block", [wave_reg_block, ablation_fullres_variant])
def test_block_shapes(size, block, rng):
    arch = ArchConfig(t=1, c=8)
    bp = init_params(arch).block(0)
    out, z, f = block(Tensor(rng.random((size, size, 1)).astype(np.float32)), bp, arch, return_features=True)
    assert out.shape == (size, size, 1) and z.shape == f.shape == (size, size, 8)
    assert out.dtype == np.float32


def test_block_rejects_bad_input(rng):
    arch = ArchConfig(t=1, c=4)
    bp = init_params(arch).block(0)
    with pytest.raises(ValueError):
        wave_reg_block(Tensor(np.zeros((15, 16, 1), np.float32)), bp, arch)
    with pytest.raises(ValueError):
        wave_reg_block(Tensor(np.zeros((16, 16, 2), np.float32)), bp, arch)


def test_zero_params_give_zero_output(rng):
    arch = ArchConfig(t=1, c=4)
    p = init_params(arch)
    p.zero_()
    out = wave_reg_block(Tensor(rng.random((16, 16, 1)).astype(np.float32)), p.block(0), arch)
    assert np.all(out.data == 0)


def test_identity_swin_passes_features_through(rng):
    arch = ArchConfig(t=1, c=8)
    p = init_params(arch, seed=1)
    identity_swin(p)
    _, z, f = wave_reg_block(Tensor(rng.random((32, 32, 1)).astype(np.float32)), p.block(0), arch,
                             return_features=True)
    assert np.max(np.abs(f.data - z.data)) <= 1e-6


def test_silent_regularizer_fixed_point(small_setup):
    *_, A = small_setup
    x = np.random.default_rng(0).random(A.n)
    y = A.matrix @ x
    p = init_params(ArchConfig(t=3, c=4))
    silence_regularizer(p)
    out = unrolled_forward(y, A, PinvData(A, 1e-3, np.float32), p, x0=x.astype(np.float32))
    assert np.allclose(out.data.ravel(), x, atol=1e-5)


def test_silent_regularizer_matches_gradient_descent(small_setup):
    *_, A = small_setup
    rng = np.random.default_rng(1)
    y = A.matrix @ rng.random(A.n) + 0.01 * rng.standard_normal(A.m)
    D = PinvData(A, 1e-2, np.float64)
    p = init_params(ArchConfig(t=4, c=4), dtype=np.float64, lam0=0.3)
    silence_regularizer(p)
    out = unrolled_forward(y, A, D, p)
    ref = gradient_descent_recon(A, y, SolverConfig(max_iters=4, lam=1.0, step=0.3), data_op=D, x0=D.apply(y))
    assert np.max(np.abs(out.data - ref.image)) <= 1e-6 * max(1.0, np.max(np.abs(ref.image)))


def test_unrolled_forward_size_errors(small_setup):
    *_, A = small_setup
    p = init_params(ArchConfig(t=1, c=4))
    D = PinvData(A, 1e-3, np.float32)
    with pytest.raises(ValueError):
        unrolled_forward(np.zeros(A.m + 1), A, D, p)
    with pytest.raises(ValueError):
        unrolled_forward(np.zeros(A.m), A, D, p, x0=np.zeros(A.n - 1))


def test_end_to_end_gradcheck(small_setup):
    """T=2 network, 16x16, c=4, every parameter group probed."""
    *_, A = small_setup
    rng = np.random.default_rng(2)
    truth = rng.random(A.image_shape)
    y = A.matrix @ truth.ravel()
    D = PinvData(A, 1e-2, np.float64)
    p = init_params(ArchConfig(t=2, c=4), seed=3, dtype=np.float64)
    for t in p.tensors.values():  # push weights off their init so attention carries signal
        t.data = np.asarray(t.data + 0.1 * rng.standard_normal(t.shape))
    keys = ["lambdas.0", "lambdas.1", "blocks.0.conv_in.w", "blocks.0.swin.0.qkv.w", "blocks.0.swin.1.fc1.w",
            "blocks.1.conv_out.w", "blocks.1.swin.1.norm1.g", "blocks.1.swin.0.proj.b"]
    errs = gradcheck(lambda: mse_loss(unrolled_forward(y, A, D, p), truth), {k: p.tensors[k] for k in keys},
                     eps=1e-6, max_entries=20)
    assert max(errs.values()) <= 1e-3, errs


def _small_train(A, samples, epochs=5, lr=1e-3, **kw):
    D = PinvData(A, 1e-3, np.float32)
    return train(samples, A.astype(np.float32), D, ArchConfig(t=2, c=4), TrainConfig(epochs=epochs, lr=lr), **kw), D


def test_training_reduces_loss(op32, data32):
    ck, _ = _small_train(op32, data32.train)
    assert len(ck.loss_history) == 5 and ck.epoch == 5
    assert ck.loss_history[-1] < ck.loss_history[0]
    assert ck.lr_history == pytest.approx([1e-3] * 4 + [1e-4])


def test_training_is_deterministic(op32, data32):
    a, _ = _small_train(op32, data32.train[:6], epochs=2)
    b, _ = _small_train(op32, data32.train[:6], epochs=2)
    assert a.loss_history == b.loss_history
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_zero_learning_rate_changes_nothing(op32, data32):
    ck, _ = _small_train(op32, data32.train[:4], epochs=2, lr=0.0)
    init = init_params(ArchConfig(t=2, c=4))
    assert all(np.array_equal(ck.params[k], init.tensors[k].data) for k in ck.params)
    assert ck.loss_history[0] == ck.loss_history[1]


def test_clip_grad_norm():
    a = Tensor(np.array([3.0, 0.0]), requires_grad=True)
    b = Tensor(np.array([[4.0]]), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([[4.0]])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])
    np.testing.assert_allclose(b.grad, [[0.8]])
    # below the threshold nothing moves
    assert clip_grad_norm({"a": a, "b": b}, 2.0) == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])


def test_checkpoint_round_trip(tmp_path, op32, data32):
    ck, D = _small_train(op32, data32.train[:4], epochs=1)
    path = tmp_path / "m.uwnc"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.arch == ck.arch and back.epoch == 1 and back.loss_history == ck.loss_history
    assert back.data_op == ck.data_op
    assert all(np.array_equal(back.params[k], ck.params[k]) for k in ck.params)
    assert all(np.array_equal(back.optimizer["m"][k], ck.optimizer["m"][k]) for k in ck.params)
    save_checkpoint(tmp_path / "again.uwnc", back)
    assert (tmp_path / "again.uwnc").read_bytes() == path.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))
    (tmp_path / "bad.uwnc").write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.uwnc")
    write_loss_csv(tmp_path / "loss.csv", ck)
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,mean_loss,lr"


def test_resume_reproduces_uninterrupted_run(tmp_path, op32, data32):
    samples = data32.train[:5]
    full, D = _small_train(op32, samples, epochs=3)
    part, _ = _small_train(op32, samples, epochs=3, epoch_callback=lambda c: (
        save_checkpoint(tmp_path / "e1.uwnc", c) if c.epoch == 1 else None))
    resumed, _ = _small_train(op32, samples, epochs=3, resume=load_checkpoint(tmp_path / "e1.uwnc"))
    assert resumed.loss_history == full.loss_history
    assert all(np.array_equal(resumed.params[k], full.params[k]) for k in full.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(op32, data32):
    with pytest.raises(TrainingDiverged) as info:
        _small_train(op32, data32.train[:3], epochs=2, lr=1e30)
    assert info.value.checkpoint.arch.t == 2


def test_evaluate_identity_reconstruction(small_setup):
    """A network with no data step and no regularizer returns its start image."""
    *_, A = small_setup

    class Exact:
        def __init__(self, image):
            self.image = image

        def apply(self, y):
            return self.image.ravel()

        def adjoint(self, g):
            return np.zeros(A.n)

        def config(self):
            return {"kind": "exact"}

    truth = np.random.default_rng(4).random(A.image_shape).astype(np.float32)
    y = (A.matrix @ truth.ravel()).astype(np.float32)
    p = init_params(ArchConfig(t=2, c=4))
    silence_regularizer(p)
    p.zero_("lambdas")

    class S:
        sample_id, image, sinogram = "s0", truth, y

    from ncccst.unwavenet import Checkpoint
    ck = Checkpoint(arch=p.arch, params={k: v.data for k, v in p.tensors.items()})
    m = evaluate(ck, [S()], A, Exact(truth))
    assert m.mean_psnr == float("inf") and m.mean_ssim == pytest.approx(1.0)


def test_evaluate_rejects_geometry_mismatch(op32, data32):
    ck, D = _small_train(op32, data32.train[:2], epochs=1)
    ck.geometry_hash = "abc"
    with pytest.raises(ValueError):
        evaluate(ck, data32.test, op32, D, geometry_hash="def")


def test_metrics_csv(tmp_path, op32, data32):
    ck, D = _small_train(op32, data32.train[:2], epochs=1)
    m = evaluate(ck, data32.test, op32.astype(np.float32), D)
    m.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "sample_id,psnr_db,ssim,wall_ms" and lines[-1].startswith("mean,")
    assert len(lines) == 2 + len(data32.test)
    assert m.metric_rows() == evaluate(ck, data32.test, op32.astype(np.float32), D).metric_rows()
