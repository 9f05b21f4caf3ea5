import dataclasses

import numpy as np
import pytest

from diffslt import tensor as T
from diffslt.config import RunConfig
from diffslt.diffusion import (
    DiffusionLossConfig,
    DiffusionModel,
    GuidanceBatch,
    StageTwoData,
    build_schedule,
    forward_noise,
    sample_timesteps,
    train_diffusion,
    train_step,
)
from diffslt.fusion import FusedGuidance, drop_condition
from diffslt.tensor import Tensor

SMALL = RunConfig(model_dim=16, heads=2, latent_len=4, latent_dim=8, denoiser_blocks=2, fusion_layers=2).resolved()


def _model(seed=0, cfg=SMALL):
    return DiffusionModel(cfg, np.random.default_rng(seed))


def _guidance_batch(rng, batch=3, la=5, lb=4, dim=16):
    a = Tensor(rng.standard_normal((batch, la, dim)).astype(np.float32))
    b = Tensor(rng.standard_normal((batch, lb, dim)).astype(np.float32))
    return GuidanceBatch(a, b, None, None, "wv")


# -- schedules ----------------------------------------------------------------------
@pytest.mark.parametrize("kind,scale", [("cosine", 1.0), ("shifted_cosine", 0.1), ("shifted_cosine", 0.3)])
def test_schedule_endpoints_and_monotone(kind, scale):
    sched = build_schedule(kind, 1000, scale)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert len(sched.alpha_bar) == 1001


def test_shifted_scale_one_equals_cosine():
    a, b = build_schedule("cosine", 1000), build_schedule("shifted_cosine", 1000, 1.0)
    np.testing.assert_allclose(a.alpha_bar, b.alpha_bar, atol=1e-12, rtol=0)


def test_scale_shifts_log_snr():
    base, shifted = build_schedule("cosine", 1000), build_schedule("shifted_cosine", 1000, 0.1)
    diff = shifted.log_snr[1:] - base.log_snr[1:]
    np.testing.assert_allclose(diff, 2 * np.log(0.1), atol=1e-9)
    assert 2 * np.log(0.1) == pytest.approx(-4.60517, abs=1e-5)
    with np.errstate(divide="ignore"):
        recomputed = np.log(shifted.alpha_bar[1:]) - np.log1p(-shifted.alpha_bar[1:])
    np.testing.assert_allclose(recomputed, shifted.log_snr[1:], atol=1e-6)


def test_schedule_validation_and_immutability():
    with pytest.raises(ValueError):
        build_schedule("linear")
    with pytest.raises(ValueError):
        build_schedule("cosine", 0)
    with pytest.raises(ValueError):
        build_schedule("shifted_cosine", 1000, 0.0)
    with pytest.raises(ValueError):
        build_schedule("cosine").alpha_bar[3] = 0.5


# -- forward noising ------------------------------------------------------------------
def test_forward_noise_examples():
    sched = build_schedule("cosine", 1000)
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
    np.testing.assert_array_equal(forward_noise(z0, 0, eps, sched), z0)
    fake = dataclasses.replace(sched, alpha_bar=np.array([1.0, 0.25, 0.0]), log_snr=np.zeros(3), T=2)
    np.testing.assert_array_equal(forward_noise(z0, 2, eps, fake), eps)
    assert forward_noise(np.array(2.0), 1, np.array(1.0), fake) == pytest.approx(0.5 * 2 + np.sqrt(0.75))
    with pytest.raises(ValueError):
        forward_noise(z0, 1001, eps, sched)
    with pytest.raises(ValueError):
        forward_noise(z0, 5, eps[:1], sched)


def test_forward_noise_per_row_timesteps():
    sched = build_schedule("cosine", 1000)
    rng = np.random.default_rng(1)
    z0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    t = np.array([0, 500, 1000])
    rows = forward_noise(z0, t, eps, sched)
    for i, ti in enumerate(t):
        np.testing.assert_allclose(rows[i], forward_noise(z0[i], int(ti), eps[i], sched))


def test_forward_noise_moments():
    sched = build_schedule("cosine", 1000)
    rng = np.random.default_rng(2)
    z0 = np.full((10_000, 1), 1.3)
    for t in (10, 300, 700):
        ab = sched.alpha_bar[t]
        zt = forward_noise(z0, t, rng.standard_normal(z0.shape), sched)
        assert abs(zt.mean() - np.sqrt(ab) * 1.3) < 0.02 * 1.3
        assert abs(zt.var() - (1 - ab)) < 0.02 * (1 - ab)


def test_uniform_timesteps():
    t = sample_timesteps(np.random.default_rng(0), 100_000, 1000)
    assert t.min() >= 1 and t.max() <= 1000
    freq = np.histogram(t, bins=10, range=(0.5, 1000.5))[0] / len(t)
    assert np.all(np.abs(freq - 0.1) < 0.01)


# -- denoiser ---------------------------------------------------------------------------
def test_denoiser_shape_and_sensitivity():
    rng = np.random.default_rng(0)
    model = _model()
    gb = _guidance_batch(rng)
    g = gb.fuse(model)
    z = rng.standard_normal((3, 4, 8)).astype(np.float32)
    out = model.predict(z, None, g, 500).data
    assert out.shape == z.shape
    other = _guidance_batch(np.random.default_rng(9)).fuse(model)
    assert not np.allclose(model.predict(z, None, other, 500).data, out)
    assert not np.allclose(model.predict(z, None, g, 20).data, out)
    sc = rng.standard_normal(z.shape).astype(np.float32)
    assert not np.allclose(model.predict(z, sc, g, 500).data, out)
    with pytest.raises(T.ShapeError):
        model.predict(z, sc[:, :2], g, 500)


def test_denoiser_gradients():
    from helpers import GRAD_TOL, gradcheck, param_gradcheck

    cfg = dataclasses.replace(SMALL, model_dim=8, latent_len=2, latent_dim=3, denoiser_blocks=1, fusion_layers=1)
    model = DiffusionModel(cfg, np.random.default_rng(0)).astype(np.float64)
    rng = np.random.default_rng(1)
    gb = GuidanceBatch(Tensor(rng.standard_normal((2, 3, 8))), Tensor(rng.standard_normal((2, 2, 8))),
                       None, None, "wv")
    target = rng.standard_normal((2, 2, 3))
    z = rng.standard_normal((2, 2, 3))

    def loss(zt):
        return T.l1_loss(model.predict(zt, None, gb.fuse(model), np.array([100, 700])), target)

    assert gradcheck(loss, [z], rng) <= GRAD_TOL
    assert param_gradcheck(lambda: loss(Tensor(z)), [p for _, p in model.trainable()], rng, 2) <= GRAD_TOL


# -- fusion ------------------------------------------------------------------------------
def test_null_guidance_and_dropout():
    model = _model()
    g = _guidance_batch(np.random.default_rng(0)).fuse(model)
    assert g.values.shape == (3, 9, 16)
    null = model.GF.null_guidance(4)
    assert null.values.shape == (4, 1, 16)
    np.testing.assert_array_equal(null.values.data, model.GF.null_guidance(4).values.data)
    dropped = drop_condition(g, model.GF, np.array([True, False, False]))
    np.testing.assert_array_equal(dropped.values.data[0, 0], model.GF.null.data[0])
    assert dropped.mask[0].tolist() == [True] + [False] * 8
    np.testing.assert_array_equal(dropped.values.data[1:], g.values.data[1:])
    z = np.random.default_rng(1).standard_normal((1, 4, 8)).astype(np.float32)
    via_drop = model.predict(z, None, FusedGuidance(dropped.values[0:1], dropped.mask[0:1], "wv"), 300).data
    via_null = model.predict(z, None, model.GF.null_guidance(1), 300).data
    np.testing.assert_allclose(via_drop, via_null, atol=1e-6)


# -- training ------------------------------------------------------------------------------
def test_no_self_conditioning_means_one_forward():
    model = _model()
    rng = np.random.default_rng(0)
    cfg = DiffusionLossConfig(self_cond_prob=0.0)
    z0 = rng.standard_normal((3, 4, 8))
    model.Z.n_forward = 0
    train_step(model, _guidance_batch(rng), z0, build_schedule(), cfg, rng)
    assert model.Z.n_forward == 1
    train_step(model, _guidance_batch(rng), z0, build_schedule(), DiffusionLossConfig(self_cond_prob=1.0), rng)
    assert model.Z.n_forward == 3


def _replay(model, gb, z0, sched, seed, self_cond):
    """Independent re-derivation of one loss: same draws, explicit detached first pass."""
    rng = np.random.default_rng(seed)
    t = rng.integers(1, sched.T + 1, size=len(z0))
    eps = rng.standard_normal(z0.shape)
    ab = sched.alpha_bar[t][:, None, None]
    z_t = (np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps).astype(np.float32)
    g = gb.fuse(model)
    drop = rng.random(len(z0)) < 0.1
    g = drop_condition(g, model.GF, drop)
    rng.random()  # the self-conditioning coin
    sc = None
    if self_cond:
        with T.no_grad():
            sc = model.predict(z_t, None, g, t).data.copy()
    pred = model.predict(z_t, sc, g, t)
    return T.mean(T.tabs(pred - z0.astype(np.float32)))


def _grads(model):
    return {n: (p.grad.copy() if p.grad is not None else None) for n, p in model.trainable()}


@pytest.mark.parametrize("self_cond", [0.0, 1.0])
def test_loss_matches_replay_and_first_pass_is_detached(self_cond):
    sched = build_schedule("shifted_cosine", 1000, 0.1)
    z0 = np.random.default_rng(0).standard_normal((3, 4, 8))
    gb = _guidance_batch(np.random.default_rng(1))
    model = _model()
    loss, info = train_step(model, gb, z0, sched, DiffusionLossConfig(self_cond, 0.1), np.random.default_rng(5))
    loss.backward()
    got = _grads(model)
    model.zero_grad()
    ref = _replay(model, gb, z0, sched, 5, bool(self_cond))
    ref.backward()
    want = _grads(model)
    assert float(loss.data) == float(ref.data)
    assert info["self_cond"] == bool(self_cond)
    for name in want:
        np.testing.assert_array_equal(got[name], want[name])


def test_unit_lambda_equals_plain_mae():
    sched = build_schedule()
    z0 = np.random.default_rng(0).standard_normal((3, 4, 8))
    gb = _guidance_batch(np.random.default_rng(1))
    model = _model()
    plain, _ = train_step(model, gb, z0, sched, DiffusionLossConfig(), np.random.default_rng(3))
    ones = DiffusionLossConfig(lambda_t=np.ones(sched.T + 1))
    weighted, _ = train_step(model, gb, z0, sched, ones, np.random.default_rng(3))
    assert float(plain.data) == pytest.approx(float(weighted.data), rel=1e-6)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        DiffusionLossConfig(self_cond_prob=1.5)
    with pytest.raises(ValueError):
        DiffusionLossConfig(lambda_t=-np.ones(3))


def test_stage_two_data_single_stream_goes_through_b():
    rng = np.random.default_rng(0)
    stream = [rng.standard_normal((n, 16)) for n in (3, 5)]
    data = StageTwoData(stream, None, rng.standard_normal((2, 4, 8)), "w")
    gb, z0 = data.batch(np.array([1, 0]))
    assert gb.a is None and gb.b.shape == (2, 5, 16)
    assert gb.mask_b.tolist() == [[True] * 5, [True] * 3 + [False] * 2]


@pytest.mark.slow
def test_overfits_four_samples():
    cfg = dataclasses.replace(SMALL, batch_size=4, cond_drop_prob=0.0, lr=1e-3, diffusion_steps=5000)
    rng = np.random.default_rng(0)
    streams = [rng.standard_normal((4, 16)).astype(np.float32) for _ in range(4)]
    data = StageTwoData(streams, None, rng.standard_normal((4, 4, 8)), "w")
    model = DiffusionModel(cfg, np.random.default_rng(1))
    hist = train_diffusion(model, data, cfg)
    tail = np.mean([row["loss"] for row in hist[-200:]])
    assert tail < 0.05
