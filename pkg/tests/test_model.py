import numpy as np
import pytest

from mmperturb import autodiff as ad
from mmperturb import gradcheck
from mmperturb.mixing import FusionMode, IndexSet, kept_count, resample, sample_indices
from mmperturb.model import (
    MixMatchModel,
    ModelConfig,
    TeacherForcingSchedule,
    gru_step,
    linear,
    parameter_shapes,
    reparameterize,
)

J, L, T_OBS, H = 2, 8, 4, 6


def make_model(mode="mm", alpha=0.5, seed=0, **kw):
    cfg = ModelConfig(joints=J, hidden=L, alpha=alpha, mode=mode, **kw)
    return MixMatchModel.initialize(cfg, np.random.default_rng(seed))


def unit_frames(rng, shape):
    q = rng.standard_normal(shape + (J, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


class CountingRng:
    """Generator proxy that records every draw method call."""

    def __init__(self, seed=0):
        self.inner = np.random.default_rng(seed)
        self.calls = []

    def __getattr__(self, name):
        fn = getattr(self.inner, name)

        def wrapped(*args, **kwargs):
            self.calls.append(name)
            return fn(*args, **kwargs)

        return wrapped


def zeroed(model, prefix=""):
    params = {k: (np.zeros_like(v) if k.startswith(prefix) else v) for k, v in model.params.items()}
    return MixMatchModel(model.config, params)


def test_config_dimensions():
    cfg = ModelConfig(joints=5, hidden=64, alpha=0.3)
    assert cfg.kept == kept_count(64, 0.3) == 20
    assert cfg.z_dim == 44
    assert cfg.frame_size == 20
    rhp = ModelConfig(hidden=64, mode="rhp", rhp_z_dim=7)
    assert rhp.z_dim == 7 and parameter_shapes(rhp)["rhp.w"][0] == (64, 7)
    assert "rhp.w" not in parameter_shapes(cfg)
    lpp = ModelConfig(joints=5, hidden=64, mode="lpp")
    assert parameter_shapes(lpp)["decoder.w_in"][0] == (20 + 32, 192)


def test_config_text_round_trip():
    cfg = ModelConfig(joints=3, hidden=16, alpha=0.25, mode="lhp", residual_velocity=True)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_text("bogus = 1\n")


def test_init_is_bounded_by_fan_in():
    model = make_model()
    for name, (shape, fan_in) in parameter_shapes(model.config).items():
        assert model.params[name].shape == shape
        assert np.all(np.abs(model.params[name]) <= 1.0 / np.sqrt(max(fan_in, 1)))


def test_model_rejects_wrong_parameters():
    model = make_model()
    bad = dict(model.params)
    bad["head.b"] = np.zeros(3)
    with pytest.raises(ValueError):
        MixMatchModel(model.config, bad)


@pytest.mark.parametrize("which", ["past", "future"])
def test_encoder_zero_weights_give_zero_state(which):
    model = zeroed(make_model(), which)
    t = ad.Tape()
    frames = np.random.default_rng(0).standard_normal((3, T_OBS, 4 * J))
    h = model.encode(model.bind(t), which, frames)
    np.testing.assert_array_equal(h.value, np.zeros((3, L)))


def test_encoder_single_step_matches_cell():
    model = make_model()
    x = np.random.default_rng(1).standard_normal((2, 1, 4 * J))
    t = ad.Tape()
    P = model.bind(t)
    h = model.encode_past(P, x).value
    p = model.params
    manual = ad.gru_cell(
        t.constant(x[:, 0]), t.constant(np.zeros((2, L))),
        t.constant(p["past.w_in"]), t.constant(p["past.w_hid"]), t.constant(p["past.b_in"]), t.constant(p["past.b_hid"]),
    ).value
    np.testing.assert_array_equal(h, manual)


def test_encoder_deterministic_and_rejects_empty():
    model = make_model()
    x = np.random.default_rng(2).standard_normal((2, T_OBS, 4 * J))
    a = model.encode_past(model.bind(ad.Tape()), x).value
    b = make_model().encode_past(make_model().bind(ad.Tape()), x).value
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        model.encode_past(model.bind(ad.Tape()), np.zeros((2, 0, 4 * J)))


def _posterior(model, past, future, index):
    t = ad.Tape()
    P = model.bind(t)
    h_t, h_T = model.encode_past(P, past), model.encode_future(P, future)
    mu, logvar = model.posterior(P, h_t, h_T, index)
    return mu.value, logvar.value


def test_posterior_index_extremes():
    rng = np.random.default_rng(3)
    past, fut_a, fut_b = (rng.standard_normal((2, T_OBS, 4 * J)) for _ in range(3))
    full = make_model(alpha=1.0)
    np.testing.assert_array_equal(
        _posterior(full, past, fut_a, IndexSet(L, range(L)))[0], _posterior(full, past, fut_b, IndexSet(L, range(L)))[0]
    )
    empty = make_model(alpha=0.0)
    mu1, _ = _posterior(empty, past, fut_a, IndexSet(L, []))
    mu2, _ = _posterior(empty, rng.standard_normal((2, T_OBS, 4 * J)), fut_a, IndexSet(L, []))
    np.testing.assert_array_equal(mu1, mu2)


def test_posterior_zero_encoder():
    model = zeroed(make_model(), "cvae_enc")
    rng = np.random.default_rng(4)
    mu, logvar = _posterior(model, rng.standard_normal((2, T_OBS, 4 * J)), rng.standard_normal((2, H, 4 * J)), sample_indices(L, 0.5, rng))
    zd = model.config.z_dim
    np.testing.assert_array_equal(mu, np.zeros((2, zd)))
    np.testing.assert_array_equal(np.exp(logvar), np.ones((2, zd)))


def test_reparameterize_examples():
    e = np.array([0.3, -1.2])
    np.testing.assert_array_equal(reparameterize(np.zeros(2), np.zeros(2), e), e)
    np.testing.assert_allclose(reparameterize(np.array([1.0, 2.0]), np.log([4.0, 9.0]), np.array([1.0, -1.0])), [3.0, -1.0], atol=1e-15)
    mu = np.array([0.5, -0.5])
    np.testing.assert_array_equal(reparameterize(mu, np.array([0.7, 0.1]), np.zeros(2)), mu)
    t = ad.Tape()
    var = reparameterize(t.constant([1.0, 2.0]), t.constant(np.log([4.0, 9.0])), np.array([1.0, -1.0]))
    np.testing.assert_allclose(var.value, [3.0, -1.0], atol=1e-15)


def manual_rollout(model, h0, last, horizon, feed):
    """Reference decoder loop; ``feed(k, previous_output)`` picks the input of step ``k``."""
    t = ad.Tape()
    P = model.bind(t)
    h, x, outs = t.constant(h0), last, []
    for k in range(horizon):
        if k > 0:
            x = feed(k, outs[-1])
        h = gru_step(P, "decoder", t.constant(x), h)
        y = linear(P, "head", h).value
        if model.config.residual_velocity:
            y = x + y
        outs.append(y)
    return np.stack(outs, axis=1)


def _decode(model, h0, last, teacher, p_tf, rng=None):
    t = ad.Tape()
    P = model.bind(t)
    outs = model.decode(P, t.constant(h0), last, teacher.shape[1], teacher=teacher, p_tf=p_tf, rng=rng)
    return np.stack([o.value for o in outs], axis=1)


def test_decode_full_teacher_forcing_feeds_ground_truth():
    model = make_model()
    rng = np.random.default_rng(5)
    h0, last, teacher = rng.standard_normal((2, L)), rng.standard_normal((2, 4 * J)), rng.standard_normal((2, H, 4 * J))
    np.testing.assert_allclose(
        _decode(model, h0, last, teacher, 1.0), manual_rollout(model, h0, last, H, lambda k, prev: teacher[:, k - 1]), atol=1e-14
    )


def test_decode_without_teacher_is_autoregressive():
    model = make_model()
    rng = np.random.default_rng(6)
    h0, last, teacher = rng.standard_normal((2, L)), rng.standard_normal((2, 4 * J)), rng.standard_normal((2, H, 4 * J))
    np.testing.assert_allclose(
        _decode(model, h0, last, teacher, 0.0), manual_rollout(model, h0, last, H, lambda k, prev: prev), atol=1e-14
    )


def test_decode_needs_teacher_when_forcing():
    model = make_model()
    t = ad.Tape()
    with pytest.raises(ValueError):
        model.decode(model.bind(t), t.constant(np.zeros((1, L))), np.zeros((1, 4 * J)), 3, p_tf=0.5)
    with pytest.raises(ValueError):
        model.decode(model.bind(t), t.constant(np.zeros((1, L))), np.zeros((1, 4 * J)), 0)


def test_residual_velocity_with_zero_head_repeats_last_frame():
    model = zeroed(make_model(residual_velocity=True), "head")
    obs = unit_frames(np.random.default_rng(7), (T_OBS,))
    frames, _ = model.generate_k(obs, 3, H, np.random.default_rng(0))
    np.testing.assert_array_equal(frames, np.broadcast_to(obs[-1], frames.shape))


@pytest.mark.parametrize("mode", [m.value for m in FusionMode])
def test_generate_k_shapes_and_determinism(mode):
    model = make_model(mode)
    obs = unit_frames(np.random.default_rng(8), (T_OBS,))
    a = model.generate_k(obs, 4, H, np.random.default_rng(11))
    b = model.generate_k(obs, 4, H, np.random.default_rng(11))
    assert a[0].shape == (4, H, J, 4) and a[1].shape == (4, L)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    single, _ = model.generate_k(obs, 1, H, np.random.default_rng(0))
    assert single.shape == (1, H, J, 4)
    with pytest.raises(ValueError):
        model.generate_k(obs, 0, H, np.random.default_rng(0))


def test_alpha_one_makes_noise_irrelevant():
    model = make_model("mm", alpha=1.0)
    obs = unit_frames(np.random.default_rng(9), (T_OBS,))
    _, h_z = model.generate_k(obs, 5, H, np.random.default_rng(0))
    assert np.all(h_z == h_z[0])


def test_alpha_zero_mix_is_pure_noise():
    # with an empty index set the mixed vector u carries only z; v then falls back to h
    model = make_model("mm", alpha=0.0)
    assert model.config.kept == 0 and model.config.z_dim == L
    rng = np.random.default_rng(10)
    h, z = rng.standard_normal((2, L)), rng.standard_normal((2, L))
    empty = IndexSet(L, [])
    np.testing.assert_array_equal(resample(h, z, empty), z)
    t = ad.Tape()
    P = model.bind(t)
    out = model.perturbed_hidden(P, t.constant(h), t.constant(z), empty).value
    out2 = model.perturbed_hidden(P, t.constant(h), t.constant(rng.standard_normal((2, L))), empty).value
    np.testing.assert_array_equal(out, out2)


@pytest.mark.parametrize("mode,expected", [("mm", 1), ("lhp", 1), ("rhp", 1), ("lpp", H)])
def test_noise_draws_per_sequence(mode, expected):
    model = make_model(mode)
    obs = unit_frames(np.random.default_rng(12), (T_OBS,))
    rng = CountingRng()
    model.generate_k(obs, 5, H, rng)
    assert rng.calls.count("standard_normal") == expected


def test_lhp_uses_fixed_prefix_indices():
    model = make_model("lhp")
    assert np.array_equal(model.fusion_indices(None).chosen, np.arange(model.config.kept))
    with pytest.raises(ValueError):
        make_model("mm").fusion_indices(None)


def test_teacher_forcing_schedule():
    tf = TeacherForcingSchedule(epochs_to_zero=10)
    assert tf(0) == 1.0
    assert tf(5) == pytest.approx(0.5)
    assert tf(10) == 0.0 and tf(25) == 0.0
    vals = [tf(e) for e in range(15)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("mode", ["lhp", "rhp", "lpp"])
def test_tiny_model_gradients_other_modes(mode):
    failures = [r.line() for r in gradcheck.model_suite(1, modes=(mode,)) if not r.passed]
    assert not failures
