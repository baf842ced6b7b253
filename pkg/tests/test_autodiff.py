import math

import numpy as np
import pytest

from mmperturb import autodiff as ad
from mmperturb import checkpoint, gradcheck
from mmperturb.optim import AdamState, MomentumSGD, adam_step, clip_gradients, global_norm


def test_matmul_hand_arithmetic():
    t = ad.Tape()
    out = ad.matmul(t.constant([[1.0, 2.0], [3.0, 4.0]]), t.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_sigmoid_at_zero():
    t = ad.Tape()
    assert ad.sigmoid(t.constant(0.0)).value == 0.5


def test_gather_by_index_set():
    t = ad.Tape()
    out = ad.gather(t.constant([10.0, 20.0, 30.0, 40.0]), [0, 2])
    np.testing.assert_array_equal(out.value, [10.0, 30.0])


def test_backward_sum_of_squares():
    t = ad.Tape()
    x = t.param("x", np.array([1.0, 2.0, 3.0]))
    grads = t.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(grads["x"], [2.0, 4.0, 6.0])


def test_backward_sigmoid_slope():
    t = ad.Tape()
    w = t.param("w", np.array(0.0))
    assert t.backward(ad.sigmoid(w))["w"] == pytest.approx(0.25, abs=1e-15)


def test_backward_rejects_non_scalar_loss():
    t = ad.Tape()
    x = t.param("x", np.ones(3))
    with pytest.raises(ad.ShapeError):
        t.backward(ad.tanh(x))


def test_unused_parameter_gets_zero_gradient():
    t = ad.Tape()
    x = t.param("x", np.ones(3))
    t.param("unused", np.ones((2, 2)))
    grads = t.backward(ad.sum(x))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_shape_mismatch_names_both_shapes():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(t.constant(np.ones((2, 3))), t.constant(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))


def test_non_finite_result_raises():
    t = ad.Tape()
    with pytest.raises(ad.NonFiniteError):
        ad.log(t.constant(np.array([0.0])))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(t.constant(np.array([1000.0])))


def test_parents_precede_children():
    t = ad.Tape()
    x = t.param("x", np.ones(2))
    y = ad.tanh(ad.add(ad.mul(x, x), x))
    ad.sum(y)
    for node, parents in enumerate(t.parents):
        assert all(p < node for p in parents)


def _two_layer_net(seed):
    rng = np.random.default_rng(seed)
    # 3*3 + 3 + 3*1 + 1 + one input scale = 17 parameters
    params = {
        "w1": rng.standard_normal((3, 3)),
        "b1": rng.standard_normal(3),
        "w2": rng.standard_normal((3, 1)),
        "b2": rng.standard_normal(1),
        "s": rng.standard_normal(1),
    }
    x = rng.standard_normal((4, 3))

    def fn(p):
        h = ad.tanh(ad.add(ad.matmul(ad.mul(p["s"], x), p["w1"]), p["b1"]))
        return ad.mean(ad.sigmoid(ad.add(ad.matmul(h, p["w2"]), p["b2"])))

    return params, fn


def test_random_two_layer_net_matches_finite_differences():
    params, fn = _two_layer_net(0)
    assert sum(v.size for v in params.values()) == 17
    errs = gradcheck.check(gradcheck.on_tape(fn), params)
    assert max(errs.values()) < 1e-4


@pytest.mark.parametrize("seed", range(100))
def test_every_op_matches_finite_differences(seed):
    failures = [r.line() for r in gradcheck.op_suite(seed) if not r.passed]
    assert not failures


def test_backward_is_deterministic():
    params, fn = _two_layer_net(3)

    def grads():
        t = ad.Tape()
        loss = fn({k: t.param(k, v) for k, v in params.items()})
        return t.backward(loss)

    a, b = grads(), grads()
    assert all(a[k].tobytes() == b[k].tobytes() for k in params)


def test_gather_scatter_reconstructs_vector():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(9)
    idx = np.array([1, 4, 5, 8])
    comp = np.setdiff1d(np.arange(9), idx)
    t = ad.Tape()
    x = t.constant(v)
    out = ad.add(ad.scatter(ad.gather(x, idx), idx, 9), ad.scatter(ad.gather(x, comp), comp, 9))
    np.testing.assert_array_equal(out.value, v)


def test_gru_cell_zero_weights_keep_zero_state():
    t = ad.Tape()
    L, D = 4, 3
    out = ad.gru_cell(
        t.constant(np.ones((2, D))), t.constant(np.zeros((2, L))),
        t.constant(np.zeros((D, 3 * L))), t.constant(np.zeros((L, 3 * L))),
        t.constant(np.zeros(3 * L)), t.constant(np.zeros(3 * L)),
    )
    np.testing.assert_array_equal(out.value, np.zeros((2, L)))


def test_quat_rotate_matches_hamilton_sandwich():
    rng = np.random.default_rng(1)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    v = rng.standard_normal(3)
    t = ad.Tape()
    out = ad.quat_rotate(t.constant(q), t.constant(v)).value
    sandwich = ad._hamilton(ad._hamilton(q, np.concatenate([[0.0], v])), ad._conj(q))
    np.testing.assert_allclose(out, sandwich[1:], atol=1e-14)


# -- optimizers ------------------------------------------------------------------


def test_adam_first_step_is_learning_rate():
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    params, state = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, AdamState(), lr=0.001)
    assert params["w"] == pytest.approx(-0.001 / (1.0 + 1e-8), abs=1e-15)
    assert state.t == 1


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(5):
        params, state = adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_is_deterministic_and_pure():
    params = {"w": np.array([0.3, 0.1])}
    grads = {"w": np.array([0.5, -1.5])}
    state = AdamState()
    a = adam_step(params, grads, state)
    b = adam_step(params, grads, state)
    np.testing.assert_array_equal(a[0]["w"], b[0]["w"])
    np.testing.assert_array_equal(params["w"], [0.3, 0.1])
    assert state.t == 0


def test_adam_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState())
    with pytest.raises(ValueError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(2)}, AdamState(), lr=0.0)


def test_clip_examples():
    g = {"a": np.array([3.0, 4.0])}
    np.testing.assert_array_equal(clip_gradients(g, 10.0)["a"], [3.0, 4.0])
    np.testing.assert_allclose(clip_gradients(g, 1.0)["a"], [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(clip_gradients({"a": np.zeros(2)}, 1.0)["a"], [0.0, 0.0])


def test_clip_is_idempotent_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(50):
        g = {"a": rng.standard_normal(7) * 10, "b": rng.standard_normal((2, 3))}
        once = clip_gradients(g, 1.5)
        twice = clip_gradients(once, 1.5)
        assert global_norm(once) <= 1.5 + 1e-12
        assert all(np.array_equal(once[k], twice[k]) for k in g)


def test_momentum_sgd_heavy_ball():
    params = {"w": np.array(1.0)}
    opt = MomentumSGD(lr=0.1, momentum=0.5)
    opt.step(params, {"w": np.array(1.0)})
    assert params["w"] == pytest.approx(0.9)
    opt.step(params, {"w": np.array(1.0)})
    # v = 0.5 * -0.1 - 0.1
    assert params["w"] == pytest.approx(0.75)


# -- checkpoint ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a": rng.standard_normal((2, 3)), "b.c": np.array([math.pi]), "scalar": np.array(1.5)}
    checkpoint.save(tmp_path / "x.mmck", params)
    back = checkpoint.load(tmp_path / "x.mmck")
    assert list(back) == list(params)
    assert all(back[k].shape == params[k].shape and np.array_equal(back[k], params[k]) for k in params)


def test_checkpoint_layout_header():
    blob = checkpoint.dumps({"w": np.array([1.0, 2.0])})
    assert blob[:4] == b"MMCK" and blob[4] == 1
    assert blob[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


@pytest.mark.parametrize("mangle", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_checkpoint_rejects_corruption(mangle):
    blob = checkpoint.dumps({"w": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(mangle(blob))
