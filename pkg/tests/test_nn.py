import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlcft.errors import DimensionError, NumericError, UsageError, ValidationError
from dlcft.nn import (
    LayerSpec,
    Network,
    OptimizerState,
    ParameterVector,
    Segment,
    avg_pool,
    conv2d,
    dense,
    flatten,
    identity,
    leaky_relu,
    max_pool,
    mse_loss,
    optimizer_step,
    relu,
    sce_loss,
)
from dlcft.numerics import finite_difference_directional, make_rng

from conftest import rel_err

seeds = st.integers(min_value=0, max_value=2**32 - 1)

# every layer kind, each wrapped so that the output is a flat vector
LAYER_NETS = {
    "dense": ([dense(4)], (3,)),
    "conv2d": ([conv2d(2, 3), flatten()], (2, 5, 5)),
    "conv2d_stride": ([conv2d(2, 2, stride=2), flatten()], (1, 5, 5)),
    "leaky_relu": ([dense(5), leaky_relu(0.2), dense(3)], (3,)),
    "relu": ([dense(5), relu(), dense(3)], (3,)),
    "max_pool": ([conv2d(2, 3), max_pool(2), flatten()], (1, 6, 6)),
    "avg_pool": ([conv2d(2, 3), avg_pool(2), flatten()], (1, 6, 6)),
    "flatten": ([conv2d(1, 2), flatten(), dense(2)], (1, 3, 3)),
    "identity": ([identity(), dense(2)], (4,)),
}


def scalar_loss_grad(net, x, w_out):
    """Gradient of sum(w_out * net(x)) with respect to the flat parameters."""
    y, cache = net.forward(x)
    return net.backward(cache, np.broadcast_to(w_out, y.shape)).grads


def test_identity_network_passes_input_through(rng):
    net = Network([identity()], (3,), params=[{}])
    x = rng.standard_normal((4, 3))
    assert np.array_equal(net(x), x)


def test_dense_identity_weights(rng):
    net = Network([dense(3)], (3,), params=[{"weight": np.eye(3), "bias": np.zeros(3)}])
    x = rng.standard_normal((2, 3))
    assert np.array_equal(net(x), x)


def test_two_layer_leaky_net_hand_unrolled():
    W1 = np.array([[1.0, -2.0], [0.5, 1.0], [-1.0, 0.0]])
    b1 = np.array([0.0, -1.0, 0.5])
    W2 = np.array([[1.0, 1.0, 1.0], [2.0, -1.0, 0.5]])
    b2 = np.array([0.25, 0.0])
    net = Network(
        [dense(3), leaky_relu(0.1), dense(2)],
        (2,),
        params=[{"weight": W1, "bias": b1}, {}, {"weight": W2, "bias": b2}],
    )
    x = np.array([[1.0, 1.0]])
    # layer 1: [1-2, 0.5+1-1, -1+0.5] = [-1, 0.5, -0.5]; leaky: [-0.1, 0.5, -0.05]
    h = np.array([-0.1, 0.5, -0.05])
    expected = np.array([h.sum() + 0.25, -0.2 - 0.5 - 0.025])
    assert np.allclose(net(x)[0], expected, atol=1e-15)


def test_conv2d_matches_frozen_reference():
    x = (np.arange(2 * 5 * 5, dtype=float).reshape(1, 2, 5, 5) / 10) - 2
    W = ((np.arange(3 * 2 * 3 * 3).reshape(3, 2, 3, 3) % 7) - 3) / 5
    b = np.array([0.1, -0.2, 0.3])
    net = Network([conv2d(3, 3, stride=2)], (2, 5, 5), params=[{"weight": W, "bias": b}])
    # reference values from an independent convolution implementation
    ref = np.array([1.34, 1.1, 0.14, -0.1, -0.98, -0.86, -0.38, -0.26, 0.86, 0.78, 0.46, 0.38])
    assert np.allclose(net(x).ravel(), ref, atol=1e-12)


def test_forward_rejects_wrong_input_shape(rng):
    net = Network([dense(2)], (3,), rng=rng)
    with pytest.raises(DimensionError):
        net(np.ones((1, 4)))


def test_layer_shapes_must_compose(rng):
    with pytest.raises(DimensionError):
        Network([dense(3), conv2d(1, 2)], (3,), rng=rng)
    with pytest.raises(DimensionError):
        Network([max_pool(2)], (1, 5, 5), rng=rng)
    with pytest.raises(ValidationError):
        LayerSpec("softmax")
    with pytest.raises(ValidationError):
        dense(0)


def test_zero_upstream_gives_zero_gradients(rng):
    net = Network(*LAYER_NETS["max_pool"], rng=rng)
    x = rng.standard_normal((3, 1, 6, 6))
    y, cache = net.forward(x)
    res = net.backward(cache, np.zeros_like(y))
    assert not np.any(res.grads.data) and not np.any(res.dx)


def test_single_dense_mse_gradient_is_residual_outer_product(rng):
    net = Network([dense(3)], (4,), rng=rng)
    x = rng.standard_normal((1, 4))
    y, cache = net.forward(x)
    _, dl = mse_loss(y[0], 2)
    g = net.backward(cache, dl[None, :]).grads
    resid = y[0] - 15.0 * np.eye(3)[2]
    assert np.allclose(g.get(0, "weight"), np.outer(resid, x[0]), atol=1e-12)
    assert np.allclose(g.get(0, "bias"), resid, atol=1e-12)


@pytest.mark.parametrize("name", sorted(LAYER_NETS))
def test_backprop_matches_central_differences(name):
    rng = make_rng(7)
    specs, shape = LAYER_NETS[name]
    net = Network(specs, shape, rng=rng)
    x = rng.standard_normal((3,) + shape)
    w_out = rng.standard_normal(net.output_shape)
    theta0 = net.get_vector()

    def f(flat):
        net.set_vector(theta0.like(flat))
        return np.sum(net(x) * w_out)

    net.set_vector(theta0)
    g = scalar_loss_grad(net, x, w_out).data
    for _ in range(10):
        v = rng.standard_normal(theta0.data.size)
        fd = finite_difference_directional(f, theta0.data, v, h=1e-6)
        assert abs(fd - g @ v) <= 1e-5 * max(abs(g @ v), 1e-8)


@pytest.mark.parametrize("name", sorted(LAYER_NETS))
def test_input_gradient_matches_central_differences(name):
    rng = make_rng(11)
    specs, shape = LAYER_NETS[name]
    net = Network(specs, shape, rng=rng)
    x = rng.standard_normal((2,) + shape)
    w_out = rng.standard_normal((2,) + net.output_shape)
    y, cache = net.forward(x)
    dx = net.backward(cache, w_out).dx
    v = rng.standard_normal(x.shape)
    fd = finite_difference_directional(lambda z: np.sum(net(z) * w_out), x, v, h=1e-6)
    assert rel_err(fd, np.sum(dx * v)) < 1e-5


def test_per_sample_grads_sum_to_batch_gradient(rng):
    net = Network(*LAYER_NETS["max_pool"], rng=rng)
    x = rng.standard_normal((5, 1, 6, 6))
    y, cache = net.forward(x)
    dy = rng.standard_normal(y.shape)
    res = net.backward(cache, dy)
    psg = net.per_sample_grads(cache, res.out_grads)
    assert psg.shape == (5, net.num_params())
    assert np.allclose(psg.sum(axis=0), res.grads.data, atol=1e-12)


def test_stale_cache_is_rejected(rng):
    net = Network([dense(2)], (3,), rng=rng)
    y, cache = net.forward(np.ones((1, 3)))
    net.set_vector(net.get_vector())
    with pytest.raises(UsageError):
        net.backward(cache, np.ones_like(y))


def test_dense_stats_expose_activation_and_preactivation_grad(rng):
    net = Network([dense(4), leaky_relu(), dense(2)], (3,), rng=rng)
    x = rng.standard_normal((6, 3))
    y, cache = net.forward(x)
    dy = rng.standard_normal(y.shape)
    res = net.backward(cache, dy)
    stats = net.dense_stats(cache, res.out_grads)
    a2, g2 = stats[2]
    assert np.array_equal(g2, dy)
    assert np.allclose(g2.T @ a2, res.grads.get(2, "weight"))
    assert np.array_equal(stats[0][0], x)


# -- losses -----------------------------------------------------------------


def test_sce_examples():
    val, g = sce_loss(np.array([0.0, 0.0]), 0)
    assert val == pytest.approx(np.log(2.0), abs=1e-15)
    assert np.allclose(g, [-0.5, 0.5])
    val, _ = sce_loss(np.array([30.0, -30.0]), 0)
    assert val < 1e-12
    with pytest.raises(ValidationError):
        sce_loss(np.array([0.0, 1.0]), 2)
    with pytest.raises(ValidationError):
        sce_loss(np.array([0.0]), 0)


def test_sce_matches_direct_formula(rng):
    x = rng.standard_normal(5) * 3
    val, _ = sce_loss(x, 3)
    direct = -x[3] + np.log(np.sum(np.exp(x)))
    assert abs(val - direct) < 1e-13


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(2, 8))
def test_sce_gradient_sums_to_zero(seed, c):
    rng = make_rng(seed)
    logits = rng.standard_normal(c) * 10
    _, g = sce_loss(logits, int(rng.integers(0, c)))
    assert abs(g.sum()) < 1e-12


def test_mse_examples(rng):
    assert mse_loss(15.0 * np.eye(4)[1], 1)[0] == 0.0
    assert mse_loss(np.zeros(7), 3, alpha=15.0)[0] == 112.5
    u = rng.standard_normal(4)
    direct = sum(0.5 * (u[i] - (15.0 if i == 2 else 0.0)) ** 2 for i in range(4))
    assert abs(mse_loss(u, 2)[0] - direct) < 1e-12
    with pytest.raises(ValidationError):
        mse_loss(np.zeros(3), 3)
    with pytest.raises(ValidationError):
        mse_loss(np.zeros(3), 0, alpha=0.0)


def test_batch_losses_are_means(rng):
    out = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 1])
    for fn in (mse_loss, sce_loss):
        val, g = fn(out, y)
        per = [fn(out[i], y[i]) for i in range(4)]
        assert val == pytest.approx(np.mean([p[0] for p in per]), rel=1e-14)
        assert np.allclose(g, np.stack([p[1] for p in per]) / 4)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 6))
def test_mse_is_exactly_quadratic(seed, c):
    rng = make_rng(seed)
    u, v = rng.standard_normal(c), rng.standard_normal(c)
    y = int(rng.integers(0, c))
    f = [mse_loss(u + s * v, y)[0] for s in range(4)]
    third = f[3] - 3 * f[2] + 3 * f[1] - f[0]
    assert abs(third) < 1e-9 * max(1.0, max(abs(x) for x in f))


# -- parameter vectors ------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_parameter_vector_round_trip(seed):
    rng = make_rng(seed)
    segs = (Segment(0, "weight", (3, 2)), Segment(0, "bias", (3,)), Segment("head:0", "weight", (2, 2)))
    arrays = [rng.standard_normal(s.shape) for s in segs]
    pv = ParameterVector.pack(segs, arrays)
    again = ParameterVector.pack(segs, pv.unpack())
    assert again.data.tobytes() == pv.data.tobytes()
    for a, b in zip(arrays, pv.unpack()):
        assert a.tobytes() == b.tobytes()
    assert np.array_equal(pv.get("head:0", "weight"), arrays[2])


# -- optimisers -------------------------------------------------------------


def test_zero_gradient_zero_decay_is_noop():
    for kind in ("adam", "sgd_momentum"):
        st_ = OptimizerState(kind, lr=0.1, weight_decay=0.0)
        p = np.array([1.0, -2.0])
        assert np.array_equal(optimizer_step(st_, p, np.zeros(2)), p)


def test_plain_sgd_step():
    st_ = OptimizerState("sgd_momentum", lr=1.0, momentum=0.0, weight_decay=0.0)
    p, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert np.array_equal(optimizer_step(st_, p, g), p - g)


def test_sgd_momentum_frozen_reference():
    st_ = OptimizerState("sgd_momentum", lr=0.1, momentum=0.9, weight_decay=0.0)
    w = np.array([1.0, -2.0])
    traj = []
    for _ in range(3):
        w = optimizer_step(st_, w, w)
        traj.append(w)
    assert np.allclose(traj, [[0.9, -1.8], [0.72, -1.44], [0.486, -0.972]], atol=1e-14)


@pytest.mark.parametrize(
    "wd, expected",
    [
        (0.0, [0.900000001, 0.8004122297123382, 0.701586274504415]),
        (0.1, [0.890000001, 0.781571856954161, 0.6751012231892006]),
    ],
)
def test_adam_three_steps_frozen_reference(wd, expected):
    # f(w) = w^2 / 2 from w = 1; values from an independent decoupled-decay Adam
    st_ = OptimizerState("adam", lr=0.1, weight_decay=wd)
    w = np.array([1.0])
    got = []
    for _ in range(3):
        w = optimizer_step(st_, w, w.copy())
        got.append(w[0])
    assert np.allclose(got, expected, rtol=0, atol=1e-12)
    assert st_.step == 3 and st_.slots["m"].shape == (1,)


def test_adam_hand_iteration():
    b1, b2, lr, eps = 0.9, 0.999, 0.1, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    st_ = OptimizerState("adam", lr=lr, weight_decay=0.0)
    p = np.array([1.0])
    for _ in range(3):
        p = optimizer_step(st_, p, p.copy())
    assert abs(p[0] - w) < 1e-15


def test_nan_gradient_leaves_state_unchanged():
    st_ = OptimizerState("adam", lr=0.1)
    p = np.array([1.0, 2.0])
    p = optimizer_step(st_, p, np.array([0.1, 0.2]))
    before = (st_.step, {k: v.copy() for k, v in st_.slots.items()})
    with pytest.raises(NumericError):
        optimizer_step(st_, p, np.array([np.nan, 0.0]))
    assert st_.step == before[0]
    for k, v in before[1].items():
        assert np.array_equal(st_.slots[k], v)


def test_optimizer_shape_and_kind_checks():
    with pytest.raises(ValidationError):
        OptimizerState("rmsprop")
    with pytest.raises(DimensionError):
        optimizer_step(OptimizerState(), np.zeros(2), np.zeros(3))
