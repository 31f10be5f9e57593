import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from workbench import autodiff as ad
from workbench.autodiff import BackwardOverride, Graph, GraphError, NonFiniteError


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def random_net(rng, dims, act):
    params = []
    for din, dout in zip(dims[:-1], dims[1:]):
        params.append((rng.standard_normal((din, dout)) / np.sqrt(din), 0.1 * rng.standard_normal(dout)))
    return params


def net_fn(params, act, y):
    f = ad.relu if act == "relu" else ad.tanh

    def fn(x):
        h = x
        for i, (W, b) in enumerate(params):
            h = ad.affine(h, W, b)
            if i < len(params) - 1:
                h = f(h)
        return ad.neg(ad.sum(ad.take(ad.log_softmax(h), y)))

    return fn


def straight_line(params, act, x, y):
    h = x
    for i, (W, b) in enumerate(params):
        h = h @ W + b
        if i < len(params) - 1:
            h = np.maximum(h, 0) if act == "relu" else np.tanh(h)
    z = h - h.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].sum()


def test_identity_affine():
    g = Graph(lambda x: ad.affine(x, np.eye(2), np.zeros(2)))
    assert np.array_equal(ad.forward_eval(g, [np.array([[1.0, 2.0]])]), [[1.0, 2.0]])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros((1, 3))), np.full((1, 3), 1 / 3))


def test_forward_matches_straight_line():
    rng = np.random.default_rng(11)
    params = random_net(rng, [4, 8, 8, 3], "relu")
    x, y = rng.random((5, 4)), rng.integers(0, 3, 5)
    g = Graph(net_fn(params, "relu", y))
    np.testing.assert_allclose(ad.forward_eval(g, [x]), straight_line(params, "relu", x, y), rtol=1e-13)


def test_simple_gradients():
    assert np.array_equal(ad.value_and_grad(lambda x: ad.sum(x), np.ones(4))[1], np.ones(4))
    _, grad = ad.value_and_grad(lambda x: ad.sum(x * x), np.array([3.0, -1.0]))
    assert np.array_equal(grad, [6.0, -2.0])


def test_finite_difference_examples():
    x = np.random.default_rng(0).random(5)
    np.testing.assert_allclose(ad.finite_diff_gradient(np.sum, x, h=1e-4), np.ones(5), atol=1e-8)
    np.testing.assert_allclose(ad.finite_diff_gradient(lambda v: v[0] * v[1], np.array([2.0, 5.0])), [5.0, 2.0], atol=1e-6)
    with pytest.raises(ValueError):
        ad.finite_diff_gradient(np.sum, x, h=0)
    with pytest.raises(NonFiniteError):
        ad.finite_diff_gradient(lambda v: np.log(v[0] - 2.0), np.array([2.0]))


@pytest.mark.parametrize("seed", range(20))
def test_mlp_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    act = "tanh" if seed % 2 else "relu"
    params = random_net(rng, [3, 6, 5, 4], act)
    x, y = rng.random((2, 3)), rng.integers(0, 4, 2)
    _, grad = ad.value_and_grad(net_fn(params, act, y), x)
    fd = ad.finite_diff_gradient(lambda v: straight_line(params, act, v, y), x, h=1e-5)
    assert rel_err(grad, fd) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.floats(-3, 3), st.floats(0.1, 2.0))
def test_elementwise_ops_property(n, d, shift, scale):
    x = np.linspace(-1, 1, n * d).reshape(n, d) * scale + shift

    def fn(v):
        a = ad.tanh(v) * ad.sigmoid(v) + ad.softplus(v) - ad.exp(v * 0.1)
        return ad.sum(ad.l2_norm(ad.concat([a, ad.softmax(v)], axis=1), axis=1)) + ad.mean(ad.log(ad.exp(v) + 1.0))

    _, grad = ad.value_and_grad(fn, x)

    def plain(v):
        return float(ad.forward_eval(Graph(fn), [v]))

    assert rel_err(grad, ad.finite_diff_gradient(plain, x)) < 1e-5


def test_errors():
    g = Graph(lambda x: x * 2.0)
    with pytest.raises(GraphError, match="before forward_eval"):
        ad.backward_grad(g)
    ad.forward_eval(g, [np.ones(3)])
    with pytest.raises(GraphError, match="scalar"):
        ad.backward_grad(g)
    shaped = Graph(lambda x: ad.sum(x), input_shapes=[(None, 2)])
    with pytest.raises(GraphError, match="input 0"):
        ad.forward_eval(shaped, [np.ones((3, 4))])
    bad = Graph(lambda x: ad.affine(x, np.ones((3, 2)), np.zeros(2)))
    with pytest.raises(GraphError) as err:
        ad.forward_eval(bad, [np.ones((1, 2))])
    assert err.value.node is not None


def test_non_finite_aborts():
    with pytest.raises(NonFiniteError):
        ad.value_and_grad(lambda x: ad.sum(ad.log(x)), np.array([0.0, 1.0]))


def test_counters_exact():
    g = Graph(lambda x: ad.sum(x * x))
    for _ in range(3):
        ad.forward_eval(g, [np.ones(2)])
    ad.backward_grad(g)
    assert (g.forward_calls, g.backward_calls) == (3, 1)


def test_identity_override_on_projection():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((3, 3))
    x = rng.standard_normal((4, 3))
    fn = lambda v: ad.sum(ad.clamp(ad.affine(v, W, np.zeros(3)), 0.0, 1.0))  # noqa: E731
    g = Graph(fn)
    base = ad.forward_eval(g, [x]).copy()
    clamp_node = len(g.nodes) - 2
    ad.attach_override(g, clamp_node, BackwardOverride.identity())
    assert ad.forward_eval(g, [x]).tobytes() == base.tobytes()
    # gradient of sum(xW) alone
    np.testing.assert_allclose(ad.backward_grad(g), np.ones((4, 3)) @ W.T)


def test_straight_through_clamp():
    x = np.array([-1.0, 0.5, 2.0])
    _, g0 = ad.value_and_grad(lambda v: ad.sum(ad.clamp(v, 0.0, 1.0)), x)
    _, g1 = ad.value_and_grad(lambda v: ad.sum(ad.clamp(v, 0.0, 1.0, straight_through=True)), x)
    assert np.array_equal(g0, [0.0, 1.0, 0.0]) and np.array_equal(g1, [1.0, 1.0, 1.0])


def _purify(v, steps=5):
    its = [v]
    for _ in range(steps):
        v = ad.clamp(v - 0.1 * ad.tanh(v * 3.0), 0.0, 1.0)
        its.append(v)
    return v, its


def _classifier(W):
    # log-probability of class 0, summed over the batch
    return lambda v: ad.sum(ad.log_softmax(ad.affine(v, W, np.zeros(2))) * np.array([1.0, 0.0]))


def test_identity_override_over_purification():
    rng = np.random.default_rng(4)
    W = rng.standard_normal((3, 2))
    x = rng.random((2, 3))
    clf = _classifier(W)
    fn = lambda v: clf(ad.composite(lambda u: _purify(u)[0], v, override=BackwardOverride.identity()))  # noqa: E731
    _, grad = ad.value_and_grad(fn, x)
    purified = ad.value_of(_purify(x)[0])
    _, direct = ad.value_and_grad(clf, purified)
    np.testing.assert_allclose(grad, direct, rtol=1e-12)


def test_trajectory_override_averages_iterates():
    rng = np.random.default_rng(5)
    W = rng.standard_normal((3, 2))
    x = rng.random((2, 3))
    clf = _classifier(W)
    fn = lambda v: clf(  # noqa: E731
        ad.composite(lambda u: _purify(u), v, override=BackwardOverride.trajectory(), with_iterates=True)
    )
    _, grad = ad.value_and_grad(fn, x)
    iterates = [ad.value_of(i) for i in _purify(x)[1]]
    assert len(iterates) == 6
    expected = np.mean([ad.value_and_grad(clf, it)[1] for it in iterates], axis=0)
    np.testing.assert_allclose(grad, expected, rtol=1e-12)


def test_override_validation():
    with pytest.raises(ValueError):
        BackwardOverride.trajectory([])
    with pytest.raises(ValueError):
        BackwardOverride("mystery")
    g = Graph(lambda x: ad.sum(ad.affine(x, np.ones((2, 3)), np.zeros(3))))
    ad.forward_eval(g, [np.ones((1, 2))])
    with pytest.raises(GraphError, match="equal shapes"):
        ad.attach_override(g, 3, BackwardOverride.identity())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_override_never_changes_forward(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((3, 3))
    fn = lambda x: ad.sum(ad.tanh(ad.clamp(ad.affine(x, W, np.zeros(3)), 0.0, 1.0)))  # noqa: E731
    x = rng.standard_normal((2, 3))
    g = Graph(fn)
    before = ad.forward_eval(g, [x]).tobytes()
    node = int(rng.integers(1, len(g.nodes)))
    n = g.nodes[node]
    if not n.parents or g.nodes[n.parents[0]].value.shape != n.value.shape:
        return
    ad.attach_override(g, node, BackwardOverride.identity())
    assert ad.forward_eval(g, [x]).tobytes() == before


def test_cost_tracking_through_composites():
    with ad.track_cost() as outer:
        with ad.track_cost() as inner:
            _, _ = ad.value_and_grad(lambda v: ad.sum(ad.composite(lambda u: u * 2.0, v, role="static")), np.ones(2))
        ad.composite(lambda u: u, np.ones(2), role="score")
    assert inner.as_dict() == {"static": {"forward": 1, "backward": 1}}
    assert outer.total() == 3


def test_dlr_helpers():
    x = np.array([[3.0, 1.0, 2.0, 0.0]])
    _, g = ad.value_and_grad(lambda v: ad.sum(ad.max_except(v, [0])), x)
    assert np.array_equal(g, [[0, 0, 1, 0]])
    s, g = ad.value_and_grad(lambda v: ad.sum(ad.column(ad.sort_desc(v), 1)), x)
    assert s == 2.0 and np.array_equal(g, [[0, 0, 1, 0]])
