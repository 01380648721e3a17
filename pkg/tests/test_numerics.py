import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggcam import numerics as nx
from ggcam.numerics import NumericalError, Tensor, backward
from conftest import check_op_gradient


def conv_reference(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def test_conv_zero_input_gives_bias(rng):
    out = nx.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor([0.5, -2.0]), 1, 1)
    assert np.all(out.data[0] == 0.5) and np.all(out.data[1] == -2.0)


def test_conv_scalar_case():
    out = nx.conv2d(Tensor([[[2.0]]]), Tensor([[[[3.0]]]]), Tensor([1.0]), 1, 0)
    assert out.data.tolist() == [[[7.0]]]


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_nested_loops(rng, stride, pad):
    x = rng.normal(size=(2, 8, 8))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    h_span = 8 + 2 * pad - 3
    if h_span % stride:
        with pytest.raises(ValueError, match="non-integer"):
            nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        return
    got = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv_reference(x, w, b, stride, pad), atol=1e-12, rtol=0)


def test_conv_batched_equals_single(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    w, b = Tensor(rng.normal(size=(4, 2, 3, 3))), Tensor(rng.normal(size=4))
    batched = nx.conv2d(Tensor(x), w, b, 1, 1).data
    for n in range(3):
        assert np.array_equal(batched[n], nx.conv2d(Tensor(x[n]), w, b, 1, 1).data)


def test_conv_errors(rng):
    x = Tensor(rng.normal(size=(2, 5, 5)))
    with pytest.raises(ValueError):
        nx.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor([0.0]))
    with pytest.raises(ValueError):
        nx.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor([0.0]))


def test_simple_activations():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    assert nx.sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(nx.global_avg_pool(Tensor(np.full((3, 4, 5), 2.5))).data, [2.5, 2.5, 2.5])
    assert nx.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_sigmoid_range_and_softmax_rows(rng):
    z = rng.normal(scale=20, size=(5, 7))
    s = nx.sigmoid(Tensor(np.clip(z, -30, 30))).data
    assert np.all((s > 0) & (s < 1))
    p = nx.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_global_avg_pool_empty():
    with pytest.raises(ValueError):
        nx.global_avg_pool(Tensor(np.zeros((2, 0, 3))))


def test_maxpool_ties_go_to_first():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    y = nx.maxpool2(x)
    (g,) = backward(nx.sum_all(y), [x])
    assert g.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_backward_of_sum_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    (g,) = backward(nx.sum_all(x), [x])
    assert np.array_equal(g, np.ones((3, 4)))


def test_unused_parameter_gets_zero_gradient(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    unused = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    gx, gu = backward(nx.sum_all(nx.square(x)), [x, unused])
    assert np.array_equal(gu, np.zeros((2, 2)))
    np.testing.assert_allclose(gx, 2 * x.data)


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError):
        backward(Tensor(rng.normal(size=3), requires_grad=True))


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = nx.add(nx.mul(x, x), x)
    (g,) = backward(nx.sum_all(y), [x])
    assert g.tolist() == [7.0]


def test_nonfinite_raises():
    with pytest.raises(NumericalError):
        nx.reciprocal(Tensor([0.0]))
    with pytest.raises(NumericalError):
        nx.log(Tensor([-1.0]))


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = nx.square(x)
    assert not y.requires_grad and y._parents == ()


# ---- finite-difference checks for every differentiable op


def _rand(rng, *shape):
    return rng.normal(size=shape)


OP_CASES = {
    "add": (lambda a, b: nx.sum_all(nx.mul(nx.add(a, b), nx.add(a, b))), [(3, 2), (3, 2)]),
    "sub": (lambda a, b: nx.sum_all(nx.square(nx.sub(a, b))), [(4,), (4,)]),
    "scale": (lambda a, s: nx.sum_all(nx.square(nx.scale(a, s))), [(2, 3), (1,)]),
    "sigmoid": (lambda a: nx.sum_all(nx.mul(nx.sigmoid(a), nx.sigmoid(a))), [(5,)]),
    "softplus": (lambda a: nx.sum_all(nx.square(nx.softplus(a))), [(5,)]),
    "softmax": (lambda a: nx.sum_all(nx.square(nx.softmax(a))), [(2, 4)]),
    "log_softmax": (lambda a: nx.sum_all(nx.square(nx.log_softmax(a))), [(3, 4)]),
    "reciprocal": (lambda a: nx.sum_all(nx.reciprocal(nx.add_const(nx.square(a), 1.0))), [(4,)]),
    "log": (lambda a: nx.sum_all(nx.log(nx.add_const(nx.square(a), 0.5))), [(4,)]),
    "mean": (lambda a: nx.square(nx.mean_all(a)), [(3, 3)]),
    "gap": (lambda a: nx.sum_all(nx.square(nx.global_avg_pool(a))), [(2, 3, 4, 5)]),
    "linear": (lambda x, w, b: nx.sum_all(nx.square(nx.linear(x, w, b))), [(3, 4), (2, 4), (2,)]),
    "add_bias": (lambda x, b: nx.sum_all(nx.square(nx.add_bias(x, b))), [(3, 4), (4,)]),
    "channel_mix": (lambda a, w: nx.sum_all(nx.square(nx.channel_mix(a, w))), [(2, 3, 2, 2), (4, 3)]),
    "conv2d": (lambda x, w, b: nx.sum_all(nx.square(nx.conv2d(x, w, b, 1, 1))), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_strided": (lambda x, w, b: nx.sum_all(nx.square(nx.conv2d(x, w, b, 2, 1))), [(1, 2, 5, 5), (2, 2, 3, 3), (2,)]),
    "maxpool2": (lambda x: nx.sum_all(nx.square(nx.maxpool2(x))), [(2, 3, 4, 6)]),
    "relu": (lambda x: nx.sum_all(nx.square(nx.relu(x))), [(6,)]),
    "pick": (lambda x: nx.sum_all(nx.square(nx.pick(x, [2, 0]))), [(2, 3, 2)]),
    "reshape": (lambda x: nx.sum_all(nx.square(nx.reshape(x, (6,)))), [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, rng):
    build, shapes = OP_CASES[name]
    for _ in range(3):
        arrays = [_rand(rng, *s) for s in shapes]
        if name == "relu":
            arrays[0] = np.where(np.abs(arrays[0]) < 0.05, 0.3, arrays[0])
        check_op_gradient(build, arrays)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    xv = rng.normal(size=(2, 3))
    x = Tensor(xv, requires_grad=True)
    f = nx.sum_all(nx.sigmoid(x))
    (gf,) = backward(f, [x])
    x2 = Tensor(xv, requires_grad=True)
    (gg,) = backward(nx.sum_all(nx.square(x2)), [x2])
    x3 = Tensor(xv, requires_grad=True)
    combo = nx.add(nx.mul_const(nx.sum_all(nx.sigmoid(x3)), a), nx.mul_const(nx.sum_all(nx.square(x3)), b))
    (gc,) = backward(combo, [x3])
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_forward_backward_deterministic(rng):
    xv, wv, bv = rng.normal(size=(2, 1, 8, 8)), rng.normal(size=(4, 1, 3, 3)), rng.normal(size=4)

    def run():
        x, w, b = (Tensor(v, requires_grad=True) for v in (xv, wv, bv))
        loss = nx.sum_all(nx.square(nx.maxpool2(nx.relu(nx.conv2d(x, w, b, 1, 1)))))
        return [loss.data] + backward(loss, [x, w, b])

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_softplus_inverse_tiny_values():
    for y in (1.4e-11, 2.0e-9, 0.02, 1.0, 50.0):
        r = nx.softplus_inverse(y)
        assert np.isfinite(r)
        np.testing.assert_allclose(np.logaddexp(0.0, r), y, rtol=1e-12)
