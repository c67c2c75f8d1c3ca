import numpy as np
import pytest

from conformerst import numcore as nc


def rand(*shape, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape)


class TestShapes:
    def test_matmul_shape(self):
        a = nc.tensor(rand(2, 3))
        b = nc.tensor(rand(3, 4))
        assert nc.matmul(a, b).shape == (2, 4)

    def test_matmul_mismatch_names_op_and_shapes(self):
        a = nc.tensor(rand(2, 3))
        b = nc.tensor(rand(4, 4))
        with pytest.raises(nc.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 4\)"):
            nc.matmul(a, b)

    def test_conv1d_length_rule(self):
        x = nc.tensor(rand(1, 100, 3))
        w = nc.tensor(rand(5, 3, 7))
        out = nc.conv1d(x, w, None, stride=2, padding=2)
        assert out.shape == (1, 50, 7)
        assert nc.conv1d_out_len(100, 5, 2, 2) == 50

    def test_conv1d_bad_attrs(self):
        x = nc.tensor(rand(1, 10, 3))
        w = nc.tensor(rand(5, 3, 7))
        with pytest.raises(nc.ShapeError):
            nc.conv1d(x, w, None, stride=0)

    def test_softmax_rows_sum_to_one(self):
        out = nc.softmax(nc.tensor(rand(4, 9, seed=3)))
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_strict_mode_rejects_nonfinite(self):
        nc.set_strict_mode(True)
        try:
            with pytest.raises(ValueError, match="non-finite"), np.errstate(over="ignore"):
                nc.exp(nc.tensor([1e6]))
        finally:
            nc.set_strict_mode(False)


class TestBackward:
    def test_sum_gradient_all_ones(self):
        x = nc.tensor(rand(3, 4), requires_grad=True)
        nc.backward(nc.sum_(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares(self):
        x = nc.tensor([1.0, 2.0], requires_grad=True)
        nc.backward(nc.sum_(nc.mul(x, x)))
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_double_backward_rejected(self):
        x = nc.tensor([1.0], requires_grad=True)
        y = nc.sum_(nc.mul(x, x))
        nc.backward(y)
        with pytest.raises(nc.GraphError):
            nc.backward(y)

    def test_detached_tensor_gets_no_grad(self):
        x = nc.tensor(rand(3), requires_grad=True)
        d = x.detach()
        nc.backward(nc.sum_(nc.mul(d, d)))
        assert x.grad is None and d.grad is None

    def test_nonparticipating_leaf(self):
        x = nc.tensor(rand(3), requires_grad=True)
        y = nc.tensor(rand(3), requires_grad=True)
        nc.backward(nc.sum_(x))
        assert y.grad is None  # zero by convention: never touched


OPS = {
    "silu": lambda x: nc.sum_(nc.silu(x)),
    "glu": lambda x: nc.sum_(nc.glu(x)),
    "softmax": lambda x: nc.sum_(nc.mul(nc.softmax(x), nc.tensor(rand(3, 6, seed=9)))),
    "log_softmax": lambda x: nc.sum_(nc.mul(nc.log_softmax(x), nc.tensor(rand(3, 6, seed=9)))),
    "layer_norm": lambda x: nc.sum_(nc.mul(nc.layer_norm(x), nc.tensor(rand(3, 6, seed=9)))),
    "exp": lambda x: nc.sum_(nc.exp(x)),
    "matmul": lambda x: nc.sum_(nc.matmul(x, nc.tensor(rand(6, 2, seed=4)))),
    "mask_fill": lambda x: nc.sum_(
        nc.mul(nc.softmax(nc.mask_fill(x, np.arange(6) >= 4, -1e30)), nc.tensor(rand(3, 6, seed=9)))
    ),
    "transpose": lambda x: nc.sum_(nc.mul(nc.transpose(x, (1, 0)), nc.tensor(rand(6, 3, seed=5)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    x = nc.tensor(rand(3, 6, seed=17) * 0.7)
    err = nc.finite_difference_check(OPS[name], x, eps=1e-6)
    assert err <= 1e-5, f"{name}: {err}"


def test_conv_gradients():
    w = nc.tensor(rand(5, 3, 4, seed=2) * 0.3)
    dw = nc.tensor(rand(5, 4, seed=6) * 0.3)

    def f(x):
        h = nc.conv1d(x, w, None, stride=2, padding=2)
        h = nc.depthwise_conv1d(h, dw, None, padding=2)
        return nc.sum_(nc.silu(h))

    x = nc.tensor(rand(2, 12, 3, seed=8) * 0.5)
    assert nc.finite_difference_check(f, x, eps=1e-6) <= 1e-5

    # weight gradients, checked by treating the weight as the variable
    x0 = nc.tensor(rand(2, 12, 3, seed=8) * 0.5)

    def g(wv):
        return nc.sum_(nc.silu(nc.conv1d(x0, wv, None, stride=2, padding=2)))

    assert nc.finite_difference_check(g, w, eps=1e-6) <= 1e-5


def test_embedding_gradient_scatter():
    w = nc.tensor(rand(5, 3), requires_grad=True)
    out = nc.embedding(w, np.array([1, 1, 4]))
    nc.backward(nc.sum_(out))
    expect = np.zeros((5, 3))
    expect[1] = 2.0
    expect[4] = 1.0
    assert np.array_equal(w.grad, expect)


def test_masked_positions_zero_grad():
    x = nc.tensor(rand(4), requires_grad=True)
    out = nc.mask_fill(x, np.array([False, True, False, True]), 0.0)
    nc.backward(nc.sum_(nc.mul(out, out)))
    assert x.grad[1] == 0.0 and x.grad[3] == 0.0


def test_forward_op_dispatch():
    a = nc.tensor(rand(2, 3))
    b = nc.tensor(rand(3, 4))
    out = nc.forward_op("matmul", [a, b])
    assert out.shape == (2, 4)
    with pytest.raises(KeyError):
        nc.forward_op("bogus", [a])


def test_determinism():
    x = rand(3, 5, seed=11)
    a = nc.log_softmax(nc.tensor(x)).data
    b = nc.log_softmax(nc.tensor(x)).data
    assert np.array_equal(a, b)


def test_fd_check_exact_for_sum():
    x = nc.tensor(rand(2, 3, seed=13))
    assert nc.finite_difference_check(lambda t: nc.sum_(t), x) <= 1e-8


def test_fd_check_log_softmax_pick():
    x = nc.tensor(rand(1, 5, seed=21))

    def f(t):
        return nc.sum_(nc.gather_index(nc.log_softmax(t), np.array([2])))

    assert nc.finite_difference_check(f, x) <= 1e-6
