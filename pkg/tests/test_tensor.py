import numpy as np
import pytest

from latrack import tensor as T
from latrack.tensor import Tensor, backward, finite_diff_check


def test_matmul_identity():
    m = Tensor([[2.0, -1.0], [0.5, 3.0]])
    eye = Tensor(np.eye(2))
    assert np.allclose(T.matmul(eye, m).data, m.data)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_zero_case():
    out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 2))))
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_elementwise_examples():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    assert T.tabs(Tensor(-3.0)).data == 3.0
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))))


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data, [1 / 3] * 3)
    sat = T.softmax(Tensor([1000.0, 0.0]), axis=0).data
    assert abs(sat[0] - 1.0) < 1e-12 and abs(sat[1]) < 1e-12
    # hand computation: e^x / sum e^x for x = (1, 2, 3)
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(T.softmax(Tensor([1.0, 2.0, 3.0]), axis=0).data, e / e.sum(), atol=1e-12)
    assert np.allclose(T.softmax(Tensor([1.0, 2.0, 3.0]), axis=0).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_rows_sum_to_one_and_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(25):
        x = Tensor(rng.uniform(-50, 50, (4, 7)))
        s = T.softmax(x, axis=1).data
        assert np.all(s >= 0)
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)


def test_layer_norm_rows_standardized():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-2, 2, (5, 8)))
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-6)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-4)


def test_layer_norm_examples():
    gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
    const = T.layer_norm(Tensor([[3.0, 3.0]]), gain, bias).data
    assert np.allclose(const, 0.0)  # zero variance handled by eps
    row = T.layer_norm(Tensor([[1.0, -1.0]]), gain, bias).data
    assert np.allclose(row, [[1.0, -1.0]], atol=1e-5)
    zero_gain = T.layer_norm(Tensor([[0.3, -2.0]]), Tensor(np.zeros(2)), bias).data
    assert np.array_equal(zero_gain, [[0.0, 0.0]])


def test_backward_sum_and_square():
    x = Tensor(np.arange(5.0), requires_grad=True)
    backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones(5))
    y = Tensor(3.0, requires_grad=True)
    backward(T.mul(y, y))
    assert np.allclose(y.grad, 6.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        backward(T.scale(x, 2.0))


def test_backward_accumulates_across_uses():
    x = Tensor(2.0, requires_grad=True)
    backward(T.add(T.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
    assert np.allclose(x.grad, 5.0)


def test_finite_diff_oracle_self_test():
    # sum of squares: oracle and analytic gradient agree tightly
    x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
    err = finite_diff_check(lambda t: T.tsum(T.mul(t, t)), x)
    assert err < 1e-8
    # linear function: central differences are exact up to rounding
    w = Tensor(np.array([1.0, -2.0, 3.0]))
    y = Tensor(np.array([0.3, 0.7, -0.2]), requires_grad=True)
    err = finite_diff_check(lambda t: T.tsum(T.mul(t, w)), y)
    assert err < 1e-10


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "sigmoid", "gelu", "abs",
                                  "softmax", "matmul", "layer_norm", "maximum", "minimum",
                                  "log", "sqrt", "conv2d", "concat", "slice", "sum_axis"])
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (3, 4))
    other = Tensor(b)

    def scalarize(t):
        return T.tsum(T.mul(t, Tensor(rng.uniform(-1, 1, t.shape))))

    fns = {
        "add": lambda x: scalarize(T.add(x, other)),
        "sub": lambda x: scalarize(T.sub(x, other)),
        "mul": lambda x: scalarize(T.mul(x, other)),
        "div": lambda x: scalarize(T.div(x, Tensor(b + 3.0))),
        "sigmoid": lambda x: scalarize(T.sigmoid(x)),
        "gelu": lambda x: scalarize(T.gelu(x)),
        "abs": lambda x: scalarize(T.tabs(T.shift(x, 0.1))),
        "softmax": lambda x: scalarize(T.softmax(x, axis=1)),
        "matmul": lambda x: scalarize(T.matmul(x, Tensor(rng.uniform(-1, 1, (4, 2))))),
        "layer_norm": lambda x: scalarize(
            T.layer_norm(x, Tensor(rng.uniform(0.5, 1.5, 4)), Tensor(rng.uniform(-1, 1, 4)))),
        "maximum": lambda x: scalarize(T.tmaximum(x, other)),
        "minimum": lambda x: scalarize(T.tminimum(x, other)),
        "log": lambda x: scalarize(T.tlog(T.shift(T.tabs(x), 0.5))),
        "sqrt": lambda x: scalarize(T.tsqrt(T.shift(T.tabs(x), 0.5))),
        "conv2d": lambda x: scalarize(
            T.conv2d(T.reshape(x, (1, 3, 4)), Tensor(rng.uniform(-1, 1, (2, 1, 3, 3))),
                     Tensor(rng.uniform(-1, 1, 2)), padding=1)),
        "concat": lambda x: scalarize(T.concat([x, T.scale(x, 2.0)], axis=0)),
        "slice": lambda x: scalarize(x[1:, :2]),
        "sum_axis": lambda x: scalarize(T.tsum(x, axis=0)),
    }
    x = Tensor(a, requires_grad=True)
    assert finite_diff_check(fns[name], x) < 1e-4


def test_bias_add_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(-1, 1, (4, 3)))
    b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
    err = finite_diff_check(lambda t: T.tsum(T.mul(T.add(x, t), T.add(x, t))), b)
    assert err < 1e-6


def test_forward_repeatable_bit_identical():
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(-2, 2, (6, 6)))
    w = Tensor(rng.uniform(-1, 1, (6, 6)))

    def run():
        return T.tsum(T.softmax(T.gelu(T.matmul(x, w)), axis=1)).data.copy()

    assert np.array_equal(run(), run())


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert y._backward is None and not y.requires_grad


def test_clamp_gradient_zero_outside():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    backward(T.tsum(T.clamp(x, 0.0, 1.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_precision_modes():
    with T.precision("f32"):
        assert Tensor(1.0).data.dtype == np.float32
    assert Tensor(1.0).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(21)
    x = Tensor(rng.uniform(-100, 100, (8, 8)))
    for out in (T.softmax(x, axis=1), T.sigmoid(x), T.gelu(x),
                T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))):
        assert np.all(np.isfinite(out.data))
