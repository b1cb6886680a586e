import numpy as np
import pytest

from metapool.tensor import (
    DomainError,
    Record,
    ReplayError,
    ShapeError,
    Tensor,
    TensorError,
    apply_primitive,
    broadcast_to,
    concatenate,
    finite_difference_check,
    from_bytes,
    from_csv,
    grad,
    matmul,
    max_reduce,
    reshape,
    slice_axes,
    sum_reduce,
    to_bytes,
    to_csv,
)


def test_apply_primitive_basic_examples():
    with Record():
        assert np.array_equal(apply_primitive("add", [1.0, 2.0], [3.0, 4.0]).numpy(), [4.0, 6.0])
        assert apply_primitive("exp", 0.0).item() == 1.0
        assert apply_primitive("relu", -2.0).item() == 0.0


def test_elementwise_against_numpy():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0
    with Record():
        assert np.array_equal((Tensor(a) + Tensor(b)).numpy(), a + b)
        assert np.array_equal((Tensor(a) - Tensor(b)).numpy(), a - b)
        assert np.array_equal((Tensor(a) * Tensor(b)).numpy(), a * b)
        assert np.array_equal((Tensor(a) / Tensor(b)).numpy(), a / b)
        assert np.array_equal((Tensor(b) ** 2.0).numpy(), b ** 2.0)
        assert np.allclose(Tensor(a).sigmoid().numpy(), 1 / (1 + np.exp(-a)))


def test_trailing_broadcast_rule():
    with Record():
        out = Tensor(np.ones((2, 3, 4))) + Tensor(np.arange(4.0))
        assert out.shape == (2, 3, 4)
        with pytest.raises(ShapeError):
            Tensor(np.ones((3, 4))) + Tensor(np.ones((4, 3)))


def test_domain_errors_report_op():
    with Record():
        with pytest.raises(DomainError, match="log"):
            Tensor([-1.0]).log()
        with pytest.raises(DomainError, match="division by zero"):
            Tensor([1.0]) / Tensor([0.0])


def test_requires_active_record():
    with pytest.raises(TensorError, match="no active Record"):
        Tensor([1.0]) + Tensor([2.0])


def test_grad_power_rule():
    with Record() as rec:
        x = rec.leaf(3.0)
        (g,) = grad(x * x, [x])
        assert g.item() == pytest.approx(6.0)


def test_grad_of_grad_power_rule_twice():
    with Record() as rec:
        x = rec.leaf(2.0)
        y = x * x * x
        (g1,) = grad(y, [x])
        (g2,) = grad(g1, [x])
        assert g2.item() == pytest.approx(12.0)


def test_grad_product_rule_two_inputs():
    with Record() as rec:
        x, y = rec.leaf(2.0), rec.leaf(5.0)
        gx, gy = grad(x * y, [x, y])
        assert (gx.item(), gy.item()) == (5.0, 2.0)


def test_grad_unreachable_input_is_zero():
    with Record() as rec:
        x, z = rec.leaf(2.0), rec.leaf([1.0, 1.0])
        gx, gz = grad(x * x, [x, z])
        assert gx.item() == 4.0
        assert np.array_equal(gz.numpy(), [0.0, 0.0])


def test_grad_rejects_nonscalar_and_foreign_inputs():
    with Record() as rec:
        x = rec.leaf([1.0, 2.0])
        y = x * x
        with pytest.raises(ShapeError):
            grad(y, [x])
        s = y.sum()
        with Record() as other:
            w = other.leaf(1.0)
        with pytest.raises(TensorError, match="not in the output's record"):
            grad(s, [w])


def test_second_order_closed_forms():
    # d2/dx2 exp(x) = exp(x); d2/dxdy (x*y) = 1
    with Record() as rec:
        x = rec.leaf(0.7)
        (g1,) = grad(x.exp(), [x])
        (g2,) = grad(g1, [x])
        rel = abs(g2.item() - np.exp(0.7)) / np.exp(0.7)
        assert rel < 1e-6
        a, b = rec.leaf(1.3), rec.leaf(-0.4)
        (ga,) = grad(a * b, [a])
        (gab,) = grad(ga, [b])
        assert gab.item() == pytest.approx(1.0, rel=1e-6)


def _scalarize(w, t):
    return (t * Tensor(w)).sum()


PRIMITIVE_CASES = {
    "add": lambda x, y: x + y,
    "subtract": lambda x, y: x - y,
    "multiply": lambda x, y: x * y,
    "divide": lambda x, y: x / y,
    "power": lambda x, y: x ** y,
    "exp": lambda x: x.exp(),
    "log": lambda x: x.log(),
    "sigmoid": lambda x: x.sigmoid(),
    "relu": lambda x: x.relu(),
    "matmul": lambda x, y: matmul(x.reshape((2, 3)), y.reshape((3, 2))).reshape((4,)),
    "sum": lambda x: sum_reduce(x.reshape((2, 3)), axes=1).reshape((2,)),
    "max": lambda x: max_reduce(x.reshape((2, 3)), axis=1).reshape((2,)),
    "broadcast": lambda x: broadcast_to(x.reshape((1, 6)), (3, 6)).reshape((18,)),
    "reshape": lambda x: reshape(x, (3, 2)).reshape((6,)),
    "slice": lambda x: slice_axes(x.reshape((2, 3)), (0, 1), (2, 3)).reshape((4,)),
    "concat": lambda x, y: concatenate([x.reshape((2, 3)), y.reshape((2, 3))], axis=0).reshape((12,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_every_primitive_grad_matches_finite_differences(name):
    # 100 random points per primitive, fixed seed, relative error <= 1e-4
    fn = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(hash(name) % (2**32))
    arity = fn.__code__.co_argcount
    for _ in range(100):
        point = rng.uniform(0.3, 2.0, size=6)  # valid for log/divide/power domains
        with Record():
            probe = fn(Tensor(point)) if arity == 1 else fn(Tensor(point), Tensor(point))
            w = rng.normal(size=probe.shape)
        if arity == 1:
            wrap = lambda t: _scalarize(w, fn(t))
        else:
            other = rng.uniform(0.3, 2.0, size=6)
            wrap = lambda t: _scalarize(w, fn(t, Tensor(other)))
        err = finite_difference_check(wrap, point, 1e-6)
        assert err < 1e-4, f"{name}: fd mismatch {err}"


def test_finite_difference_check_examples():
    # quadratic: central differences are exact up to rounding
    err = finite_difference_check(lambda x: (x * x).sum(), np.array([3.0]), 1e-3)
    assert err <= 1e-6
    # linear function: error 0 up to rounding
    err = finite_difference_check(lambda x: x.sum(), np.arange(5.0), 1e-3)
    assert err <= 1e-9


def test_max_reduce_tie_routes_to_lowest_linear_index():
    vals = np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 0.5]])
    with Record() as rec:
        x = rec.leaf(vals)
        y = max_reduce(x, axis=1).sum()
        (g,) = grad(y, [x])
        assert np.array_equal(g.numpy(), [[0, 1, 0], [1, 0, 0]])
        x2 = rec.leaf(np.full((2, 2), 7.0))
        (g2,) = grad(max_reduce(x2), [x2])
        assert np.array_equal(g2.numpy(), [[1, 0], [0, 0]])


def test_unslice_roundtrip_gradient():
    with Record() as rec:
        x = rec.leaf(np.arange(12.0).reshape(3, 4))
        part = slice_axes(x, (1, 0), (3, 4), (1, 2))  # rows 1:3, cols 0:4:2
        (g,) = grad(part.sum(), [x])
        want = np.zeros((3, 4))
        want[1:3, 0:4:2] = 1.0
        assert np.array_equal(g.numpy(), want)


def test_replay_determinism():
    rng = np.random.default_rng(3)
    with Record() as rec:
        x = rec.leaf(rng.uniform(0.1, 1.0, size=(4, 5)))
        y = ((x.log() * 2.0).exp().sum(axes=1) / 5.0).sum()
        grad(y, [x])
        rec.replay()  # bit-identical or raises


def test_replay_detects_tampering():
    with Record() as rec:
        x = rec.leaf([1.0, 2.0])
        y = x * x
        rec._values[y.node_id] = np.array([9.0, 9.0])
        with pytest.raises(ReplayError):
            rec.replay()


def test_higher_order_through_matmul_and_reduce():
    # f(x) = sum((x @ x)^2) on 2x2, checked against finite differences of df/dx
    base = np.array([[0.6, 1.1], [0.3, 0.8]])

    def first_grad(values):
        with Record() as rec:
            x = rec.leaf(values)
            y = ((matmul(x, x)) ** 2.0).sum()
            return grad(y, [x])[0].numpy()

    with Record() as rec:
        x = rec.leaf(base)
        y = ((matmul(x, x)) ** 2.0).sum()
        (g,) = grad(y, [x])
        (h00,) = grad(slice_axes(g, (0, 0), (1, 1)).reshape(()), [x])
    h = 1e-6
    fd = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            hi = base.copy()
            lo = base.copy()
            hi[i, j] += h
            lo[i, j] -= h
            fd[i, j] = (first_grad(hi)[0, 0] - first_grad(lo)[0, 0]) / (2 * h)
    assert np.allclose(h00.numpy(), fd, rtol=1e-4, atol=1e-7)


def test_detach_stops_gradient():
    with Record() as rec:
        x = rec.leaf(2.0)
        y = x * x
        z = y.detach() * x
        (g,) = grad(z, [x])
        assert g.item() == pytest.approx(4.0)  # only the direct factor


def test_tensor_values_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.numpy()[0] = 5.0


def test_csv_roundtrip_and_format():
    arr = np.array([[1.5, -0.25], [123456.0, 0.0001]])
    text = to_csv(Tensor(arr))
    assert "e" not in text and "E" not in text  # |v| < 1e6: no exponent
    back = from_csv(text)
    assert np.array_equal(back.numpy(), arr)
    big = to_csv(Tensor(np.array([[2.5e7]])))
    assert "e" in big
    with pytest.raises(ShapeError):
        to_csv(Tensor(np.zeros((2, 2, 2))))


def test_binary_container_roundtrip():
    arr = np.random.default_rng(0).normal(size=(2, 3, 4))
    blob = to_bytes(Tensor(arr))
    assert blob[:4] == b"MPT1"
    back = from_bytes(blob)
    assert back.shape == (2, 3, 4)
    assert np.array_equal(back.numpy(), arr)
    with pytest.raises(TensorError):
        from_bytes(b"NOPE" + blob[4:])
