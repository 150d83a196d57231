import numpy as np
import pytest

from octforce import autodiff as ad
from octforce.autodiff import Tensor

from oracles import conv1d_loops, conv2d_loops, grad_check

SEEDS = range(10)


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _proj_loss(out_fn, seed):
    """Scalar loss sum(out * R) with a fixed random R, so every output entry matters."""
    r = None

    def loss():
        nonlocal r
        out = out_fn()
        if r is None:
            r = np.random.default_rng(seed + 1000).standard_normal(out.shape)
        return (out * r).sum()

    return loss


# --- forward values -------------------------------------------------------


def test_activation_values_at_zero():
    z = Tensor(np.zeros(3))
    assert np.all(ad.sigmoid(z).value == 0.5)
    assert np.all(ad.tanh(z).value == 0.0)
    assert np.all(ad.relu(Tensor([-1.0, 0.0, 2.0])).value == [0.0, 0.0, 2.0])


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 9))
    w = Tensor(np.ones((1, 1, 1)))
    y = ad.conv1d(Tensor(x), w, Tensor(np.zeros(1)))
    assert np.array_equal(y.value, x)


@pytest.mark.parametrize("length,stride,expected", [(70, 2, 35), (35, 2, 18), (9, 2, 5), (8, 1, 8), (7, 3, 3)])
def test_conv1d_same_shape_law(length, stride, expected):
    x = Tensor(np.zeros((1, 2, length)))
    w = Tensor(np.zeros((4, 2, 3)))
    assert ad.conv1d(x, w, stride=stride).shape == (1, 4, expected)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding,k", [(1, "same", 3), (2, "same", 3), (1, "valid", 3), (2, "same", 5), (3, "valid", 1)])
def test_conv1d_matches_loops(seed, stride, padding, k):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 11))
    w = rng.standard_normal((4, 3, k))
    b = rng.standard_normal(4)
    y = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(y.value, conv1d_loops(x, w, b, stride, padding), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [((1, 1), "same"), ((2, 2), "same"), ((1, 2), "valid")])
def test_conv2d_matches_loops(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 7))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(y.value, conv2d_loops(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_identity_and_shape_law():
    x = np.random.default_rng(1).standard_normal((2, 1, 5, 7))
    y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(y.value, x)
    w = Tensor(np.zeros((3, 1, 3, 3)))
    assert ad.conv2d(Tensor(x), w, stride=(2, 2)).shape == (2, 3, 3, 4)
    assert ad.conv2d(Tensor(np.zeros((1, 1, 50, 70))), w, stride=2).shape == (1, 3, 25, 35)


def test_conv_shape_errors_name_dimension():
    with pytest.raises(ValueError, match="channels_in"):
        ad.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 3, 3))))
    with pytest.raises(ValueError, match="bias"):
        ad.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ValueError, match="channels_in"):
        ad.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="inner dimension"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))))


def test_mse_of_identical_is_zero_with_zero_grad():
    x = Tensor(np.arange(4.0).reshape(4, 1), requires_grad=True)
    with ad.Tape():
        loss = ad.mse_loss(x, x.value.copy())
    ad.backward(loss)
    assert loss.value == 0.0
    assert np.all(x.grad == 0.0)


def test_global_avg_pool_constant_map():
    x = Tensor(np.full((2, 3, 8), 1.5), requires_grad=True)
    with ad.Tape():
        pooled = ad.global_avg_pool(x)
        loss = pooled.sum()
    ad.backward(loss)
    assert np.allclose(pooled.value, 1.5)
    assert np.allclose(x.grad, 1.0 / 8)


# --- backward semantics ---------------------------------------------------


def test_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    with ad.Tape():
        loss = x.sum()
    ad.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_unused_parameter_gets_zero_gradient():
    rng = np.random.default_rng(0)
    x, unused = _t(rng, 3), _t(rng, 3)
    with ad.Tape():
        loss = (x * x).sum()
    ad.backward(loss)
    assert unused.grad is None or np.all(unused.grad == 0)


def test_backward_accumulates_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with ad.Tape():
        loss = (x * x).sum()
    ad.backward(loss)
    ad.backward(loss)
    assert np.array_equal(x.grad, 2 * (2 * x.value))
    x.zero_grad()
    ad.backward(loss)
    assert np.array_equal(x.grad, 2 * x.value)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(y)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            (x * x).sum()
    assert len(tape) == 0


def test_tape_is_in_recording_order():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        a = x * 2.0
        b = ad.tanh(a)
        c = b.sum()
    assert [n[0] for n in tape.nodes] == [a, b, c]
    assert (a.node_id, b.node_id, c.node_id) == (0, 1, 2)


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 3, 20)), rng.standard_normal((4, 3, 3))
    y1 = ad.conv1d(Tensor(x), Tensor(w), stride=2).value
    y2 = ad.conv1d(Tensor(x), Tensor(w), stride=2).value
    assert y1.tobytes() == y2.tobytes()


# --- finite-difference checks --------------------------------------------

PRIMITIVES = {
    "add_bias": lambda r: ((lambda a, b: a + b), [_t(r, 3, 4), _t(r, 4)]),
    "mul": lambda r: ((lambda a, b: a * b), [_t(r, 3, 4), _t(r, 3, 4)]),
    "sub": lambda r: ((lambda a, b: a - b), [_t(r, 2, 5), _t(r, 2, 5)]),
    "sigmoid": lambda r: (ad.sigmoid, [_t(r, 3, 4)]),
    "tanh": lambda r: (ad.tanh, [_t(r, 3, 4)]),
    "relu": lambda r: (ad.relu, [_t(r, 3, 4)]),
    "dense": lambda r: (ad.dense, [_t(r, 3, 4), _t(r, 4, 2), _t(r, 2)]),
    "global_avg_pool": lambda r: (ad.global_avg_pool, [_t(r, 2, 3, 5)]),
    "getitem": lambda r: ((lambda a: a[:, 1:3]), [_t(r, 3, 4)]),
    "concat": lambda r: ((lambda a, b: ad.concat([a, b], axis=1)), [_t(r, 2, 3), _t(r, 2, 2)]),
    "reshape": lambda r: ((lambda a: ad.reshape(a, (4, 3))), [_t(r, 3, 4)]),
    "transpose": lambda r: ((lambda a: ad.transpose(a, (1, 0, 2))), [_t(r, 2, 3, 4)]),
    "conv1d_same_s2": lambda r: ((lambda x, w, b: ad.conv1d(x, w, b, stride=2)), [_t(r, 2, 3, 9), _t(r, 4, 3, 3), _t(r, 4)]),
    "conv1d_valid": lambda r: ((lambda x, w: ad.conv1d(x, w, padding="valid")), [_t(r, 2, 2, 8), _t(r, 3, 2, 3)]),
    "conv2d_same_s2": lambda r: ((lambda x, w, b: ad.conv2d(x, w, b, stride=2)), [_t(r, 2, 2, 5, 7), _t(r, 3, 2, 3, 3), _t(r, 3)]),
    "conv2d_s1": lambda r: ((lambda x, w: ad.conv2d(x, w)), [_t(r, 1, 2, 4, 5), _t(r, 2, 2, 3, 3)]),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, seed):
    fn, args = PRIMITIVES[name](np.random.default_rng(seed))
    err = grad_check(_proj_loss(lambda: fn(*args), seed), args)
    assert err <= 1e-4, f"{name}: rel. error {err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_mse_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    pred, target = _t(rng, 5, 1), _t(rng, 5, 1)
    assert grad_check(lambda: ad.mse_loss(pred, target), [pred, target]) <= 1e-4


def test_numerical_grad_restores_values():
    arr = np.array([1.0, 2.0])
    before = arr.copy()
    ad.numerical_grad(lambda: float((arr**2).sum()), arr)
    assert np.array_equal(arr, before)
