import numpy as np
import pytest

from sg3d import autodiff as ad
from sg3d.autodiff import Tape, Tensor
from sg3d.errors import ContractError, DimensionError, NumericError

from gradcheck import check_params

RTOL = 1e-4


def param(rng, *shape, scale=1.0, offset=0.0):
    return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True)


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_hand_case():
    # [[1,2]] @ [[3],[4]] = [[11]]
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_shape_mismatch():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        ad.matmul(a, b)


def test_matmul_backward_rule():
    rng = np.random.default_rng(0)
    a = param(rng, 3, 4)
    b = param(rng, 4, 2)
    with Tape() as tape:
        out = ad.matmul(a, b)
        loss = ad.tsum(out)
        tape.backward(loss)
    g = np.ones((3, 2))
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


def test_softmax_uniform():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_closed_form():
    out = ad.softmax(Tensor([np.log(1.0), np.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_no_overflow():
    out = ad.softmax(Tensor([1000.0, 0.0]))
    assert out.data[0] > 1.0 - 1e-12
    assert out.data[1] < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = Tensor(rng.standard_normal((4, 7)) * 10)
        y = ad.softmax(x, axis=-1).data
        assert np.all(y > 0) and np.all(y < 1)
        assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)


def test_backward_sum_ones():
    rng = np.random.default_rng(2)
    x = param(rng, 3, 5)
    with Tape() as tape:
        tape.backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 5)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(x, x))
        tape.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_composite_softmax_matmul_fd():
    rng = np.random.default_rng(3)
    w = param(rng, 4, 3)
    x = Tensor(rng.standard_normal((2, 4)))

    def loss():
        return ad.tsum(ad.softmax(ad.matmul(x, w), axis=-1))

    check_params(loss, {"w": w}, rng, rtol=1e-5)


def test_nonfinite_input_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    x = Tensor([1.0, -1.0], requires_grad=True)
    with pytest.raises(NumericError):
        ad.log(x)  # log of a negative → nan


def test_forward_deterministic():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((5, 5)))
    a = ad.softmax(ad.matmul(x, x), axis=1).data
    b = ad.softmax(ad.matmul(x, x), axis=1).data
    assert np.array_equal(a, b)


def _unary_cases(rng):
    return {
        "relu": (ad.relu, param(rng, 3, 4, offset=0.0)),  # kinks avoided below
        "sigmoid": (ad.sigmoid, param(rng, 3, 4)),
        "exp": (ad.exp, param(rng, 3, 4, scale=0.5)),
        "log": (ad.log, param(rng, 3, 4, scale=0.2, offset=2.0)),
        "sqrt": (ad.sqrt, param(rng, 3, 4, scale=0.2, offset=2.0)),
        "abs": (ad.absolute, param(rng, 3, 4, offset=0.0)),
        "softplus": (ad.softplus, param(rng, 3, 4)),
    }


@pytest.mark.parametrize("trial", range(20))
def test_unary_op_gradients(trial):
    rng = np.random.default_rng(100 + trial)
    for name, (op, p) in _unary_cases(rng).items():
        if name in ("relu", "abs"):
            # keep inputs off the kink so central differences are valid
            p.data = np.where(np.abs(p.data) < 0.05, p.data + 0.2, p.data)

        def loss(op=op, p=p):
            return ad.tsum(ad.mul(op(p), op(p)))

        check_params(loss, {name: p}, rng, rtol=RTOL)


@pytest.mark.parametrize("trial", range(20))
def test_binary_and_matmul_gradients(trial):
    rng = np.random.default_rng(200 + trial)
    a = param(rng, 3, 4)
    b = param(rng, 3, 4, offset=3.0)  # keep divisor away from zero
    w = param(rng, 4, 2)

    def loss():
        s = ad.add(a, b)
        d = ad.div(a, b)
        m = ad.mul(s, d)
        out = ad.matmul(ad.sub(m, b), w)
        return ad.tsum(out)

    check_params(loss, {"a": a, "b": b, "w": w}, rng, rtol=RTOL)


@pytest.mark.parametrize("trial", range(20))
def test_reduction_and_shape_gradients(trial):
    rng = np.random.default_rng(300 + trial)
    x = param(rng, 4, 6)
    idx = rng.integers(0, 4, size=7)
    cols = rng.integers(0, 6, size=4)

    def loss():
        parts = [
            ad.tsum(ad.tmean(x, axis=1)),
            ad.tsum(ad.amax(x, axis=0)),
            ad.tsum(ad.gather_rows(x, idx)),
            ad.tsum(ad.take_per_row(x, cols)),
            ad.tsum(ad.narrow(x, 1, 2, 3)),
            ad.tsum(ad.concat([x, x], axis=1)),
            ad.tsum(ad.transpose(x)),
            ad.tsum(ad.reshape(x, (2, 12))),
        ]
        total = parts[0]
        for p in parts[1:]:
            total = ad.add(total, p)
        return total

    check_params(loss, {"x": x}, rng, rtol=RTOL)


@pytest.mark.parametrize("trial", range(20))
def test_softmax_family_gradients(trial):
    rng = np.random.default_rng(400 + trial)
    x = param(rng, 3, 5)
    w = param(rng, 5, 5)

    def loss():
        h = ad.matmul(x, w)
        a = ad.mul(ad.softmax(h, axis=-1), Tensor(rng_weights))
        b = ad.mul(ad.log_softmax(h, axis=-1), Tensor(rng_weights))
        return ad.add(ad.tsum(a), ad.tsum(b))

    rng_weights = rng.standard_normal((3, 5))
    check_params(loss, {"x": x, "w": w}, rng, rtol=RTOL)


@pytest.mark.parametrize("trial", range(20))
def test_layer_norm_gradients(trial):
    rng = np.random.default_rng(500 + trial)
    x = param(rng, 3, 6)
    gamma = param(rng, 6, scale=0.3, offset=1.0)
    beta = param(rng, 6)

    def loss():
        return ad.tsum(ad.mul(ad.layer_norm(x, gamma, beta), Tensor(weights)))

    weights = rng.standard_normal((3, 6))
    check_params(loss, {"x": x, "gamma": gamma, "beta": beta}, rng, rtol=RTOL)


def test_broadcast_bias_gradient():
    rng = np.random.default_rng(6)
    x = param(rng, 5, 3)
    b = param(rng, 3)

    def loss():
        return ad.tsum(ad.mul(ad.add(x, b), ad.add(x, b)))

    check_params(loss, {"x": x, "b": b}, rng, rtol=RTOL)


def test_gather_rows_duplicate_indices():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        out = ad.gather_rows(x, [0, 0, 2])
        tape.backward(ad.tsum(out))
    assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_tape_reuse_rejected():
    with Tape():
        with pytest.raises(ContractError):
            Tape().__enter__()
    assert ad.active_tape() is None
