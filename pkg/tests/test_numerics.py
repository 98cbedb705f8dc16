import numpy as np
import pytest

from diffnam import numerics as nx
from diffnam.errors import ContractError, DimensionError, NonFiniteError
from diffnam.numerics import Tape, Tensor, backward, grad_check


def _project(fn, shape, seed=1):
    """Scalarise fn(x) with a fixed random weighting so every output entry matters."""
    weights = np.random.default_rng(seed).normal(size=shape)
    return lambda x: nx.sum(nx.mul(fn(x), weights))


def test_matmul_identity(rng):
    m = rng.normal(size=(2, 3))
    assert np.array_equal(nx.matmul(np.eye(2), m).data, m)


def test_softmax_rows_sum_to_one(rng):
    probs = nx.softmax(rng.normal(scale=10.0, size=(7, 5))).data
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_conv1d_delta_kernel_is_identity(rng):
    x = rng.normal(size=(9, 3))
    kernel = np.eye(3)[None]
    assert np.allclose(nx.conv1d(x, kernel).data, x, atol=0, rtol=0)


def test_square_gradient():
    with Tape() as tape:
        x = Tensor(3.0, requires_grad=True)
        y = x * x
    assert backward(tape, y)[x] == pytest.approx(6.0)


def test_abs_gradient_is_sign():
    with Tape() as tape:
        x = Tensor([-1.0, 2.0], requires_grad=True)
        y = nx.sum(nx.abs(x))
    assert np.array_equal(backward(tape, y)[x], [-1.0, 1.0])


def test_constant_function_has_zero_gradient():
    with Tape() as tape:
        x = Tensor(np.ones(4), requires_grad=True)
        y = nx.sum(Tensor(np.arange(4.0)))
    grad = backward(tape, y)[x]
    assert np.array_equal(grad, np.zeros(4))


def test_non_scalar_loss_rejected():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(tape, y)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert info.value.shape_a == (2, 3) and info.value.shape_b == (2, 3)


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        nx.mul(Tensor(1e300), Tensor(1e300))


def test_constants_are_not_recorded():
    with Tape() as tape:
        nx.add(np.ones(2), np.ones(2))
    assert len(tape) == 0


def test_quadratic_form_grad_check(rng):
    a = rng.normal(size=(4, 4))
    form = lambda x: nx.matmul(nx.matmul(x, a), nx.transpose(x))
    assert grad_check(form, rng.normal(size=(1, 4))) < 1e-6


OPS = {
    "add": (lambda x: nx.add(x, np.full((3, 4), 0.5)), (3, 4)),
    "sub": (lambda x: nx.sub(np.ones((3, 4)), x), (3, 4)),
    "mul": (lambda x: nx.mul(x, x), (3, 4)),
    "matmul": (lambda x: nx.matmul(x, nx.transpose(x)), (3, 4)),
    "add_bias": (lambda x: nx.add_bias(np.ones((2, 4)), x), (4,)),
    "conv1d": (lambda x: nx.conv1d(x, np.linspace(-1.0, 1.0, 3 * 4 * 2).reshape(3, 4, 2)), (6, 4)),
    "softmax": (nx.softmax, (3, 4)),
    "log_softmax": (nx.log_softmax, (3, 4)),
    "layer_norm": (lambda x: nx.layer_norm(x, np.array([1.0, 0.5, 2.0, 1.5]), np.zeros(4)), (3, 4)),
    "transpose": (nx.transpose, (3, 4)),
    "concat_slice": (lambda x: nx.concat_cols([nx.slice_cols(x, 2, 4), nx.slice_cols(x, 0, 2)]), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shape = OPS[name]
    point = np.random.default_rng(5).normal(size=shape)
    out_shape = fn(Tensor(point)).shape
    assert grad_check(_project(fn, out_shape), point) < 1e-4


def test_reductions_and_losses_grad_check(rng):
    target = rng.normal(size=(3, 4))
    assert grad_check(lambda x: nx.mean(nx.mul(x, x)), rng.normal(size=(3, 4))) < 1e-4
    assert grad_check(lambda x: nx.mse(x, target), rng.normal(size=(3, 4))) < 1e-4
    assert grad_check(lambda x: nx.cross_entropy(x, [0, 3, 1]), rng.normal(size=(3, 4))) < 1e-4
    assert grad_check(lambda x: nx.sum(nx.repeat_rows(x, 3) * target), rng.normal(size=4)) < 1e-4


def test_kinked_ops_grad_check_away_from_zero(rng):
    point = rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    assert grad_check(_project(nx.relu, (3, 4)), point) < 1e-4
    assert grad_check(_project(nx.abs, (3, 4)), point) < 1e-4


def test_backward_is_deterministic(rng):
    point = rng.normal(size=(5, 4))

    def run():
        with Tape() as tape:
            x = Tensor(point, requires_grad=True)
            y = nx.sum(nx.mul(nx.softmax(nx.matmul(x, nx.transpose(x))), 3.0))
        return backward(tape, y)[x]

    assert np.array_equal(run(), run())
