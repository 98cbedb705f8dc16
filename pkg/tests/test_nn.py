import numpy as np
import pytest

from diffnam import numerics as nx
from diffnam.errors import ContractError
from diffnam.models import OptimizerKind
from diffnam.nn import (Adam, Conv1d, LayerNorm, Linear, Module, MomentumSGD, make_optimizer,
                        sinusoidal_encoding, timestep_embedding)
from diffnam.numerics import Tape


class Pair(Module):
    def __init__(self, rng):
        super().__init__()
        self.add_param("w", np.zeros(3))
        self.inner = self.add_child("inner", Linear(3, 2, rng))


def _grads(module, target):
    with Tape() as tape:
        loss = nx.mse(module.p("w"), target)
    return nx.backward(tape, loss)


def test_named_parameters_are_qualified(rng):
    names = [name for name, _ in Pair(rng).named_parameters()]
    assert names == ["w", "inner.weight", "inner.bias"]


def test_state_dict_round_trip(rng):
    a, b = Pair(rng), Pair(np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(x.data, y.data)


def test_load_state_dict_rejects_missing_keys(rng):
    module = Pair(rng)
    state = module.state_dict()
    state.pop("inner.bias")
    with pytest.raises(ContractError, match="inner.bias"):
        module.load_state_dict(state)


def test_assign_rejects_wrong_shape(rng):
    with pytest.raises(ContractError):
        Pair(rng).assign("inner.weight", np.zeros((2, 3)))


def test_layers_preserve_length(rng):
    x = nx.Tensor(rng.normal(size=(11, 4)))
    assert Linear(4, 6, rng)(x).shape == (11, 6)
    assert Conv1d(4, 5, 3, rng)(x).shape == (11, 5)
    assert LayerNorm(4)(x).shape == (11, 4)


def test_sinusoidal_encoding_first_row():
    table = sinusoidal_encoding(5, 8)
    assert table.shape == (5, 8)
    assert np.array_equal(table[0, 0::2], np.zeros(4))
    assert np.array_equal(table[0, 1::2], np.ones(4))


def test_timestep_embeddings_differ():
    assert not np.allclose(timestep_embedding(1, 16), timestep_embedding(2, 16))


def test_momentum_first_step_is_plain_gradient_step(rng):
    module = Pair(rng)
    target = np.array([1.0, -2.0, 3.0])
    grads = _grads(module, target)
    expected = module.p("w").data - 0.1 * grads[module.p("w")]
    MomentumSGD(module, lr=0.1, momentum=0.9).step(grads)
    assert np.allclose(module.p("w").data, expected)


def test_clipping_scales_update_and_reports_raw_norm(rng):
    module = Pair(rng)
    target = np.array([30.0, 0.0, 40.0])
    grads = _grads(module, target)
    raw = np.linalg.norm(grads[module.p("w")])
    norm = MomentumSGD(module, lr=1.0, clip=1.0).step(grads)
    assert norm == pytest.approx(raw)
    assert np.linalg.norm(module.p("w").data) == pytest.approx(1.0)


def test_adam_fits_a_target(rng):
    module = Pair(rng)
    target = np.array([0.5, -1.5, 2.0])
    optimizer = Adam(module, lr=0.05)
    for _ in range(400):
        optimizer.step(_grads(module, target))
    assert np.allclose(module.p("w").data, target, atol=5e-2)


def test_make_optimizer_selects_kind(rng):
    module = Pair(rng)
    assert isinstance(make_optimizer(OptimizerKind.MOMENTUM, module, 0.1), MomentumSGD)
    assert isinstance(make_optimizer("adam", module, 0.1), Adam)
