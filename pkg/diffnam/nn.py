"""Parameter containers, layers and optimizers built on the numerics ops."""

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .models import OptimizerKind
from .numerics import Gradients, Tensor


class Module:
    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> None:
        self._params[name] = Tensor(value, requires_grad=True)

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def p(self, name: str) -> Tensor:
        return self._params[name]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]))

    def assign(self, qualified: str, value: np.ndarray) -> None:
        head, _, rest = qualified.partition(".")
        if rest:
            if head not in self._children:
                raise ContractError(f"unknown sub-module {head!r}")
            self._children[head].assign(rest, value)
            return
        if head not in self._params:
            raise ContractError(f"unknown parameter {head!r}")
        if np.shape(value) != self._params[head].shape:
            raise ContractError(
                f"parameter {qualified!r}: shape {np.shape(value)} != {self._params[head].shape}"
            )
        self._params[head] = Tensor(value, requires_grad=True)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = {name for name, _ in self.named_parameters()}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            self.assign(name, value)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.add_param("weight", rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim)))
        self.add_param("bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add_bias(nx.matmul(x, self.p("weight")), self.p("bias"))


class Conv1d(Module):
    def __init__(self, in_dim: int, out_dim: int, width: int, rng: np.random.Generator):
        super().__init__()
        scale = 1.0 / np.sqrt(in_dim * width)
        self.add_param("weight", rng.normal(0.0, scale, (width, in_dim, out_dim)))
        self.add_param("bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add_bias(nx.conv1d(x, self.p("weight")), self.p("bias"))


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.p("gamma"), self.p("beta"))


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Transformer position table, (length, dim)."""
    positions = np.arange(length)[:, None]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    rates = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t * rates
    return np.concatenate([np.sin(angles), np.cos(angles)])


# ============================================================================
# OPTIMIZERS
# ============================================================================

class Optimizer:
    def __init__(self, module: Module, lr: float, clip: float = 0.0):
        if lr < 0:
            raise ContractError("learning rate must be non-negative")
        self.module = module
        self.lr = lr
        self.clip = clip
        self.steps = 0

    def step(self, grads: Gradients) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        named = list(self.module.named_parameters())
        flat = [grads[t] for _, t in named]
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in flat])))
        if self.clip > 0 and norm > self.clip:
            flat = [g * (self.clip / norm) for g in flat]
        self.steps += 1
        for (name, tensor), grad in zip(named, flat):
            self.module.assign(name, self._update(name, tensor.data, grad))
        return norm

    def _update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MomentumSGD(Optimizer):
    def __init__(self, module: Module, lr: float, momentum: float = 0.9, clip: float = 0.0):
        super().__init__(module, lr, clip)
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def _update(self, name, value, grad):
        v = self.momentum * self.velocity.get(name, np.zeros_like(grad)) + grad
        self.velocity[name] = v
        return value - self.lr * v


class Adam(Optimizer):
    def __init__(self, module: Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip: float = 0.0):
        super().__init__(module, lr, clip)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def _update(self, name, value, grad):
        m = self.beta1 * self.m.get(name, np.zeros_like(grad)) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(name, np.zeros_like(grad)) + (1 - self.beta2) * grad * grad
        self.m[name], self.v[name] = m, v
        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(
    kind: OptimizerKind, module: Module, lr: float, momentum: float = 0.9, clip: float = 0.0
) -> Optimizer:
    if OptimizerKind(kind) is OptimizerKind.MOMENTUM:
        return MomentumSGD(module, lr, momentum=momentum, clip=clip)
    return Adam(module, lr, clip=clip)
