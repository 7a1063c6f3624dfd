"""Parameter storage, ADAM updates, and the stepped learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import NumericError


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_epochs: tuple = (40, 55, 70)
    decay_factor: float = 0.7
    total_epochs: int = 100

    def validate(self):
        if not (0.0 < self.decay_factor <= 1.0):
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        return self


class ParameterStore:
    """Named parameter tensors plus their ADAM moment slots and step counter."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if isinstance(value, Tensor):
            t = value
        else:
            arr = np.asarray(value)
            if arr.dtype != np.float32:  # float32 kept for inference-mode stores
                arr = arr.astype(np.float64)
            t = Tensor(arr)
        t.requires_grad = True
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def schema(self) -> dict[str, tuple]:
        return {name: tuple(t.data.shape) for name, t in self._params.items()}

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def ensure_grads(self):
        """Give every parameter a gradient array (zeros if untouched)."""
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def gradients(self) -> dict[str, np.ndarray]:
        self.ensure_grads()
        return {name: t.grad for name, t in self._params.items()}

    def add_gradients(self, grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            self._params[name].accumulate_grad(g)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for name, v in values.items():
            p = self._params[name]
            if p.data.shape != v.shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {v.shape}")
            p.data = np.array(v, dtype=p.data.dtype)


def backward(loss: Tensor, store: ParameterStore):
    """Backprop a scalar loss and fill every store gradient (zeros if unused)."""
    loss.backward()
    store.ensure_grads()
    for name, t in store.items():
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")


def adam_step(store: ParameterStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update; increments the step counter, zeroes grads."""
    if lr <= 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    store.ensure_grads()
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grads()


def lr_at_epoch(cfg: OptimConfig, epoch: int) -> float:
    """Base rate times decay_factor^(number of decay epochs <= epoch)."""
    if not (0 <= epoch < cfg.total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    hits = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.lr * cfg.decay_factor ** hits
