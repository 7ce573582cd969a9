"""Parameter store and Adam.

Parameters live in named groups ("trunk/w0", "camera/rot", ...). Adam state
is per parameter (first/second moments plus its own step count) so groups
can be added or excluded mid-run without skewing bias correction.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import DiffValue, leaf


class GradientError(RuntimeError):
    """Non-finite gradient. Carries the offending parameter name."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'")
        self.parameter = name


class _Slot:
    __slots__ = ("m", "v", "t")

    def __init__(self, shape):
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.t = 0


class ParamStore:
    def __init__(self):
        self._params: dict[str, DiffValue] = {}
        self._slots: dict[str, _Slot] = {}

    def add(self, name: str, value) -> DiffValue:
        if name in self._params:
            raise ValueError(f"duplicate parameter '{name}'")
        p = leaf(np.array(value, dtype=np.float64))
        self._params[name] = p
        self._slots[name] = _Slot(p.value.shape)
        return p

    def __getitem__(self, name: str) -> DiffValue:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter '{k}'")
            p = self._params[k]
            if p.value.shape != v.shape:
                raise ValueError(
                    f"shape mismatch for '{k}': have {p.value.shape}, got {v.shape}")
            p.value = np.array(v, dtype=np.float64)

    def slot(self, name: str) -> _Slot:
        return self._slots[name]


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adam_step(store: ParamStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              only_prefixes=None) -> None:
    """One Adam update over every parameter with a populated gradient.

    Parameters without a gradient this step are left alone (their slots do
    not advance). Non-finite gradients abort with the parameter name.
    """
    for name, p in store.items():
        if p.grad is None:
            continue
        if only_prefixes is not None and not any(name.startswith(pr) for pr in only_prefixes):
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise GradientError(name)
        s = store.slot(name)
        s.t += 1
        s.m = beta1 * s.m + (1.0 - beta1) * g
        s.v = beta2 * s.v + (1.0 - beta2) * (g * g)
        mhat = s.m / (1.0 - beta1 ** s.t)
        vhat = s.v / (1.0 - beta2 ** s.t)
        p.value = p.value - lr * mhat / (np.sqrt(vhat) + eps)


def lr_schedule(stage: str, epoch: int, base: float = 4e-4,
                decay: float = 0.3, decay_every: int = 10,
                t_max: int = 10) -> float:
    """Learning rate for a 0-indexed epoch.

    Geometry: step decay, base * decay^(epoch // decay_every).
    Rendering: cosine annealing from base to 0 over t_max epochs.
    """
    if stage == "geometry":
        return base * decay ** (epoch // decay_every)
    if stage == "rendering":
        e = min(epoch, t_max)
        return base * 0.5 * (1.0 + math.cos(math.pi * e / t_max))
    raise ValueError(f"unknown stage '{stage}'")
