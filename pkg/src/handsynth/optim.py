"""Named parameter stores with Adam state."""
from __future__ import annotations

import logging

import numpy as np

from .nn import Module

log = logging.getLogger(__name__)

# Adam defaults for every network in the framework
LR = 0.0002
BETAS = (0.5, 0.999)
EPS = 1e-8


class ParameterStore:
    """Parameters addressed by path plus first/second moments and step counts."""

    def __init__(self, params: dict):
        self.params: dict = {}
        self.m: dict = {}
        self.v: dict = {}
        self.steps: dict = {}
        for name, p in params.items():
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = p
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
            self.steps[name] = 0
        self._warned: set = set()

    @classmethod
    def from_modules(cls, **modules: Module) -> "ParameterStore":
        named = {}
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters(prefix + "."):
                named[name] = p
        return cls(named)

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        """Moment arrays keyed ``<name>.m`` / ``<name>.v`` and step counts."""
        arrays = {}
        for name in self.params:
            arrays[name + ".m"] = self.m[name]
            arrays[name + ".v"] = self.v[name]
        return {"arrays": arrays, "steps": dict(self.steps)}

    def load_state(self, arrays: dict, steps: dict) -> None:
        for name, p in self.params.items():
            m, v = arrays[name + ".m"], arrays[name + ".v"]
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"optimizer state for {name} does not match parameter shape {p.shape}")
            self.m[name] = np.array(m, dtype=p.data.dtype)
            self.v[name] = np.array(v, dtype=p.data.dtype)
            self.steps[name] = int(steps[name])


def adam_step(store: ParameterStore, lr: float = LR, beta1: float = BETAS[0], beta2: float = BETAS[1],
              eps: float = EPS) -> None:
    """Bias-corrected Adam update. Gradients are left in place for the caller to clear."""
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            if name not in store._warned:
                log.warning("parameter %s has no gradient; skipped by adam_step", name)
                store._warned.add(name)
            continue
        t = store.steps[name] + 1
        store.steps[name] = t
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)

