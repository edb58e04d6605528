"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Standard Adam; moment state is keyed by parameter name so it can be
    checkpointed and restored exactly."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: list[Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in params:
            if p.name is None:
                raise ValueError("Adam needs named parameters")
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[p.name] = m
            self.v[p.name] = v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    # -- checkpointing ---------------------------------------------------------

    def state_arrays(self, tag: str) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.m.items():
            out[f"optim.{tag}.m.{name}"] = m
            out[f"optim.{tag}.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], tag: str, t: int) -> None:
        self.t = t
        prefix_m = f"optim.{tag}.m."
        for key, arr in tensors.items():
            if key.startswith(prefix_m):
                name = key[len(prefix_m):]
                self.m[name] = arr.copy()
                self.v[name] = tensors[f"optim.{tag}.v.{name}"].copy()


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
