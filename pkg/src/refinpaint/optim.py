"""Adam with bias correction.

The paper's recipe fixes only the learning rate (2e-4); beta1/beta2/eps keep
their conventional defaults.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update on a single parameter array.

    ``state`` carries ``m``, ``v`` (zero-initialized on first use) and the
    shared step counter ``t`` which the caller increments once per step.
    """
    if not np.isfinite(grad).all():
        raise NonFiniteError("non-finite gradient; aborting optimizer step")
    if "m" not in state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
    t = state["t"]
    m, v = state["m"], state["v"]
    m += (1.0 - beta1) * (grad - m)
    v += (1.0 - beta2) * (grad * grad - v)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class Adam:
    """Optimizer over a named parameter dict; iteration order is sorted by name."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {name: {} for name in params}

    def step(self):
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            st = self.state[name]
            st["t"] = self.t
            adam_step(p.data, p.grad, st, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # checkpoint plumbing: expose moments as flat named arrays
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            if "m" in st:
                out[f"{name}.m"] = st["m"]
                out[f"{name}.v"] = st["v"]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        self.t = t
        for name in self.params:
            m = arrays.get(f"{name}.m")
            if m is not None:
                self.state[name] = {"m": m.copy(), "v": arrays[f"{name}.v"].copy()}
