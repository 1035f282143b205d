"""Parameterized layer helpers over the functional tensor ops.

Layers own their weight tensors and expose ``params()`` as a flat
name -> Tensor dict so optimizers and checkpoints can address every
parameter by a stable sorted name.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d:
    def __init__(self, rng, in_c, out_c, k, stride=1, padding=0, dilation=1,
                 zero_init=False, dtype=np.float32):
        self.stride, self.padding, self.dilation = stride, padding, dilation
        if zero_init:
            w = np.zeros((out_c, in_c, k, k), dtype=dtype)
        else:
            w = he_normal(rng, (out_c, in_c, k, k), in_c * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_c, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding, dilation=self.dilation)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class ConvTranspose2d:
    def __init__(self, rng, in_c, out_c, k=4, stride=2, padding=1, dtype=np.float32):
        self.stride, self.padding = stride, padding
        w = he_normal(rng, (in_c, out_c, k, k), in_c * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_c, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias,
                                  stride=self.stride, padding=self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def merge_params(*groups: dict) -> dict[str, Tensor]:
    out = {}
    for g in groups:
        for k, v in g.items():
            if k in out:
                raise ValueError(f"duplicate parameter name {k!r}")
            out[k] = v
    return out
