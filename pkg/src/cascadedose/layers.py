"""Parameter initialisation and small building blocks shared by the networks.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names, so a
checkpoint is just the map sorted by key.
"""
from __future__ import annotations

import math
import re

import numpy as np

from . import conv as C
from . import ops
from .tensor import Tensor

Params = dict


class Initializer:
    """Seeded factory for parameter tensors of one dtype."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def normal(self, shape, std: float) -> Tensor:
        return Tensor(self.rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True)

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

    def linear(self, p: Params, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        p[f"{name}.w"] = self.normal((fan_in, fan_out), 1.0 / math.sqrt(fan_in))
        if bias:
            p[f"{name}.b"] = self.zeros((fan_out,))

    def conv(self, p: Params, name: str, c_in: int, c_out: int, k: int, gain: float = math.sqrt(2.0)) -> None:
        p[f"{name}.w"] = self.normal((c_out, c_in, k, k, k), gain / math.sqrt(c_in * k ** 3))
        p[f"{name}.b"] = self.zeros((c_out,))

    def deconv(self, p: Params, name: str, c_in: int, c_out: int, k: int = 2) -> None:
        # each output voxel of a stride-k, k-kernel deconvolution sees c_in inputs
        p[f"{name}.w"] = self.normal((c_in, c_out, k, k, k), 1.0 / math.sqrt(c_in))
        p[f"{name}.b"] = self.zeros((c_out,))

    def layer_norm(self, p: Params, name: str, n: int) -> None:
        p[f"{name}.g"] = self.ones((n,))
        p[f"{name}.b"] = self.zeros((n,))


def conv(p: Params, name: str, x: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    w = p[f"{name}.w"]
    k = w.shape[2]
    if padding is None:
        padding = k // 2 if stride == 1 else (k - stride + 1) // 2
    return C.conv3d(x, w, p[f"{name}.b"], stride=stride, padding=padding)


def deconv(p: Params, name: str, x: Tensor, stride: int = 2) -> Tensor:
    return C.conv_transpose3d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride)


_DECONV_WEIGHT = re.compile(r"\.up\d*\.w$")


def fan_in(name: str, shape: tuple) -> int | None:
    """Inputs feeding one output of a weight tensor; None for vectors (biases, norms).

    Linear weights are (in, out); conv weights (out, in, k, k, k); deconvolution
    weights, named ``*.up.w`` / ``*.upN.w``, are (in, out, k, k, k) and each output
    voxel of the stride-k ladder sees only ``in`` values.
    """
    if len(shape) == 2:
        return int(shape[0])
    if len(shape) == 5:
        if _DECONV_WEIGHT.search(name):
            return int(shape[0])
        return int(shape[1] * shape[2] * shape[3] * shape[4])
    return None


def count_parameters(p: Params) -> int:
    return int(sum(t.size for t in p.values()))


def cast_params(p: Params, dtype) -> Params:
    out = {}
    for k, t in p.items():
        out[k] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)
    return out


def mish_conv(p: Params, name: str, x: Tensor, **kw) -> Tensor:
    return ops.mish(conv(p, name, x, **kw))
