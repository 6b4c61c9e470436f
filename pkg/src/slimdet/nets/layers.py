"""
Layers with explicit forward/backward passes.

Every layer consumes a list of input activations (NCHW) and returns one output; `backward`
takes the gradient of the output and returns one gradient per input, accumulating
parameter gradients into `Parameter.grad` along the way.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.slimdet.errors import ShapeMismatchError
from src.slimdet.nets.manifest import LayerSpec
from src.slimdet.tensor_core import (
    DTYPE,
    CompactedMatrix,
    col2im,
    compact_from_mask,
    compacted_matmul,
    im2col,
    to_gemm,
)

LEAKY_SLOPE = 0.1


@dataclass
class Parameter:
    data: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def to(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)


class Layer:
    def __init__(self, spec: LayerSpec) -> None:
        self.spec = spec
        self.name = spec.name

    def parameters(self) -> dict[str, Parameter]:
        return {}

    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError


# ---------- Convolution ----------

class Conv2d(Layer):
    """Convolution lowered to GEMM: out[b] = W_gemm @ im2col(x)[b] + bias."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator) -> None:
        super().__init__(spec)
        fan_in = spec.C * spec.KH * spec.KW
        scale = np.sqrt(2.0 / fan_in) if spec.activation == "leaky" else 0.1 / np.sqrt(fan_in)
        self.weight = Parameter(rng.normal(0.0, scale, size=spec.weight_shape).astype(DTYPE))
        self.bias = Parameter(np.zeros(spec.F, dtype=DTYPE))
        self.padding = spec.KH // 2
        self.compacted: Optional[CompactedMatrix] = None
        self._cache: Optional[tuple] = None

    def parameters(self) -> dict[str, Parameter]:
        return {"weight": self.weight, "bias": self.bias}

    def compact(self, mask: np.ndarray) -> CompactedMatrix:
        """Freeze the current (masked) weights into a dense block used by every later forward."""
        self.compacted = compact_from_mask(to_gemm(self.weight.data), mask)
        return self.compacted

    def _lower(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        return im2col(x, s.KH, s.KW, s.stride, self.padding)

    def _activate(self, z: np.ndarray) -> np.ndarray:
        if self.spec.activation == "leaky":
            return np.where(z > 0, z, LEAKY_SLOPE * z)
        return z

    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        x = inputs[0]
        if x.ndim != 4 or x.shape[1] != self.spec.C:
            raise ShapeMismatchError(f"{self.name}: expected (B, {self.spec.C}, H, W) input, got {x.shape}")
        if self.compacted is not None:
            return self.forward_compacted(x)
        cols = self._lower(x)
        z = np.matmul(to_gemm(self.weight.data), cols) + self.bias.data[:, None]
        z = z.reshape(x.shape[0], self.spec.F, self.spec.H_out, self.spec.W_out)
        self._cache = (x.shape, cols, z)
        return self._activate(z)

    def forward_compacted(self, x: np.ndarray) -> np.ndarray:
        if self.compacted is None:
            raise ShapeMismatchError(f"{self.name}: layer has not been compacted")
        cols = self._lower(x)
        z = np.stack([compacted_matmul(self.compacted, c) for c in cols]) + self.bias.data[:, None]
        z = z.reshape(x.shape[0], self.spec.F, self.spec.H_out, self.spec.W_out)
        return self._activate(z)

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        x_shape, cols, z = self._cache
        if self.spec.activation == "leaky":
            grad = grad * np.where(z > 0, 1.0, LEAKY_SLOPE).astype(grad.dtype)
        gz = grad.reshape(x_shape[0], self.spec.F, -1)
        self.bias.grad += gz.sum(axis=(0, 2))
        self.weight.grad += np.matmul(gz, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.spec.weight_shape)
        dcols = np.matmul(to_gemm(self.weight.data).T, gz)
        s = self.spec
        return [col2im(dcols, x_shape, s.KH, s.KW, s.stride, self.padding)]


# ---------- Parameter-free layers ----------

class Upsample2x(Layer):
    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        return inputs[0].repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        b, c, h, w = grad.shape
        return [grad.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))]


class Shortcut(Layer):
    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        return inputs[0] + inputs[1]

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        return [grad, grad]


class Route(Layer):
    """Channel concatenation of its inputs."""

    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        self._splits = np.cumsum([x.shape[1] for x in inputs])[:-1]
        return np.concatenate(inputs, axis=1)

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        return np.split(grad, self._splits, axis=1)


class GlobalAvgPool(Layer):
    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        x = inputs[0]
        self._hw = x.shape[2:]
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        h, w = self._hw
        return [np.broadcast_to(grad / (h * w), grad.shape[:2] + (h, w)).copy()]


class Detect(Layer):
    """Exposes the head as (B, N, N, 18): per cell, 3 anchors x (tx, ty, tw, th, obj, cls)."""

    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        return inputs[0].transpose(0, 2, 3, 1)

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        return [np.ascontiguousarray(grad.transpose(0, 3, 1, 2))]


LAYERS = {
    "upsample": Upsample2x,
    "shortcut": Shortcut,
    "route": Route,
    "avgpool": GlobalAvgPool,
    "detect": Detect,
}


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if spec.kind == "conv":
        return Conv2d(spec, rng)
    return LAYERS[spec.kind](spec)
