"""
Manifest-driven networks.

`GraphNet` instantiates one layer per manifest descriptor and evaluates them in order,
wiring inputs by index. Backward walks the same order in reverse and sums gradients
that fan out to several consumers (shortcut and route sources).
"""

import copy
from typing import Optional, Union

import numpy as np

from src.slimdet.errors import DivergenceError, ShapeMismatchError
from src.slimdet.nets.layers import Conv2d, Layer, Parameter, build_layer
from src.slimdet.nets.manifest import HEAD_CHANNELS, LayerManifest, LayerSpec, validate_manifest
from src.slimdet.tensor_core import DTYPE

Output = Union[np.ndarray, list[np.ndarray]]


class GraphNet:
    def __init__(self, manifest: LayerManifest, seed: int = 0) -> None:
        self.manifest = validate_manifest(manifest)
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = [build_layer(spec, rng) for spec in self.manifest.layers]
        consumed = {src for spec in self.manifest.layers for src in spec.inputs}
        self.sinks = [i for i in range(len(self.layers)) if i not in consumed]
        self.dtype = DTYPE
        self._outputs: Optional[list[np.ndarray]] = None

    # ---------- Parameters ----------

    def named_parameters(self) -> dict[str, Parameter]:
        return {f"{layer.name}.{k}": p for layer in self.layers for k, p in layer.parameters().items()}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def to(self, dtype) -> "GraphNet":
        for p in self.named_parameters().values():
            p.to(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) ^ set(state))
            raise ShapeMismatchError(f"state dict keys differ from the network: {missing[:4]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ShapeMismatchError(f"{k}: expected {p.data.shape}, got {state[k].shape}")
            p.data[...] = state[k]

    def conv_layers(self) -> list[Conv2d]:
        return [l for l in self.layers if isinstance(l, Conv2d)]

    def prunable_layers(self) -> list[Conv2d]:
        return [l for l in self.conv_layers() if l.spec.prunable]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.manifest.input_shape

    # ---------- Passes ----------

    def forward(self, x: np.ndarray) -> Output:
        """Outputs of the sink layers: one array, or a list when the graph has several heads."""
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(f"expected (B, {', '.join(map(str, self.input_shape))}) input, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        outs: list[np.ndarray] = []
        for layer in self.layers:
            ins = [x if src == -1 else outs[src] for src in layer.spec.inputs]
            outs.append(layer.forward(ins))
        self._outputs = outs
        heads = [outs[i] for i in self.sinks]
        if not all(np.isfinite(h).all() for h in heads):
            raise DivergenceError("non-finite network output")
        return heads[0] if len(heads) == 1 else heads

    def backward(self, grad: Output) -> np.ndarray:
        """Accumulate parameter gradients for d(loss)/d(output) = grad; returns the input gradient."""
        if self._outputs is None:
            raise ShapeMismatchError("backward called before forward")
        grads = grad if isinstance(grad, list) else [grad]
        if len(grads) != len(self.sinks):
            raise ShapeMismatchError(f"expected {len(self.sinks)} output gradients, got {len(grads)}")
        pending: dict[int, np.ndarray] = {i: g.astype(self.dtype, copy=False) for i, g in zip(self.sinks, grads)}
        dx: Optional[np.ndarray] = None
        for i in range(len(self.layers) - 1, -1, -1):
            g = pending.pop(i, None)
            if g is None:
                continue
            for src, gi in zip(self.layers[i].spec.inputs, self.layers[i].backward(g)):
                if src == -1:
                    dx = gi if dx is None else dx + gi
                elif src in pending:
                    pending[src] = pending[src] + gi
                else:
                    pending[src] = gi
        for name, p in self.named_parameters().items():
            if not np.isfinite(p.grad).all():
                raise DivergenceError(f"non-finite gradient in {name}")
        return dx

    def compacted(self, masks: dict[str, np.ndarray]) -> "GraphNet":
        """Copy of the network whose masked convolutions run on their compacted dense blocks."""
        net = copy.deepcopy(self)
        for name, mask in masks.items():
            layer = net.layer(name)
            layer.weight.data = np.where(mask.reshape(layer.spec.weight_shape), layer.weight.data, 0)
            layer.compact(mask)
        return net


def forward(net: GraphNet, batch: np.ndarray) -> Output:
    return net.forward(batch)


def backward(net: GraphNet, loss_grad: Output) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor for the given output gradient."""
    net.zero_grad()
    net.backward(loss_grad)
    return {k: p.grad.copy() for k, p in net.named_parameters().items()}


# ---------- Desk-scale architectures ----------

def _conv(f: int, c: int, k: int, stride: int, hw: int, prunable: bool = True,
          activation: str = "leaky", name: Optional[str] = None) -> tuple[LayerSpec, int]:
    out = (hw + 2 * (k // 2) - k) // stride + 1
    spec = LayerSpec(name=name, kind="conv", F=f, C=c, KH=k, KW=k, stride=stride,
                     H_out=out, W_out=out, prunable=prunable, activation=activation)
    return spec, out


def classifier_manifest(num_classes: int = 4, image_size: int = 16, width: int = 16,
                        in_channels: int = 1) -> LayerManifest:
    """Three 3x3 convs, global average pooling and a 1x1 linear head; the stem is not pruned."""
    c0, hw = _conv(width, in_channels, 3, 1, image_size, prunable=False)
    c1, hw = _conv(2 * width, width, 3, 2, hw)
    c2, hw = _conv(2 * width, 2 * width, 3, 2, hw)
    pool = LayerSpec(kind="avgpool", F=2 * width, C=2 * width, H_out=1, W_out=1)
    head, _ = _conv(num_classes, 2 * width, 1, 1, 1, prunable=False, activation="linear", name="head")
    return validate_manifest(LayerManifest(layers=[c0, c1, c2, pool, head]))


def detector_manifest(image_size: int = 96, width: int = 8, in_channels: int = 1) -> LayerManifest:
    """Five stride-2 convs (total stride 32), one residual block and an 18-channel head."""
    c0, hw = _conv(width, in_channels, 3, 2, image_size, prunable=False)
    c1, hw = _conv(2 * width, width, 3, 2, hw)
    c2, hw = _conv(2 * width, 2 * width, 3, 1, hw)
    sc = LayerSpec(kind="shortcut", F=2 * width, C=2 * width, H_out=hw, W_out=hw, inputs=[2, 1])
    c4, hw = _conv(4 * width, 2 * width, 3, 2, hw)
    c5, hw = _conv(4 * width, 4 * width, 3, 2, hw)
    c6, hw = _conv(8 * width, 4 * width, 3, 2, hw)
    head, _ = _conv(HEAD_CHANNELS, 8 * width, 1, 1, hw, prunable=False, activation="linear", name="head")
    det = LayerSpec(kind="detect", F=HEAD_CHANNELS, C=HEAD_CHANNELS, H_out=hw, W_out=hw)
    return validate_manifest(LayerManifest(layers=[c0, c1, c2, sc, c4, c5, c6, head, det]))


def tiny_classifier(seed: int = 0, **kwargs) -> GraphNet:
    return GraphNet(classifier_manifest(**kwargs), seed=seed)


def tiny_detector(seed: int = 0, **kwargs) -> GraphNet:
    return GraphNet(detector_manifest(**kwargs), seed=seed)
