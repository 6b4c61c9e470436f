from typing import Optional

import numpy as np

from src.slimdet.nets.layers import Parameter


class SGD:
    """SGD with momentum. Masked entries get zero gradient, so zero weights stay exactly zero."""

    def __init__(self, params: dict[str, Parameter], momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, masks: Optional[dict[str, np.ndarray]] = None) -> None:
        masks = masks or {}
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay and k.endswith(".weight"):
                g = g + self.weight_decay * p.data
            mask = masks.get(k)
            if mask is not None:
                g = g * mask.reshape(p.data.shape)
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)
