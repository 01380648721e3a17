"""CAM layer: a classification head that materializes the class activation map.

Given features A (G×H×W, optionally batched), the head computes
``cam[c] = sum_k weight[c, k] * A[k]``, takes logits as the spatial mean of each
class map plus a bias, and exposes ``sigmoid(alpha * cam)`` for attention
supervision. The logits are identical to global-average-pool followed by a
linear layer with the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

__all__ = ["CamHead", "CamOutput", "StandardHead", "compute_cam", "forward"]


class CamHead:
    """Trainable CAM-layer parameters: weight (C×G), bias (C) and the raw scale of alpha.

    ``alpha = softplus(alpha_raw)`` so it stays positive for any raw value.
    """

    kind = "cam"

    def __init__(self, weight: Tensor, bias: Tensor, alpha_raw: Tensor):
        if weight.data.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"inconsistent head shapes: weight {weight.shape}, bias {bias.shape}")
        if alpha_raw.size != 1:
            raise ValueError("alpha_raw must be a single scalar")
        self.weight = weight
        self.bias = bias
        self.alpha_raw = alpha_raw

    @classmethod
    def init(cls, n_classes: int, n_features: int, rng: np.random.Generator, alpha: float = 1.0) -> "CamHead":
        bound = np.sqrt(1.0 / n_features)
        return cls(
            Tensor(rng.uniform(-bound, bound, (n_classes, n_features)), requires_grad=True, name="head.weight"),
            Tensor(np.zeros(n_classes), requires_grad=True, name="head.bias"),
            Tensor(np.array([nx.softplus_inverse(alpha)]), requires_grad=True, name="head.alpha_raw"),
        )

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def n_features(self) -> int:
        return self.weight.shape[1]

    @property
    def alpha(self) -> float:
        return float(np.logaddexp(0.0, self.alpha_raw.data[0]))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.alpha_raw]

    def __call__(self, features: Tensor) -> "CamOutput":
        return forward(features, self)


class StandardHead:
    """Global average pooling followed by a linear layer."""

    kind = "standard"

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.data.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"inconsistent head shapes: weight {weight.shape}, bias {bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, n_classes: int, n_features: int, rng: np.random.Generator) -> "StandardHead":
        bound = np.sqrt(1.0 / n_features)
        return cls(
            Tensor(rng.uniform(-bound, bound, (n_classes, n_features)), requires_grad=True, name="head.weight"),
            Tensor(np.zeros(n_classes), requires_grad=True, name="head.bias"),
        )

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def n_features(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, features: Tensor) -> Tensor:
        return nx.linear(nx.global_avg_pool(features), self.weight, self.bias)


@dataclass
class CamOutput:
    logits: Tensor
    cam: Tensor
    scaled_cam: Tensor


def compute_cam(features: Tensor, head: CamHead) -> Tensor:
    """Class activation map, (N×)C×H×W."""
    if features.data.ndim not in (3, 4):
        raise ValueError(f"features must be G×H×W or N×G×H×W, got {features.shape}")
    if features.shape[-3] != head.n_features:
        raise ValueError(f"feature channels {features.shape[-3]} != head input size {head.n_features}")
    return nx.channel_mix(features, head.weight)


def forward(features: Tensor, head: CamHead) -> CamOutput:
    cam = compute_cam(features, head)
    logits = nx.add_bias(nx.global_avg_pool(cam), head.bias)
    alpha = nx.softplus(head.alpha_raw)
    scaled = nx.sigmoid(nx.scale(cam, alpha))
    return CamOutput(logits, cam, scaled)
