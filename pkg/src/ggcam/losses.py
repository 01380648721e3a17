"""Classification and attention-supervision losses.

Class labels are 0-based indices throughout the library; on-disk manifests use
1-based labels and are converted at load time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import NumericalError, Tensor

__all__ = [
    "UncertaintyWeights",
    "cross_entropy",
    "cross_entropy_cam_form",
    "selective_mse",
    "combined_loss",
]


def _labels(labels, n: int, n_classes: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if arr.shape != (n,):
        raise ValueError(f"expected {n} labels, got {arr.shape}")
    if np.any(arr < 0) or np.any(arr >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    return arr


def cross_entropy(logits: Tensor, labels: int | Sequence[int]) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is C or N×C.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    batched = logits.data.ndim == 2
    if not batched:
        logits = nx.reshape(logits, (1,) + logits.shape)
    n, c = logits.shape
    y = _labels(labels, n, c)
    logp = nx.pick(nx.log_softmax(logits), y)
    return nx.mul_const(nx.mean_all(logp), -1.0)


def cross_entropy_cam_form(cam: np.ndarray, bias: np.ndarray, label: int) -> float:
    """Cross-entropy written directly in terms of the per-class CAM means.

    Used to check the identity with ``cross_entropy``; training never calls it.
    """
    cam = np.asarray(cam, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if cam.ndim != 3 or bias.shape != (cam.shape[0],):
        raise ValueError("expected cam C×H×W and bias of length C")
    if not 0 <= label < cam.shape[0]:
        raise IndexError(f"label {label} out of range")
    z = cam.mean(axis=(1, 2)) + bias
    m = z.max()
    return float(-z[label] + m + np.log(np.exp(z - m).sum()))


def selective_mse(scaled_cam: Tensor, heatmap, labels: int | Sequence[int]) -> Tensor:
    """Mean squared error between the true-class slice of ``scaled_cam`` and the heat map.

    ``scaled_cam`` is C×H×W or N×C×H×W; ``heatmap`` matches its spatial shape
    (with the batch axis when batched). Other class slices receive zero gradient.
    """
    if heatmap is None:
        raise ValueError("selective_mse needs a heat map")
    psi = np.asarray(getattr(heatmap, "grid", heatmap), dtype=np.float64)
    if scaled_cam.data.ndim == 3:
        scaled_cam = nx.reshape(scaled_cam, (1,) + scaled_cam.shape)
        psi = psi[None]
    n, c = scaled_cam.shape[:2]
    if psi.shape != (n,) + scaled_cam.shape[2:]:
        raise ValueError(f"heat map shape {psi.shape} does not match CAM spatial shape {scaled_cam.shape[2:]}")
    y = _labels(labels, n, c)
    diff = nx.sub_const(nx.pick(scaled_cam, y), psi)
    return nx.mean_all(nx.square(diff))


@dataclass
class UncertaintyWeights:
    """Raw parameters of the two loss-balancing scales; sigma = softplus(raw)."""

    sm_raw: Tensor
    ce_raw: Tensor

    @classmethod
    def init(cls, sigma_sm: float, sigma_ce: float = 1.0) -> "UncertaintyWeights":
        return cls(
            Tensor(np.array([nx.softplus_inverse(sigma_sm)]), requires_grad=True, name="sigma_sm_raw"),
            Tensor(np.array([nx.softplus_inverse(sigma_ce)]), requires_grad=True, name="sigma_ce_raw"),
        )

    @property
    def sigma_sm(self) -> float:
        return float(np.logaddexp(0.0, self.sm_raw.data[0]))

    @property
    def sigma_ce(self) -> float:
        return float(np.logaddexp(0.0, self.ce_raw.data[0]))

    def parameters(self) -> list[Tensor]:
        return [self.sm_raw, self.ce_raw]


def _weighted(loss: Tensor, sigma: Tensor, what: str) -> Tensor:
    try:
        with np.errstate(over="ignore"):
            return nx.mul(loss, nx.square(nx.reciprocal(sigma)))
    except NumericalError:
        raise NumericalError(f"{what} term overflowed (sigma={float(sigma.data[0]):.3g})") from None


def combined_loss(l_sm: Tensor, l_ce: Tensor, weights: UncertaintyWeights) -> Tensor:
    """Uncertainty-weighted objective:

        l_sm / (2 sigma_sm^2) + l_ce / sigma_ce^2 + ln(sigma_sm + 1) + ln(sigma_ce + 1)

    Non-negative whenever both losses are.
    """
    l_sm = l_sm if isinstance(l_sm, Tensor) else Tensor(l_sm)
    l_ce = l_ce if isinstance(l_ce, Tensor) else Tensor(l_ce)
    if float(l_sm.data.reshape(-1)[0]) < 0 or float(l_ce.data.reshape(-1)[0]) < 0:
        raise ValueError("combined_loss expects non-negative component losses")
    if l_sm.size != 1 or l_ce.size != 1:
        raise ValueError("loss terms must be scalars")
    l_sm = nx.reshape(l_sm, (1,))
    l_ce = nx.reshape(l_ce, (1,))
    s_sm = nx.softplus(weights.sm_raw)
    s_ce = nx.softplus(weights.ce_raw)
    total = nx.add(
        nx.add(nx.mul_const(_weighted(l_sm, s_sm, "selective MSE"), 0.5), _weighted(l_ce, s_ce, "cross-entropy")),
        nx.add(nx.log(nx.add_const(s_sm, 1.0)), nx.log(nx.add_const(s_ce, 1.0))),
    )
    return total

