"""Toy CNN backbone and the two classifier variants built on it.

The baseline uses global average pooling plus a linear layer; the GG-CAM
variant swaps in a ``CamHead`` and carries the two loss-balancing scales, so it
has exactly three more trainable scalars than the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cam_head import CamHead, CamOutput, StandardHead
from .losses import UncertaintyWeights
from .numerics import Tensor

__all__ = [
    "Backbone",
    "Classifier",
    "NetworkConfig",
    "Prediction",
    "attach_to_backbone",
    "build_classifier",
    "class_maps",
    "clone_classifier",
    "parameter_census",
    "predict",
]

HEAD_KINDS = ("standard", "cam")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    n_features: int = 32
    n_classes: int = 3
    head_kind: str = "standard"

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.input_size % 8:
            raise ValueError("input_size must be a multiple of 8")

    @property
    def feature_size(self) -> int:
        return self.input_size // 8


def _conv_param(rng: np.random.Generator, cout: int, cin: int, k: int, name: str) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(6.0 / (cin * k * k))
    w = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True, name=f"{name}.weight")
    b = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
    return w, b


class Backbone:
    """Three conv3x3-relu-maxpool blocks: 1->16, 16->32, 32->G channels.

    A 64×64 input yields G×8×8 features.
    """

    def __init__(self, params: Sequence[Tensor], n_features: int):
        if len(params) != 6:
            raise ValueError("backbone expects 3 (weight, bias) pairs")
        self.params = list(params)
        self.n_features = n_features

    @classmethod
    def init(cls, n_features: int, rng: np.random.Generator) -> "Backbone":
        params: list[Tensor] = []
        for name, cout, cin in (("conv1", 16, 1), ("conv2", 32, 16), ("conv3", n_features, 32)):
            params.extend(_conv_param(rng, cout, cin, 3, name))
        return cls(params, n_features)

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def __call__(self, images: Tensor) -> Tensor:
        w1, b1, w2, b2, w3, b3 = self.params
        x = nx.maxpool2(nx.relu(nx.conv2d(images, w1, b1, 1, 1)))
        x = nx.maxpool2(nx.relu(nx.conv2d(x, w2, b2, 1, 1)))
        return nx.maxpool2(nx.relu(nx.conv2d(x, w3, b3, 1, 1)))


@dataclass
class Prediction:
    logits: np.ndarray
    cam: np.ndarray | None = None
    scaled_cam: np.ndarray | None = None


class Classifier:
    """Backbone plus either a standard head or a CAM head.

    The CAM variant also owns the uncertainty weights used by the combined loss.
    """

    def __init__(self, config: NetworkConfig, backbone: Backbone, head, weights: UncertaintyWeights | None = None):
        if head.n_features != backbone.n_features:
            raise ValueError(f"backbone emits {backbone.n_features} channels, head expects {head.n_features}")
        if head.kind != config.head_kind:
            raise ValueError(f"config says {config.head_kind!r} head, got {head.kind!r}")
        self.config = config
        self.backbone = backbone
        self.head = head
        self.weights = weights

    @property
    def head_kind(self) -> str:
        return self.head.kind

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias"]
        out = list(zip(names, self.backbone.parameters()))
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        if self.head_kind == "cam":
            out.append(("head.alpha_raw", self.head.alpha_raw))
        if self.weights is not None:
            out += [("sigma_sm_raw", self.weights.sm_raw), ("sigma_ce_raw", self.weights.ce_raw)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward(self, images: Tensor):
        """Logits for a standard head, a ``CamOutput`` for a CAM head."""
        features = self.backbone(images)
        return self.head(features)

    def logits(self, images: Tensor) -> Tensor:
        out = self.forward(images)
        return out.logits if isinstance(out, CamOutput) else out


def attach_to_backbone(backbone: Backbone, head: CamHead | StandardHead, config: NetworkConfig | None = None,
                       weights: UncertaintyWeights | None = None) -> Classifier:
    """Put ``head`` on top of ``backbone``; channel counts must agree."""
    if head.n_features != backbone.n_features:
        raise ValueError(f"backbone emits {backbone.n_features} channels, head expects {head.n_features}")
    if config is None:
        config = NetworkConfig(n_features=backbone.n_features, n_classes=head.n_classes, head_kind=head.kind)
    return Classifier(config, backbone, head, weights)


def build_classifier(config: NetworkConfig, seed: int, sigma_sm: float = 1.0, sigma_ce: float = 1.0) -> Classifier:
    """Fresh classifier. Backbone and head weights depend only on ``seed``,
    so baseline and CAM variants built with the same seed share them exactly."""
    rng = np.random.default_rng(seed)
    backbone = Backbone.init(config.n_features, rng)
    if config.head_kind == "cam":
        head = CamHead.init(config.n_classes, config.n_features, rng)
        return Classifier(config, backbone, head, UncertaintyWeights.init(sigma_sm, sigma_ce))
    return Classifier(config, backbone, StandardHead.init(config.n_classes, config.n_features, rng))


def clone_classifier(classifier: Classifier) -> Classifier:
    """Deep copy with fresh parameter tensors."""
    params = [Tensor(p.data.copy(), requires_grad=True, name=p.name) for p in classifier.parameters()]
    backbone = Backbone(params[:6], classifier.backbone.n_features)
    if classifier.head_kind == "cam":
        head = CamHead(*params[6:9])
        rest = params[9:]
    else:
        head = StandardHead(*params[6:8])
        rest = params[8:]
    weights = UncertaintyWeights(*rest) if rest else None
    return Classifier(classifier.config, backbone, head, weights)


def _as_batch(images, size: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3 or arr.shape[1:] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got shape {np.shape(images)}")
    return arr[:, None], single


def predict(classifier: Classifier, images) -> Prediction:
    """Inference on one H×W image or an N×H×W batch. Never needs a heat map."""
    batch, single = _as_batch(images, classifier.config.input_size)
    with nx.no_grad():
        out = classifier.forward(Tensor(batch))
    if isinstance(out, CamOutput):
        pred = Prediction(out.logits.data, out.cam.data, out.scaled_cam.data)
    else:
        pred = Prediction(out.data)
    if single:
        pred = Prediction(*(None if v is None else v[0] for v in (pred.logits, pred.cam, pred.scaled_cam)))
    return pred


def class_maps(classifier: Classifier, images, batch_size: int = 64) -> np.ndarray:
    """N×C×H×W maps sum_k W[c,k]·A_k, without bias.

    For a CAM head this is the head's own map; for a standard head it is the
    classic post-hoc CAM built from the linear weights.
    """
    batch, _ = _as_batch(images, classifier.config.input_size)
    out = []
    with nx.no_grad():
        for start in range(0, len(batch), batch_size):
            feats = classifier.backbone(Tensor(batch[start : start + batch_size]))
            out.append(nx.channel_mix(feats, classifier.head.weight).data)
    return np.concatenate(out) if out else np.zeros((0, classifier.config.n_classes, 0, 0))


def parameter_census(classifier: Classifier) -> dict[str, int]:
    """Trainable scalar counts per component plus a ``total``."""
    counts = {
        "backbone": sum(p.size for p in classifier.backbone.parameters()),
        "head": classifier.head.weight.size + classifier.head.bias.size,
        "attention_scale": classifier.head.alpha_raw.size if classifier.head_kind == "cam" else 0,
        "uncertainty": sum(p.size for p in classifier.weights.parameters()) if classifier.weights else 0,
    }
    counts["total"] = sum(counts.values())
    return counts
