"""Training loop for baseline and GG-CAM classifiers.

Baseline mode minimizes cross-entropy only and never touches heat maps.
GG-CAM mode minimizes the uncertainty-weighted sum of the selective MSE and
cross-entropy, updating alpha and both sigma scales alongside the network.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import numerics as nx
from .cam_head import CamOutput
from .dataset import DataError, Dataset
from .evaluation import auc_multiclass
from .losses import combined_loss, cross_entropy, selective_mse
from .network import Classifier, NetworkConfig, build_classifier, clone_classifier
from .numerics import NumericalError, Tensor

logger = logging.getLogger(__name__)

MODES = ("baseline", "ggcam")
OPTIMIZERS = ("adam", "adamax", "sgd", "sgd_momentum")
LR_FACTOR = 0.1
IMPROVEMENT_EPS = 1e-8
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_auc", "sigma_sm", "sigma_ce", "alpha", "lr")


class TrainingError(RuntimeError):
    """Loss or gradient became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    patience: int = 10
    max_epochs: int = 40
    batch_size: int = 16
    sigma_sm_init: float = 0.02
    blur: float | None = None  # gaze blur sigma in source pixels; None -> width-scaled default
    seed: int = 0
    n_features: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("patience and batch_size must be >= 1, max_epochs >= 0")
        if not self.sigma_sm_init > 0:
            raise ValueError("sigma_sm_init must be positive")
        if self.blur is not None and not self.blur > 0:
            raise ValueError("blur must be positive")

    @property
    def lr_factor(self) -> float:
        return LR_FACTOR

    @classmethod
    def from_strings(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from text values (config files, CLI flags). Unknown keys raise ``KeyError``."""
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        parsed: dict[str, Any] = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kind = types[key]
            if key == "blur":
                parsed[key] = None if raw.strip().lower() in ("", "none", "auto") else float(raw)
            elif "int" in str(kind):
                parsed[key] = int(raw)
            elif "float" in str(kind):
                parsed[key] = float(raw)
            else:
                parsed[key] = raw.strip()
        return replace(base, **parsed)

    def as_strings(self) -> dict[str, str]:
        return {k: ("auto" if v is None else repr(v) if isinstance(v, float) else str(v)) for k, v in asdict(self).items()}


# Optimized settings per network family; Adam throughout.
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "effnet": {
        "ggcam": dict(learning_rate=6.0e-3, patience=40, sigma_sm_init=1.4e-11, blur=600.0, max_epochs=300),
        "baseline": dict(learning_rate=1.0e-3, patience=25, max_epochs=150),
    },
    "resnet": {
        "ggcam": dict(learning_rate=7.0e-3, patience=30, sigma_sm_init=2.0e-9, blur=500.0, max_epochs=300),
        "baseline": dict(learning_rate=1.0e-4, patience=50, max_epochs=150),
    },
    # desk-scale settings for the 64x64 synthetic corpus
    "toy": {
        "ggcam": dict(learning_rate=3.0e-3, patience=8, sigma_sm_init=0.02, blur=None, max_epochs=15),
        "baseline": dict(learning_rate=3.0e-3, patience=8, max_epochs=15),
    },
}


def preset(name: str, mode: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    return TrainConfig(**{"mode": mode, "optimizer": "adam", **PRESETS[name][mode], **overrides})


# ---------------------------------------------------------------- optimizers


class Optimizer:
    def __init__(self, params: list[Tensor]):
        self.params = params
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            p.data = p.data - lr * self._direction(i, g)

    def _direction(self, i: int, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_arrays(self) -> list[np.ndarray]:
        return []


class SGD(Optimizer):
    def __init__(self, params, momentum: float = 0.0):
        super().__init__(params)
        self.momentum = momentum
        self.buf = [np.zeros(p.shape) for p in params]

    def _direction(self, i, g):
        if not self.momentum:
            return g
        self.buf[i] = g if self.t == 1 else self.momentum * self.buf[i] + g
        return self.buf[i]

    def state_arrays(self):
        return self.buf


class Adam(Optimizer):
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def _direction(self, i, g):
        self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
        self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
        m_hat = self.m[i] / (1 - self.b1**self.t)
        v_hat = self.v[i] / (1 - self.b2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        return self.m + self.v


class Adamax(Optimizer):
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in params]
        self.u = [np.zeros(p.shape) for p in params]

    def _direction(self, i, g):
        self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
        self.u[i] = np.maximum(self.b2 * self.u[i], np.abs(g) + self.eps)
        return self.m[i] / ((1 - self.b1**self.t) * self.u[i])

    def state_arrays(self):
        return self.m + self.u


def make_optimizer(name: str, params: list[Tensor]) -> Optimizer:
    if name == "adam":
        return Adam(params)
    if name == "adamax":
        return Adamax(params)
    if name == "sgd":
        return SGD(params)
    if name == "sgd_momentum":
        return SGD(params, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------- plateau schedule


@dataclass
class PlateauState:
    lr: float
    patience: int
    best: float = math.inf
    counter: int = 0
    reductions: int = 0


def plateau_step(state: PlateauState, val_loss: float) -> PlateauState:
    """Multiply lr by 0.1 once ``patience`` consecutive epochs fail to improve on the best loss."""
    if val_loss < state.best - IMPROVEMENT_EPS:
        return replace(state, best=val_loss, counter=0)
    counter = state.counter + 1
    if counter >= state.patience:
        return replace(state, lr=state.lr * LR_FACTOR, counter=0, reductions=state.reductions + 1)
    return replace(state, counter=counter)


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    config: TrainConfig
    classifier: Classifier
    optimizer: Optimizer
    schedule: PlateauState
    epoch: int = 0
    log: list[dict[str, float]] = field(default_factory=list)
    best_params: list[np.ndarray] | None = None
    best_epoch: int | None = None

    @property
    def lr(self) -> float:
        return self.schedule.lr


def init_state(config: TrainConfig, n_classes: int = 3, input_size: int = 64) -> TrainState:
    head_kind = "cam" if config.mode == "ggcam" else "standard"
    net = NetworkConfig(input_size=input_size, n_features=config.n_features, n_classes=n_classes, head_kind=head_kind)
    classifier = build_classifier(net, config.seed, sigma_sm=config.sigma_sm_init, sigma_ce=1.0)
    optimizer = make_optimizer(config.optimizer, classifier.parameters())
    return TrainState(config, classifier, optimizer, PlateauState(config.learning_rate, config.patience))


def _check_dataset(dataset: Dataset, mode: str, classifier: Classifier) -> None:
    if mode != "ggcam":
        return
    if dataset.heatmaps is None:
        raise DataError("GG-CAM training needs a heat map for every sample")
    size = classifier.config.feature_size
    if dataset.heatmaps.shape[1:] != (size, size):
        raise DataError(f"heat maps are {dataset.heatmaps.shape[1:]}, CAM grid is {(size, size)}")


def batch_loss(classifier: Classifier, mode: str, images: np.ndarray, labels: np.ndarray,
               heatmaps: np.ndarray | None) -> tuple[Tensor, dict[str, float], np.ndarray]:
    """Objective for one batch, its component values and the class probabilities."""
    out = classifier.forward(Tensor(images[:, None]))
    if mode == "ggcam":
        assert isinstance(out, CamOutput)
        l_ce = cross_entropy(out.logits, labels)
        l_sm = selective_mse(out.scaled_cam, heatmaps, labels)
        loss = combined_loss(l_sm, l_ce, classifier.weights)
        parts = {"ce": l_ce.item(), "sm": l_sm.item()}
        logits = out.logits.data
    else:
        logits_t = out.logits if isinstance(out, CamOutput) else out
        loss = cross_entropy(logits_t, labels)
        parts = {"ce": loss.item()}
        logits = logits_t.data
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return loss, parts, probs


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffled sample order, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(state: TrainState, dataset: Dataset) -> dict[str, float]:
    """One shuffled pass with an optimizer step per minibatch. Returns the mean training loss."""
    cfg = state.config
    _check_dataset(dataset, cfg.mode, state.classifier)
    params = state.classifier.parameters()
    order = epoch_order(cfg.seed, state.epoch, len(dataset))
    total, count = 0.0, 0
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        heat = dataset.heatmaps[idx] if cfg.mode == "ggcam" else None
        try:
            loss, parts, _ = batch_loss(state.classifier, cfg.mode, dataset.images[idx], dataset.labels[idx], heat)
            grads = nx.backward(loss, params)
        except NumericalError as exc:
            raise TrainingError(f"epoch {state.epoch} batch {b}: {exc}") from None
        for (name, _), g in zip(state.classifier.named_parameters(), grads):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"epoch {state.epoch} batch {b}: non-finite gradient for {name} (losses {parts})")
        state.optimizer.step(grads, state.lr)
        total += loss.item() * len(idx)
        count += len(idx)
    state.epoch += 1
    return {"train_loss": total / count}


def evaluate(classifier: Classifier, dataset: Dataset, mode: str, batch_size: int = 64) -> dict[str, Any]:
    """Objective over a whole split plus probabilities and AUC."""
    _check_dataset(dataset, mode, classifier)
    probs = []
    ce_sum = sm_sum = 0.0
    with nx.no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            heat = dataset.heatmaps[sl] if mode == "ggcam" else None
            _, parts, p = batch_loss(classifier, mode, dataset.images[sl], dataset.labels[sl], heat)
            n = len(p)
            ce_sum += parts["ce"] * n
            sm_sum += parts.get("sm", 0.0) * n
            probs.append(p)
        ce, sm = ce_sum / len(dataset), sm_sum / len(dataset)
        if mode == "ggcam":
            loss = combined_loss(Tensor(sm), Tensor(ce), classifier.weights).item()
        else:
            loss = ce
    probs = np.concatenate(probs)
    return {"loss": loss, "ce": ce, "sm": sm, "probs": probs, "auc": auc_multiclass(probs, dataset.labels)}


def _log_row(state: TrainState, train_loss: float, val: dict[str, Any], lr: float) -> dict[str, float]:
    clf = state.classifier
    row = {"epoch": state.epoch, "train_loss": train_loss, "val_loss": val["loss"], "val_auc": val["auc"],
           "sigma_sm": math.nan, "sigma_ce": math.nan, "alpha": math.nan, "lr": lr}
    if clf.weights is not None:
        row["sigma_sm"] = clf.weights.sigma_sm
        row["sigma_ce"] = clf.weights.sigma_ce
        row["alpha"] = clf.head.alpha
    return row


@dataclass
class FitResult:
    state: TrainState
    best: Classifier
    log: list[dict[str, float]]


def snapshot(classifier: Classifier) -> list[np.ndarray]:
    return [p.data.copy() for p in classifier.parameters()]


def restore(classifier: Classifier, arrays: list[np.ndarray]) -> Classifier:
    clone = clone_classifier(classifier)
    for p, a in zip(clone.parameters(), arrays):
        p.data = a.copy()
    return clone


def fit(config: TrainConfig, train_set: Dataset, val_set: Dataset, n_classes: int = 3) -> FitResult:
    """Train for ``max_epochs`` with plateau LR reduction; keep the parameters of the best validation epoch."""
    if set(train_set.ids) & set(val_set.ids):
        raise DataError("training and validation sets overlap")
    state = init_state(config, n_classes=n_classes, input_size=train_set.images.shape[-1])
    _check_dataset(train_set, config.mode, state.classifier)
    _check_dataset(val_set, config.mode, state.classifier)
    state.best_params = snapshot(state.classifier)
    for _ in range(config.max_epochs):
        lr = state.lr
        metrics = train_epoch(state, train_set)
        val = evaluate(state.classifier, val_set, config.mode)
        if not math.isfinite(val["loss"]):
            raise TrainingError(f"epoch {state.epoch}: non-finite validation loss")
        if val["loss"] < state.schedule.best - IMPROVEMENT_EPS:
            state.best_params = snapshot(state.classifier)
            state.best_epoch = state.epoch
        state.schedule = plateau_step(state.schedule, val["loss"])
        row = _log_row(state, metrics["train_loss"], val, lr)
        state.log.append(row)
        logger.info("epoch %d train %.4f val %.4f auc %.3f lr %.2g", row["epoch"], row["train_loss"],
                    row["val_loss"], row["val_auc"], lr)
    best = restore(state.classifier, state.best_params)
    return FitResult(state, best, state.log)


def write_log(path: str | Path, log: list[dict[str, float]]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow([row["epoch"]] + ["" if math.isnan(row[c]) else repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def read_log(path: str | Path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ValueError(f"{path}: not a training log")
        return [{k: (math.nan if v == "" else float(v)) for k, v in row.items()} for row in reader]
