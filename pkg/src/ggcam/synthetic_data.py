"""Deterministic three-class chest-X-ray analog with organ masks and gaze traces.

Class 0 (normal) has a regular heart, class 1 (cardiomegaly analog) an enlarged
brighter heart, class 2 (pneumonia analog) a high-variance patch in one lung.
Every random quantity is drawn in the same order whatever the class, so two
samples with the same seed differ only where the class signal lives.

Scenes may also carry an electrode or a film tag outside the organs. The corpus
generator switches these on with class-dependent rates, which gives a plain
classifier a shortcut that expert gaze never looks at.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .dataset import CLASS_NAMES, SPLITS, Dataset, write_manifest
from .gaze_heatmap import GazeTrace, write_gaze_csv

GAZE_RATE_HZ = 60.0
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
HEART_LEVEL = (0.68, 0.72)  # normal, enlarged
HEART_GROWTH = 2.5  # extra ellipse radius in pixels at 64x64
PATCH_SHIFT, PATCH_TEXTURE = 0.12, 0.2
MARKER_LEVEL = 0.9
# chance that a scene of each class carries an ECG-electrode / film-tag artifact;
# mimics acquisition bias (cardiac patients wear electrodes, pneumonia films are portable)
ELECTRODE_RATE = (0.2, 0.6, 0.2)
TAG_RATE = (0.2, 0.2, 0.6)


@dataclass(frozen=True)
class SceneSpec:
    label: int
    seed: int
    size: int = 64
    noise: float = 0.35
    n_gaze: int = 180
    gaze_fraction: float = 0.8  # share of samples scattered around the region of interest
    gaze_std: float = 0.08  # as a fraction of image width
    electrode: bool = False
    tag: bool = False

    def __post_init__(self):
        if self.label not in range(len(CLASS_NAMES)):
            raise ValueError(f"label must be in 0..{len(CLASS_NAMES) - 1}")
        if self.size < 32:
            raise ValueError("size must be at least 32")


@dataclass
class Sample:
    image: np.ndarray
    label: int
    masks: dict[str, np.ndarray]
    trace: GazeTrace


def _ellipse(rows, cols, cy, cx, ry, rx):
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def _smooth(field: np.ndarray, passes: int = 2) -> np.ndarray:
    # cheap 3x3 box smoothing with edge replication
    for _ in range(passes):
        p = np.pad(field, 1, mode="edge")
        field = sum(p[i : i + field.shape[0], j : j + field.shape[1]] for i in range(3) for j in range(3)) / 9.0
    return field


def generate_sample(spec: SceneSpec) -> Sample:
    """Image in [0, 1] (quantized to 8 bits), masks and a gaze trace for one scene."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    u = s / 64.0
    rows, cols = np.mgrid[0:s, 0:s].astype(np.float64)

    # anatomy jitter, drawn for every class
    dy, dx = rng.uniform(-2.0, 2.0, 2) * u
    lung_h = rng.uniform(36.0, 42.0) * u
    lung_w = rng.uniform(16.0, 19.0) * u
    heart_size = rng.uniform(0.0, 1.0)
    heart_cy = (40.0 + rng.uniform(-1.5, 1.5)) * u + dy
    heart_cx = (32.0 + rng.uniform(-1.5, 1.5)) * u + dx
    patch_side = rng.integers(0, 2)
    patch_fy, patch_fx = rng.uniform(0.2, 0.75), rng.uniform(0.25, 0.75)
    patch_r = rng.uniform(5.0, 7.0) * u
    noise = rng.standard_normal((s, s))
    texture = rng.standard_normal((s, s))
    ribs_phase = rng.uniform(0, 2 * np.pi)
    marker_u = rng.uniform(0.0, 1.0, 2)
    marker_r = rng.uniform(2.5, 3.5) * u

    top = 10.0 * u + dy
    left_lung = (rows >= top) & (rows < top + lung_h) & (cols >= 8 * u + dx) & (cols < 8 * u + dx + lung_w)
    right_x0 = s - 8 * u + dx - lung_w
    right_lung = (rows >= top) & (rows < top + lung_h) & (cols >= right_x0) & (cols < right_x0 + lung_w)
    lung = left_lung | right_lung

    if spec.label == 1:
        grow, heart_level = HEART_GROWTH, HEART_LEVEL[1]
    else:
        grow, heart_level = 0.0, HEART_LEVEL[0]
    ry, rx = (7.0 + grow + 2.0 * heart_size) * u, (8.0 + grow + 2.0 * heart_size) * u
    heart = _ellipse(rows, cols, heart_cy, heart_cx, ry, rx)

    img = np.full((s, s), 0.08)
    thorax = _ellipse(rows, cols, 34 * u + dy, 32 * u + dx, 30 * u, 29 * u)
    img[thorax] = 0.45
    img[lung] = 0.22 + 0.05 * np.sin(rows[lung] / (3.0 * u) + ribs_phase)
    img[heart] = heart_level

    # acquisition artifacts live outside heart and lungs; whether they appear is
    # decided by the SceneSpec flags, never by the label
    clear = np.ceil(4 * u)
    max_heart = _ellipse(rows, cols, heart_cy, heart_cx, (9.0 + HEART_GROWTH) * u + clear, (10.0 + HEART_GROWTH) * u + clear)
    keep_out = _smooth((lung | max_heart).astype(float), int(clear)) > 0
    margin = int(clear)
    keep_out[:margin] = keep_out[-margin:] = True
    keep_out[:, :margin] = keep_out[:, -margin:] = True
    cand_r, cand_c = np.nonzero(~keep_out)
    spots = [(cand_r[k], cand_c[k]) for k in np.minimum((marker_u * len(cand_r)).astype(int), len(cand_r) - 1)]
    if spec.electrode:
        disc = _ellipse(rows, cols, *spots[0], marker_r, marker_r)
        img[disc] = MARKER_LEVEL + 0.1 * texture[disc]
    if spec.tag:
        half = 3.0 * u
        box = (np.abs(rows - spots[1][0]) <= half) & (np.abs(cols - spots[1][1]) <= half)
        checker = ((rows // max(1, int(2 * u)) + cols // max(1, int(2 * u))) % 2).astype(float)
        img[box] = 0.35 + 0.55 * checker[box]

    if spec.label == 2:
        x0 = (8 * u + dx) if patch_side == 0 else right_x0
        pcy = top + patch_fy * lung_h
        pcx = x0 + patch_fx * lung_w
        patch = _ellipse(rows, cols, pcy, pcx, patch_r, patch_r) & lung & ~heart
        img[patch] += PATCH_SHIFT + PATCH_TEXTURE * texture[patch]
        focus = (pcy, pcx)
    else:
        focus = (heart_cy, heart_cx)

    # noise level is the std of the white field before a 3x3 box average
    img = img + spec.noise * _smooth(noise, 1)
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    trace = _gaze(rng, spec, focus, heart | lung)
    return Sample(img, spec.label, {"heart": heart, "lung": lung}, trace)


def _gaze(rng: np.random.Generator, spec: SceneSpec, focus, sweep_region: np.ndarray) -> GazeTrace:
    s = spec.size
    m = spec.n_gaze
    n_focus = int(round(spec.gaze_fraction * m))
    std = spec.gaze_std * s
    if spec.label == 0:
        # normal: sweep over heart and lungs
        rr, cc = np.nonzero(sweep_region)
        pick = rng.integers(0, len(rr), n_focus)
        centers = np.column_stack((cc[pick] + 0.5, rr[pick] + 0.5))
        scatter = rng.normal(0.0, std * 0.5, (n_focus, 2))
    else:
        centers = np.tile([focus[1], focus[0]], (n_focus, 1))
        scatter = rng.normal(0.0, std, (n_focus, 2))
    focused = centers + scatter
    uniform = rng.uniform(0.0, s, (m - n_focus, 2))
    xy = np.vstack((focused, uniform))
    order = rng.permutation(m)
    t = np.arange(m) * (1000.0 / GAZE_RATE_HZ)
    return GazeTrace(xy[order], s, s, t=t)


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


@dataclass
class Corpus:
    samples: list[Sample]
    ids: list[str]
    splits: list[str]

    def dataset(self, split: str) -> Dataset:
        idx = [i for i, sp in enumerate(self.splits) if sp == split]
        chosen = [self.samples[i] for i in idx]
        return Dataset(
            ids=[self.ids[i] for i in idx],
            images=np.stack([c.image for c in chosen]),
            labels=np.array([c.label for c in chosen], dtype=np.int64),
            masks={k: np.stack([c.masks[k] for c in chosen]) for k in ("heart", "lung")},
            traces=[c.trace for c in chosen],
        )


def generate_corpus(n_per_class: int, seed: int, out: str | Path | None = None, size: int = 64,
                    noise: float = 0.35) -> Corpus:
    """Balanced corpus split 70/10/20 within every class; written to ``out`` when given."""
    if n_per_class < 10:
        raise ValueError("n_per_class must be at least 10")
    n_classes = len(CLASS_NAMES)
    root = np.random.SeedSequence(seed)
    sample_seeds = root.spawn(n_classes * n_per_class)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    artifact_rng = np.random.default_rng(root.spawn(1)[0])
    sizes = _split_sizes(n_per_class)

    samples, ids, splits = [], [], []
    for label in range(n_classes):
        assignment = np.repeat(np.arange(3), sizes)
        split_rng.shuffle(assignment)
        for k in range(n_per_class):
            idx = label * n_per_class + k
            child = int(sample_seeds[idx].generate_state(1)[0])
            electrode, tag = artifact_rng.uniform(size=2) < (ELECTRODE_RATE[label], TAG_RATE[label])
            spec = SceneSpec(label, child, size=size, noise=noise, electrode=bool(electrode), tag=bool(tag))
            samples.append(generate_sample(spec))
            ids.append(f"s{idx:05d}")
            splits.append(SPLITS[assignment[k]])
    corpus = Corpus(samples, ids, splits)
    if out is not None:
        write_corpus(corpus, out)
    return corpus


def write_corpus(corpus: Corpus, out: str | Path) -> None:
    out = Path(out)
    for sub in ("images", "masks/heart", "masks/lung", "gaze"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for sid, sample in zip(corpus.ids, corpus.samples):
        formats.write_pgm(out / "images" / f"{sid}.pgm", formats.image_to_u8(sample.image))
        for name in ("heart", "lung"):
            formats.write_pgm(out / "masks" / name / f"{sid}.pgm", sample.masks[name].astype(np.uint8), maxval=1)
        write_gaze_csv(out / "gaze" / f"{sid}.csv", sample.trace)
    write_manifest(out, [(sid, s.label, sp) for sid, s, sp in zip(corpus.ids, corpus.samples, corpus.splits)])
