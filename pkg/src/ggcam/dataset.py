"""In-memory dataset container and the on-disk corpus layout.

Layout under a corpus root::

    images/<id>.pgm          8-bit P5
    masks/heart/<id>.pgm     binary P5 (maxval 1)
    masks/lung/<id>.pgm      binary P5 (maxval 1)
    gaze/<id>.csv            t,x,y
    manifest.csv             id,label,split  (labels 1-based)

Heat maps live in their own directory as ``<id>.csv`` grids at CAM resolution,
either ``heatmaps/`` under the corpus root or wherever ``heatmap`` wrote them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import formats
from .gaze_heatmap import GazeTrace, read_gaze_csv

CLASS_NAMES = ("normal", "cardiomegaly", "pneumonia")
# pathology class -> mask that should contain the CAM peak
CLASS_MASK = {1: "heart", 2: "lung"}
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Corpus content is missing or inconsistent."""


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray  # N×S×S in [0, 1]
    labels: np.ndarray  # N, 0-based
    heatmaps: np.ndarray | None = None  # N×H×W
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # name -> N×S×S bool
    traces: list[GazeTrace] | None = None

    def __post_init__(self):
        n = len(self.ids)
        if self.images.shape[0] != n or self.labels.shape != (n,):
            raise DataError("ids, images and labels disagree in length")
        if self.heatmaps is not None and self.heatmaps.shape[0] != n:
            raise DataError("heat-map count does not match sample count")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            ids=[self.ids[i] for i in index],
            images=self.images[index],
            labels=self.labels[index],
            heatmaps=None if self.heatmaps is None else self.heatmaps[index],
            masks={k: v[index] for k, v in self.masks.items()},
            traces=None if self.traces is None else [self.traces[i] for i in index],
        )

    def of_class(self, label: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def mask_for(self, i: int, label: int) -> np.ndarray:
        name = CLASS_MASK.get(label)
        if name is None or name not in self.masks:
            raise DataError(f"no segmentation mask for class {label}")
        return self.masks[name][i]


def read_manifest(root: str | Path) -> list[tuple[str, int, str]]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise DataError(f"{path} not found")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "label", "split"]:
            raise DataError(f"{path}: expected header id,label,split")
        for row in reader:
            label = int(row["label"])
            if not 1 <= label <= len(CLASS_NAMES) or row["split"] not in SPLITS:
                raise DataError(f"{path}: bad row {row}")
            rows.append((row["id"], label - 1, row["split"]))
    return rows


def write_manifest(root: str | Path, rows) -> None:
    with (Path(root) / "manifest.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "split"])
        for sid, label, split in rows:
            writer.writerow([sid, label + 1, split])


def heatmap_path(heat_dir: str | Path, sid: str) -> Path:
    return Path(heat_dir) / f"{sid}.csv"


def load_split(root: str | Path, split: str, heatmaps: str | Path | None = None, require_heatmaps: bool = False,
               with_traces: bool = False, load_heatmaps: bool = True) -> Dataset:
    """Load one split of the corpus at ``root``.

    Heat maps are read from ``heatmaps`` (default ``root/heatmaps``) unless
    ``load_heatmaps`` is false. With ``require_heatmaps`` every sample must have one.
    """
    root = Path(root)
    heat_dir = root / "heatmaps" if heatmaps is None else Path(heatmaps)
    rows = [r for r in read_manifest(root) if r[2] == split]
    if not rows:
        raise DataError(f"split {split!r} is empty in {root}")
    ids = [r[0] for r in rows]
    labels = np.array([r[1] for r in rows], dtype=np.int64)

    def pgm(path):
        if not path.exists():
            raise DataError(f"missing file {path}")
        return formats.read_pgm(path)

    images = []
    for sid in ids:
        pixels, maxval = pgm(root / "images" / f"{sid}.pgm")
        images.append(formats.u8_to_image(pixels, maxval))
    masks = {}
    for name in ("heart", "lung"):
        if (root / "masks" / name).is_dir():
            masks[name] = np.stack([pgm(root / "masks" / name / f"{sid}.pgm")[0] > 0 for sid in ids])

    grids = None
    if not load_heatmaps:
        if require_heatmaps:
            raise ValueError("require_heatmaps needs load_heatmaps")
        missing = ids
    else:
        missing = [sid for sid in ids if not heatmap_path(heat_dir, sid).exists()]
    if require_heatmaps and missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise DataError(f"{len(missing)} sample(s) in split {split!r} lack heat maps: {shown}")
    if not missing:
        grids = np.stack([formats.read_grid_csv(heatmap_path(heat_dir, sid)) for sid in ids])

    traces = None
    if with_traces:
        size = images[0].shape
        traces = [read_gaze_csv(root / "gaze" / f"{sid}.csv", size[1], size[0]) for sid in ids]
    return Dataset(ids, np.stack(images), labels, grids, masks, traces)
