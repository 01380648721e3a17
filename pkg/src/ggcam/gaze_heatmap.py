"""Gaze trace to visual heat map.

The pipeline is fixed: histogram -> Gaussian blur -> resample -> normalize.
Only ``make_heatmap`` runs the stages together; there is no way to reorder them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GazeTrace",
    "VisualHeatMap",
    "default_blur_sigma",
    "histogram",
    "gaussian_blur",
    "gaussian_kernel",
    "resample",
    "normalize",
    "make_heatmap",
    "read_gaze_csv",
    "write_gaze_csv",
]

# sigma 600 px was used on 1272-px-wide sources; scale with width
_REFERENCE_SIGMA = 600.0
_REFERENCE_WIDTH = 1272.0


@dataclass(frozen=True)
class GazeTrace:
    """Ordered gaze samples in source-image pixel coordinates.

    ``xy`` is an (M, 2) array of (column, row) pairs, already clamped into the
    image. ``t`` holds timestamps in milliseconds when known.
    """

    xy: np.ndarray
    width: int
    height: int
    t: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"zero-sized source image {self.width}x{self.height}")
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(xy)):
            raise ValueError("gaze samples must be finite")
        # off-screen samples are clamped, never dropped
        xy = np.column_stack(
            (np.clip(xy[:, 0], 0.0, self.width - 1), np.clip(xy[:, 1], 0.0, self.height - 1))
        )
        object.__setattr__(self, "xy", xy)

    @classmethod
    def from_points(cls, points, width: int, height: int, t=None) -> "GazeTrace":
        return cls(np.asarray(points, dtype=np.float64).reshape(-1, 2), width, height, t)

    def __len__(self) -> int:
        return len(self.xy)


@dataclass(frozen=True)
class VisualHeatMap:
    grid: np.ndarray
    blur_sigma: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def default_blur_sigma(source_width: int) -> float:
    """Blur sigma in pixels for a source image of the given width."""
    return 0.3 * source_width * _REFERENCE_SIGMA / _REFERENCE_WIDTH


def histogram(trace: GazeTrace) -> np.ndarray:
    """Per-pixel sample counts, shape (height, width)."""
    counts = np.zeros((trace.height, trace.width), dtype=np.float64)
    if len(trace) == 0:
        return counts
    cols = np.minimum(np.floor(trace.xy[:, 0]).astype(np.int64), trace.width - 1)
    rows = np.minimum(np.floor(trace.xy[:, 1]).astype(np.int64), trace.height - 1)
    np.add.at(counts, (rows, cols), 1.0)
    return counts


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1D Gaussian truncated at ±4 sigma, unit sum."""
    if not sigma > 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    # row i holds kernel weights over in-bounds positions, renormalized to unit mass
    radius = len(kernel) // 2
    offsets = np.arange(n)[None, :] - np.arange(n)[:, None]
    inside = np.abs(offsets) <= radius
    mat = np.where(inside, kernel[np.clip(offsets + radius, 0, len(kernel) - 1)], 0.0)
    return mat / mat.sum(axis=1, keepdims=True)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with border renormalization (constant maps stay constant)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("gaussian_blur expects a non-empty 2D map")
    kernel = gaussian_kernel(sigma)
    rows = _filter_matrix(image.shape[0], kernel)
    cols = _filter_matrix(image.shape[1], kernel)
    out = rows @ image @ cols.T
    # kernel weights are non-negative; clip rounding residue only
    return np.maximum(out, 0.0) if np.all(image >= 0) else out


def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    # fraction of each source pixel falling into each destination cell, rows sum to 1
    edges = np.arange(n_dst + 1) * (n_src / n_dst)
    lo = np.maximum(edges[:-1, None], np.arange(n_src)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n_src)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) * (n_dst / n_src)


def resample(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Downsample by exact area averaging to ``target`` = (H, W)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {target}")
    h0, w0 = image.shape
    if h > h0 or w > w0:
        raise ValueError(f"cannot upsample {h0}x{w0} to {h}x{w}")
    if (h, w) == (h0, w0):
        return image.copy()
    if h0 % h == 0 and w0 % w == 0:
        fh, fw = h0 // h, w0 // w
        return image.reshape(h, fh, w, fw).mean(axis=(1, 3))
    return _area_weights(h0, h) @ image @ _area_weights(w0, w).T


def normalize(image: np.ndarray, blur_sigma: float = float("nan")) -> VisualHeatMap:
    """Scale a non-negative map so its maximum is 1; an all-zero map stays zero."""
    image = np.asarray(image, dtype=np.float64)
    if np.any(image < 0):
        raise ValueError("normalize: negative element in heat map")
    peak = image.max() if image.size else 0.0
    grid = image / peak if peak > 0 else np.zeros_like(image)
    return VisualHeatMap(grid, blur_sigma)


def make_heatmap(trace: GazeTrace, sigma: float | None, target: tuple[int, int]) -> VisualHeatMap:
    """Visual heat map of ``trace`` at resolution ``target``.

    ``sigma=None`` selects ``default_blur_sigma(trace.width)``.
    """
    if sigma is None:
        sigma = default_blur_sigma(trace.width)
    counts = histogram(trace)
    blurred = gaussian_blur(counts, sigma)
    small = resample(blurred, target)
    return normalize(small, sigma)


def read_gaze_csv(path: str | Path, width: int, height: int) -> GazeTrace:
    """Read a ``t,x,y`` gaze file. Timestamps must be non-decreasing."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "x", "y"]:
            raise ValueError(f"{path}: expected header 't,x,y', got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite value")
    if np.any(np.diff(data[:, 0]) < 0):
        raise ValueError(f"{path}: timestamps decrease")
    return GazeTrace(data[:, 1:], width, height, t=data[:, 0])


def write_gaze_csv(path: str | Path, trace: GazeTrace) -> None:
    t = trace.t if trace.t is not None else np.arange(len(trace), dtype=np.float64)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "x", "y"])
        for ti, (x, y) in zip(t, trace.xy):
            writer.writerow([repr(float(ti)), repr(float(x)), repr(float(y))])
