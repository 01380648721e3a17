"""On-disk formats: PGM images, CAM exports, heat-map grids, checkpoints, config files."""

from __future__ import annotations

import csv
import re
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .cam_head import CamHead, StandardHead
from .losses import UncertaintyWeights
from .network import Backbone, Classifier, NetworkConfig
from .numerics import Tensor

CHECKPOINT_MAGIC = b"GGCAMCKP"
CHECKPOINT_VERSION = 1
_HEAD_CODES = {"standard": 0, "cam": 1}


class FormatError(ValueError):
    """A file does not follow the expected layout."""


# ---------------------------------------------------------------- PGM


def write_pgm(path: str | Path, image: np.ndarray, maxval: int = 255) -> None:
    """Write integer pixel values as binary (P5) PGM; 16-bit samples are big-endian."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(img.astype(dtype).tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Return (pixels, maxval) from a binary PGM."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos < n:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(raw[pos : pos + n], dtype=dtype).reshape(h, w).astype(np.int64), maxval


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def u8_to_image(pixels: np.ndarray, maxval: int = 255) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / maxval


# ---------------------------------------------------------------- CAM export


def export_cam(cam_map: np.ndarray, stem: str | Path) -> dict[str, Path]:
    """Write one H×W class map as 16-bit PGM (min..max stretched to 0..65535),
    a sidecar range line and a CSV of the raw values."""
    cam_map = np.asarray(cam_map, dtype=np.float64)
    stem = Path(stem)
    lo, hi = float(cam_map.min()), float(cam_map.max())
    scaled = np.zeros(cam_map.shape) if hi == lo else (cam_map - lo) / (hi - lo)
    paths = {
        "pgm": stem.with_suffix(".pgm"),
        "range": stem.with_suffix(".range.txt"),
        "csv": stem.with_suffix(".csv"),
    }
    write_pgm(paths["pgm"], np.rint(scaled * 65535).astype(np.int64), maxval=65535)
    paths["range"].write_text(f"min={lo!r} max={hi!r}\n")
    write_grid_csv(paths["csv"], cam_map)
    return paths


def read_cam_range(path: str | Path) -> tuple[float, float]:
    fields = dict(part.split("=", 1) for part in Path(path).read_text().split())
    return float(fields["min"]), float(fields["max"])


def write_grid_csv(path: str | Path, grid: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(grid, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])


def read_grid_csv(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ragged or empty grid")
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path: str | Path, classifier: Classifier) -> None:
    """Flat little-endian binary: magic, version, config block, then named tensors."""
    cfg = classifier.config
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<5I", cfg.n_features, cfg.feature_size, cfg.feature_size, cfg.n_classes, _HEAD_CODES[cfg.head_kind]),
    ]
    params = classifier.named_parameters()
    chunks.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", tensor.data.ndim) + struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
        chunks.append(tensor.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Classifier:
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    g, h, w, c, code = reader.unpack("<5I")
    kinds = {v: k for k, v in _HEAD_CODES.items()}
    if code not in kinds or h != w:
        raise FormatError(f"{path}: bad config block")
    config = NetworkConfig(input_size=8 * h, n_features=g, n_classes=c, head_kind=kinds[code])
    (count,) = reader.unpack("<I")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = reader.unpack("<H")
        name = reader.take(n).decode("utf-8")
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if reader.pos != len(reader.raw):
        raise FormatError(f"{path}: trailing bytes")
    try:
        backbone = Backbone([tensors[f"conv{i}.{p}"] for i in (1, 2, 3) for p in ("weight", "bias")], g)
        if config.head_kind == "cam":
            head = CamHead(tensors["head.weight"], tensors["head.bias"], tensors["head.alpha_raw"])
            weights = UncertaintyWeights(tensors["sigma_sm_raw"], tensors["sigma_ce_raw"])
        else:
            head = StandardHead(tensors["head.weight"], tensors["head.bias"])
            weights = None
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from None
    return Classifier(config, backbone, head, weights)


# ---------------------------------------------------------------- key = value config


def read_config_file(path: str | Path, allowed: Mapping[str, Any]) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out
