"""``ggcam`` command line: data generation, heat maps, training, evaluation, CAM export, run comparison.

Every command writes into a fresh run directory ``<out>/<timestamp>-seed<N>``
holding its artifacts and a ``run.json`` manifest, and prints ``run_dir=<path>``
as its last line. Options can also come from ``--config FILE`` (``key = value``
lines, keys spelled like the flags with underscores); a flag beats the file.

Failures print one line to stderr, ``ggcam-error code=<n> kind=<kind>: <message>``,
and exit with 2 (usage), 3 (data) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import formats
from .dataset import CLASS_MASK, CLASS_NAMES, SPLITS, DataError, load_split, read_manifest
from .evaluation import (
    DegenerateVarianceError,
    anova_oneway,
    auc_multiclass,
    confusion_matrix,
    interpretability_rate,
    precision_recall,
)
from .gaze_heatmap import make_heatmap, read_gaze_csv
from .network import class_maps, predict
from .numerics import NumericalError
from .synthetic_data import generate_corpus
from .trainer import MODES, OPTIMIZERS, PRESETS, TrainingError, fit, preset, read_log, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- option tables


def _auto_float(text: str) -> float | None:
    return None if str(text).strip().lower() in ("", "none", "auto") else float(text)


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = str(text).strip()
        if text not in allowed:
            raise ValueError(f"{text!r} is not one of {', '.join(allowed)}")
        return text

    parse.__name__ = "choice"
    return parse


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any] = str
    default: Any = None
    help: str = ""
    required: bool = False
    keep_none: bool = False  # pass a None default through instead of leaving the key out


COMMON = [
    Opt("seed", int, 0, "random seed; also names the run directory"),
    Opt("out", str, "runs", "parent directory for run directories"),
]

TRAIN_FIELDS = [
    Opt("learning_rate", float, help="initial learning rate"),
    Opt("optimizer", _choice(*OPTIMIZERS), help="adam, adamax, sgd or sgd_momentum"),
    Opt("patience", int, help="epochs without validation improvement before lr x0.1"),
    Opt("max_epochs", int, help="number of epochs"),
    Opt("batch_size", int, help="minibatch size"),
    Opt("sigma_sm_init", float, help="initial sigma of the attention loss"),
    Opt("blur", _auto_float, help="recorded blur B of the heat maps used (auto = width-scaled default)"),
    Opt("n_features", int, help="feature channels G of the backbone"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("n", int, 100, "samples per class"),
        Opt("noise", float, 0.35, "image noise level"),
        Opt("size", int, 64, "image side in pixels (multiple of 8)"),
    ],
    "heatmap": [
        Opt("data", str, required=True, help="corpus directory"),
        Opt("blur", _auto_float, None, "Gaussian blur sigma in source pixels (auto = width-scaled default)", keep_none=True),
        Opt("grid", int, None, "heat-map side; default image side / 8 (the CAM grid)", keep_none=True),
    ],
    "train": [
        Opt("data", str, required=True, help="corpus directory"),
        Opt("heatmaps", str, None, "heat-map directory (default <data>/heatmaps); GG-CAM only", keep_none=True),
        Opt("mode", _choice(*MODES), "baseline", "baseline or ggcam"),
        Opt("preset", _choice(*PRESETS), "toy", "hyper-parameter preset"),
        *TRAIN_FIELDS,
    ],
    "eval": [
        Opt("data", str, required=True, help="corpus directory"),
        Opt("checkpoint", str, required=True, help="checkpoint written by train"),
        Opt("split", _choice(*SPLITS), "test", "split to evaluate"),
    ],
    "export-cam": [
        Opt("data", str, required=True, help="corpus directory"),
        Opt("checkpoint", str, required=True, help="checkpoint written by train"),
        Opt("heatmaps", str, None, "heat-map directory to add to the panels", keep_none=True),
        Opt("split", _choice(*SPLITS), "test", "split to export from"),
        Opt("ids", str, "", "comma-separated sample ids (default: first --limit of the split)"),
        Opt("limit", int, 6, "number of samples when --ids is empty"),
    ],
    "compare": [
        Opt("group", str, required=True,
            help="NAME=PATH[,PATH...]; repeat for every group. PATH is an eval metrics.csv, "
                 "a training log.csv or a run directory holding one. In a config file separate groups with ';'"),
    ],
}

HELP = {
    "gen-data": "generate a synthetic corpus",
    "heatmap": "turn gaze traces into heat maps at CAM resolution",
    "train": "train a baseline or GG-CAM classifier",
    "eval": "precision/recall, AUC and interpretability on a split",
    "export-cam": "write per-class activation maps and side-by-side panels",
    "compare": "median AUC per group of runs and a one-way ANOVA",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ggcam", description="Gaze-guided class activation mapping toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="key = value file supplying any of the options below")
        for opt in opts + COMMON:
            kwargs: dict[str, Any] = {"default": argparse.SUPPRESS, "help": opt.help, "dest": opt.name}
            if opt.name == "group":
                kwargs["action"] = "append"
            else:
                kwargs["type"] = _flag_type(opt)
            p.add_argument("--" + opt.name.replace("_", "-"), **kwargs)
    return parser


def _flag_type(opt: Opt):
    def convert(text):
        try:
            return opt.type(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    convert.__name__ = getattr(opt.type, "__name__", "value")
    return convert


def resolve_options(command: str, flags: dict[str, Any]) -> dict[str, Any]:
    """Merge defaults < config file < flags. Returns only the options that were set or defaulted."""
    opts = COMMANDS[command] + COMMON
    table = {o.name: o for o in opts}
    merged: dict[str, Any] = {}
    config_path = flags.get("config")
    if config_path:
        try:
            raw = formats.read_config_file(config_path, table)
        except FileNotFoundError:
            raise UsageError(f"config file {config_path} not found") from None
        except formats.FormatError as exc:
            raise UsageError(str(exc)) from None
        for key, text in raw.items():
            try:
                merged[key] = [g.strip() for g in text.split(";") if g.strip()] if key == "group" else table[key].type(text)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
    merged.update({k: v for k, v in flags.items() if k in table})
    for opt in opts:
        if opt.name not in merged:
            if opt.required:
                raise UsageError(f"{command}: --{opt.name.replace('_', '-')} is required")
            if opt.default is not None or opt.keep_none:
                merged[opt.name] = opt.default
    return merged


# ---------------------------------------------------------------- run directories


def git_blob_hash(path: Path) -> str:
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path: str | Path) -> str:
    """Git-style hash: blob hash for a file, hash of sorted ``relpath blobhash`` lines for a directory."""
    path = Path(path)
    if path.is_file():
        return git_blob_hash(path)
    if not path.is_dir():
        raise DataError(f"{path} does not exist")
    lines = [f"{p.relative_to(path).as_posix()} {git_blob_hash(p)}\n" for p in sorted(path.rglob("*")) if p.is_file()]
    return hashlib.sha1("".join(lines).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict[str, str]
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def write(self, run_dir: Path) -> None:
        record = asdict(self)
        record["outputs"] = sorted(self.outputs)
        (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def make_run_dir(out: str | Path, seed: int) -> Path:
    base = Path(out)
    stamp = time.strftime("%Y%m%dT%H%M%S")
    name = f"{stamp}-seed{seed}"
    run = base / name
    k = 1
    while run.exists():
        k += 1
        run = base / f"{name}-{k}"
    run.mkdir(parents=True)
    return run


def _config_snapshot(opts: dict[str, Any]) -> dict[str, str]:
    return {k: ("auto" if v is None else repr(v) if isinstance(v, float) else str(v)) for k, v in sorted(opts.items())}


def _relative(run: Path, paths) -> list[str]:
    return [Path(p).relative_to(run).as_posix() for p in paths]


def _heat_dir(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p / "heatmaps" if (p / "heatmaps").is_dir() else p


# ---------------------------------------------------------------- commands


def cmd_gen_data(opts: dict[str, Any], run: Path) -> RunManifest:
    generate_corpus(opts["n"], opts["seed"], out=run, size=opts["size"], noise=opts["noise"])
    outputs = [p for p in run.rglob("*") if p.is_file()]
    print(f"wrote {3 * opts['n']} samples")
    return RunManifest("gen-data", opts["seed"], _config_snapshot(opts), {}, _relative(run, outputs))


def cmd_heatmap(opts: dict[str, Any], run: Path) -> RunManifest:
    data = Path(opts["data"])
    rows = read_manifest(data)
    out_dir = run / "heatmaps"
    out_dir.mkdir()
    outputs = []
    for sid, _, _ in rows:
        image_path = data / "images" / f"{sid}.pgm"
        gaze_path = data / "gaze" / f"{sid}.csv"
        if not image_path.exists() or not gaze_path.exists():
            raise DataError(f"sample {sid}: missing image or gaze file")
        pixels, _ = formats.read_pgm(image_path)
        h, w = pixels.shape
        grid = opts["grid"] or h // 8
        trace = read_gaze_csv(gaze_path, w, h)
        heat = make_heatmap(trace, opts["blur"], (grid, grid))
        target = out_dir / f"{sid}.csv"
        formats.write_grid_csv(target, heat.grid)
        outputs.append(target)
    print(f"wrote {len(outputs)} heat maps")
    inputs = {str(data): content_hash(data)}
    return RunManifest("heatmap", opts["seed"], _config_snapshot(opts), inputs, _relative(run, outputs))


def cmd_train(opts: dict[str, Any], run: Path) -> RunManifest:
    data = Path(opts["data"])
    overrides = {o.name: opts[o.name] for o in TRAIN_FIELDS if o.name in opts}
    try:
        config = preset(opts["preset"], opts["mode"], seed=opts["seed"], **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    ggcam = config.mode == "ggcam"
    heat = _heat_dir(opts.get("heatmaps")) if ggcam else None
    sets = {
        split: load_split(data, split, heatmaps=heat, require_heatmaps=ggcam, load_heatmaps=ggcam)
        for split in ("train", "val")
    }
    result = fit(config, sets["train"], sets["val"], n_classes=len(CLASS_NAMES))
    ckpt = run / "checkpoint.ggc"
    formats.save_checkpoint(ckpt, result.best)
    log_path = run / "log.csv"
    write_log(log_path, result.log)
    cfg_path = run / "config.txt"
    snapshot = {"preset": opts["preset"], **config.as_strings()}
    cfg_path.write_text("".join(f"{k} = {v}\n" for k, v in snapshot.items()))
    best = result.state.best_epoch
    print(f"trained {config.mode} for {config.max_epochs} epochs; best validation epoch {best}")
    if result.log:
        last = result.log[-1]
        row = result.log[best - 1] if best else last
        print(f"val_loss={row['val_loss']:.6g} val_auc={row['val_auc']:.4f}")
        if ggcam:
            print(f"sigma_sm={last['sigma_sm']:.6g} sigma_ce={last['sigma_ce']:.6g} alpha={last['alpha']:.6g}")
    inputs = {str(data): content_hash(data)}
    if heat is not None or ggcam:
        hd = heat if heat is not None else data / "heatmaps"
        inputs[str(hd)] = content_hash(hd)
    return RunManifest("train", opts["seed"], {k: snapshot[k] for k in sorted(snapshot)} | {"data": str(data)},
                       inputs, _relative(run, [ckpt, log_path, cfg_path]))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fmt(v: float | None, width: int = 9) -> str:
    return f"{'-':>{width}}" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:>{width}.3f}"


def cmd_eval(opts: dict[str, Any], run: Path) -> RunManifest:
    data, ckpt = Path(opts["data"]), Path(opts["checkpoint"])
    classifier = formats.load_checkpoint(ckpt)
    ds = load_split(data, opts["split"], load_heatmaps=False)
    probs = _softmax(predict(classifier, ds.images).logits)
    auc = auc_multiclass(probs, ds.labels)
    precision, recall = precision_recall(probs, ds.labels)
    interp: dict[int, float | None] = {}
    for label in range(len(CLASS_NAMES)):
        has = label in CLASS_MASK and np.any(ds.labels == label) and CLASS_MASK[label] in ds.masks
        interp[label] = interpretability_rate(classifier, ds, label) if has else None
    counts = np.bincount(ds.labels, minlength=len(CLASS_NAMES))
    accuracy = float(np.trace(confusion_matrix(probs, ds.labels)) / len(ds))

    metrics = run / "metrics.csv"
    with metrics.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "n", "precision", "recall", "interpretability", "auc", "accuracy"])
        cell = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        for label, name in enumerate(CLASS_NAMES):
            writer.writerow([name, int(counts[label]), cell(precision[label]), cell(recall[label]), cell(interp[label]), "", ""])
        writer.writerow(["overall", len(ds), "", "", "", repr(auc), repr(accuracy)])

    print(f"{'class':<14}{'n':>5}{'precision':>11}{'recall':>9}{'interp.':>9}")
    for label, name in enumerate(CLASS_NAMES):
        print(f"{name:<14}{counts[label]:>5}  {_fmt(precision[label])}{_fmt(recall[label])}{_fmt(interp[label])}")
    print(f"AUC (Hand & Till) {auc:.4f}   accuracy {accuracy:.4f}   split {opts['split']} ({len(ds)} samples)")
    inputs = {str(ckpt): content_hash(ckpt), str(data): content_hash(data)}
    return RunManifest("eval", opts["seed"], _config_snapshot(opts), inputs, _relative(run, [metrics]))


def _stretch(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros(a.shape, dtype=np.uint8) if hi == lo else np.rint((a - lo) / (hi - lo) * 255).astype(np.uint8)


def cmd_export_cam(opts: dict[str, Any], run: Path) -> RunManifest:
    data, ckpt = Path(opts["data"]), Path(opts["checkpoint"])
    classifier = formats.load_checkpoint(ckpt)
    heat = _heat_dir(opts.get("heatmaps"))
    ds = load_split(data, opts["split"], heatmaps=heat, load_heatmaps=heat is not None,
                    require_heatmaps=heat is not None)
    if opts["ids"]:
        wanted = [s.strip() for s in opts["ids"].split(",") if s.strip()]
        unknown = sorted(set(wanted) - set(ds.ids))
        if unknown:
            raise DataError(f"ids not in split {opts['split']!r}: {', '.join(unknown)}")
        index = [ds.ids.index(s) for s in wanted]
    else:
        if opts["limit"] < 1:
            raise UsageError("--limit must be at least 1")
        index = list(range(min(opts["limit"], len(ds))))
    sub = ds.subset(index)
    maps = class_maps(classifier, sub.images)
    size = classifier.config.input_size
    factor = size // maps.shape[-1]
    cam_dir = run / "cams"
    cam_dir.mkdir()
    outputs = []
    gap = np.full((size, 2), 255, dtype=np.uint8)
    for i, sid in enumerate(sub.ids):
        tiles = [formats.image_to_u8(sub.images[i])]
        for label, name in enumerate(CLASS_NAMES):
            paths = formats.export_cam(maps[i, label], cam_dir / f"{sid}_{name}")
            outputs.extend(paths.values())
            tiles.append(np.kron(_stretch(maps[i, label]), np.ones((factor, factor), dtype=np.uint8)))
        if sub.heatmaps is not None:
            tiles.append(np.kron(np.rint(sub.heatmaps[i] * 255).astype(np.uint8), np.ones((factor, factor), dtype=np.uint8)))
        panel = np.hstack([part for t in tiles for part in (t, gap)][:-1])
        panel_path = cam_dir / f"{sid}_panel.pgm"
        formats.write_pgm(panel_path, panel)
        outputs.append(panel_path)
        print(f"{sid}: label {CLASS_NAMES[sub.labels[i]]}")
    inputs = {str(ckpt): content_hash(ckpt), str(data): content_hash(data)}
    return RunManifest("export-cam", opts["seed"], _config_snapshot(opts), inputs, _relative(run, outputs))


def run_auc(path: str | Path) -> float:
    """AUC of one run: test AUC from an eval ``metrics.csv``, else the validation AUC
    at the best validation-loss epoch of a training ``log.csv``."""
    path = Path(path)
    if path.is_dir():
        for name in ("metrics.csv", "log.csv"):
            if (path / name).exists():
                path = path / name
                break
        else:
            raise DataError(f"{path}: no metrics.csv or log.csv")
    if not path.exists():
        raise DataError(f"{path} not found")
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), [])
    if header and header[0] == "class":
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                if row["class"] == "overall":
                    return float(row["auc"])
        raise DataError(f"{path}: no overall row")
    try:
        log = read_log(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if not log:
        raise DataError(f"{path}: empty training log")
    best = min(range(len(log)), key=lambda i: (log[i]["val_loss"], i))
    return float(log[best]["val_auc"])


def _parse_groups(specs: Sequence[str]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for spec in specs:
        name, sep, rest = spec.partition("=")
        paths = [p.strip() for p in rest.split(",") if p.strip()]
        if not sep or not name.strip() or not paths:
            raise UsageError(f"bad --group {spec!r}; expected NAME=PATH[,PATH...]")
        if name.strip() in groups:
            raise UsageError(f"group {name.strip()!r} given twice")
        groups[name.strip()] = paths
    if len(groups) < 2:
        raise UsageError("compare needs at least two groups")
    return groups


def cmd_compare(opts: dict[str, Any], run: Path) -> RunManifest:
    groups = _parse_groups(opts["group"])
    aucs = {name: [run_auc(p) for p in paths] for name, paths in groups.items()}
    f, p = anova_oneway(list(aucs.values()))
    out = run / "compare.csv"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group", "n", "median_auc", "mean_auc", "aucs"])
        for name, vals in aucs.items():
            writer.writerow([name, len(vals), repr(float(np.median(vals))), repr(float(np.mean(vals))),
                             " ".join(repr(v) for v in vals)])
        writer.writerow(["anova_F", "", repr(f), "", ""])
        writer.writerow(["anova_p", "", repr(p), "", ""])
    print(f"{'group':<16}{'runs':>5}{'median AUC':>12}{'mean AUC':>10}")
    for name, vals in aucs.items():
        print(f"{name:<16}{len(vals):>5}{np.median(vals):>12.4f}{np.mean(vals):>10.4f}")
    print(f"one-way ANOVA: F={f:.4g} p={p:.4g}")
    inputs = {path: content_hash(path) for paths in groups.values() for path in paths}
    snapshot = _config_snapshot({k: v for k, v in opts.items() if k != "group"})
    snapshot["group"] = "; ".join(opts["group"])
    return RunManifest("compare", opts["seed"], snapshot, inputs, _relative(run, [out]))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "heatmap": cmd_heatmap,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-cam": cmd_export_cam,
    "compare": cmd_compare,
}


def _report(code: int, kind: str, message: str) -> int:
    text = " ".join(str(message).split())
    print(f"ggcam-error code={code} kind={kind}: {text}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
        command = args.pop("command")
        verbose = args.pop("verbose")
        if verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        opts = resolve_options(command, args)
        run = make_run_dir(opts["out"], opts["seed"])
        try:
            manifest = HANDLERS[command](opts, run)
        except BaseException:
            shutil.rmtree(run, ignore_errors=True)
            raise
        manifest.outputs.append("run.json")
        manifest.write(run)
        print(f"run_dir={run}")
        return EXIT_OK
    except UsageError as exc:
        return _report(EXIT_USAGE, "usage", exc)
    except (NumericalError, TrainingError, DegenerateVarianceError) as exc:
        return _report(EXIT_NUMERICAL, "numerical", exc)
    except (DataError, formats.FormatError, OSError, ValueError) as exc:
        return _report(EXIT_DATA, "data", exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
