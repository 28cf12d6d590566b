"""Command-line entry point: ``path24 {ingest,split,train,evaluate,predict,report}``.

Exit codes: 0 success, 2 ingestion error, 3 training error, 4 evaluation
error, 64 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import ENV_DATA_ROOT, load_config
from .dataset import (
    NUM_SCANS,
    PatchDataset,
    build_manifest,
    preprocess_array,
    read_image,
    read_manifest,
    stratified_split,
    tile_wsi,
    write_manifest,
    IMAGE_EXTENSIONS,
)
from .errors import (
    CheckpointError,
    ConfigError,
    EvaluationError,
    IngestionError,
    PatchLoadError,
    Path24Error,
    RegistryError,
    SplitError,
    TrainingError,
    WeightLoadError,
)
from .evaluation import EvalResult, evaluate_test_set, format_report_table, plot_confusion
from .model import build_classifier, load_checkpoint, predict
from .schemas import validate
from .training import TrainReport, plot_curves, train

EXIT_OK = 0
EXIT_INGEST = 2
EXIT_TRAIN = 3
EXIT_EVAL = 4
EXIT_USAGE = 64

log = logging.getLogger("path24")


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _counts_table(manifest) -> str:
    counts = manifest.counts()
    lines = [f"{'scan':<6}{'train':>8}{'val':>8}{'test':>8}"]
    for k in range(NUM_SCANS):
        row = [counts[s].get(k, 0) for s in ("train", "val", "test")]
        if any(row):
            lines.append(f"{'s' + str(k):<6}{row[0]:>8}{row[1]:>8}{row[2]:>8}")
    totals = [sum(counts[s].values()) for s in ("train", "val", "test")]
    lines.append(f"{'total':<6}{totals[0]:>8}{totals[1]:>8}{totals[2]:>8}")
    pool = totals[0] + totals[1]
    lines.append(f"training pool: {pool}  test: {totals[2]}")
    return "\n".join(lines)


def cmd_ingest(args) -> int:
    root = args.root or os.environ.get(ENV_DATA_ROOT)
    if not root:
        raise CommandError(EXIT_INGEST, f"no dataset root given and {ENV_DATA_ROOT} is unset")
    try:
        manifest = build_manifest(root, args.color_mode, require_size=args.require_size)
    except IngestionError as exc:
        raise CommandError(EXIT_INGEST, str(exc)) from exc
    write_manifest(manifest, args.out)
    print(_counts_table(manifest))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    try:
        manifest = stratified_split(read_manifest(args.manifest), args.val_fraction, args.seed)
    except (IngestionError, SplitError) as exc:
        raise CommandError(EXIT_INGEST, str(exc)) from exc
    out = args.out or args.manifest
    write_manifest(manifest, out)
    print(_counts_table(manifest))
    print(f"wrote {out}")
    return EXIT_OK


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError([f"--set expects key=value, got {pair!r}"])
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _new_run_dir(output_dir: Path, cfg) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-{cfg['backbone']}-{cfg['color_mode']}-seed{cfg['train.seed']}"
    output_dir.mkdir(parents=True, exist_ok=True)
    for i in range(1000):
        run_dir = output_dir / (base if i == 0 else f"{base}-{i}")
        try:
            run_dir.mkdir()
            return run_dir
        except FileExistsError:
            continue
    raise CommandError(EXIT_TRAIN, f"cannot allocate a fresh run directory under {output_dir}")


def _load_run_manifest(cfg):
    if cfg["manifest_path"]:
        return read_manifest(cfg["manifest_path"], cfg["color_mode"])
    if cfg["dataset_root"]:
        return build_manifest(cfg["dataset_root"], cfg["color_mode"])
    raise ConfigError([f"set manifest_path or dataset_root (or {ENV_DATA_ROOT})"])


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set)
    for flag, key in (("manifest", "manifest_path"), ("output_dir", "output_dir"),
                      ("epochs", "train.epochs"), ("seed", "train.seed"),
                      ("backbone", "backbone"), ("color_mode", "color_mode")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    cfg = load_config(args.config, overrides)

    try:
        manifest = _load_run_manifest(cfg)
        if not manifest.subset("val"):
            manifest = stratified_split(manifest, cfg["split.val_fraction"], cfg.split_seed)
    except (IngestionError, SplitError) as exc:
        raise CommandError(EXIT_INGEST, str(exc)) from exc

    run_dir = _new_run_dir(Path(cfg["output_dir"]), cfg)
    snapshot = dict(cfg.values)
    snapshot["manifest_path"] = str((run_dir / "manifest.csv").resolve())
    snapshot["dataset_root"] = None
    (run_dir / "config.cfg").write_text(type(cfg)(snapshot).dumps(), encoding="utf-8")
    write_manifest(manifest, run_dir / "manifest.csv")

    preprocess = cfg.preprocess
    try:
        model = build_classifier(cfg.backbone, cfg.head, preprocess, seed=cfg["train.seed"])
        _, report = train(
            model,
            PatchDataset(manifest.subset("train"), preprocess),
            PatchDataset(manifest.subset("val"), preprocess),
            cfg.train,
            output_dir=run_dir,
        )
    except (TrainingError, WeightLoadError, RegistryError, PatchLoadError) as exc:
        raise CommandError(EXIT_TRAIN, f"training aborted: {exc}") from exc
    plot_curves(report, run_dir / "curves.png")
    best = report.epochs[report.best_epoch - 1]
    print(f"run directory: {run_dir}")
    print(f"best epoch {report.best_epoch}: val_acc {best.val_acc:.4f}; wall time {report.wall_time_s:.1f}s")
    return EXIT_OK


def _write_eval_outputs(result: EvalResult, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    result.save(out_dir / "eval_result.json")
    table = format_report_table(result)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    plot_confusion(result.confusion, out_dir / "confusion.png")
    return table


def cmd_evaluate(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CommandError(EXIT_EVAL, str(exc)) from exc
    try:
        manifest = read_manifest(args.manifest, model.preprocess.color_mode)
    except IngestionError as exc:
        raise CommandError(EXIT_INGEST, str(exc)) from exc
    try:
        result = evaluate_test_set(model, manifest, batch_size=args.batch_size)
    except (EvaluationError, PatchLoadError) as exc:
        raise CommandError(EXIT_EVAL, str(exc)) from exc
    ckpt = Path(args.checkpoint)
    out_dir = Path(args.out) if args.out else ckpt.parent / f"eval-{ckpt.stem}-{time.strftime('%Y%m%d-%H%M%S')}"
    print(_write_eval_outputs(result, out_dir), end="")
    print(f"wrote {out_dir}")
    return EXIT_OK


def _input_images(target: Path) -> list:
    if target.is_dir():
        return sorted(p for p in target.iterdir()
                      if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    return [target]


def cmd_predict(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CommandError(EXIT_EVAL, str(exc)) from exc
    config = model.preprocess
    target = Path(args.input)
    if not target.exists():
        raise CommandError(EXIT_EVAL, f"input {target} does not exist")

    rows, failures, attempted = [], 0, 0
    for path in _input_images(target):
        attempted += 1
        try:
            image = read_image(path)
            if args.tile:
                tiles = tile_wsi(image, args.tile, args.stride or args.tile,
                                 white_threshold=args.white_threshold)
                for t in tiles:
                    k, conf = predict(model, preprocess_array(t.patch, config))
                    rows.append((f"{path}@{t.x}_{t.y}", k, conf))
            else:
                h, w = image.shape[:2]
                if h != w:
                    raise PatchLoadError(f"{path} is {w}x{h}; pass --tile for non-square images")
                k, conf = predict(model, preprocess_array(image, config))
                rows.append((str(path), k, conf))
        except (PatchLoadError, ValueError) as exc:
            failures += 1
            print(f"error: {exc}", file=sys.stderr)
            rows.append((str(path), -1, float("nan")))

    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["path", "scan_id", "confidence"])
        for path, k, conf in rows:
            writer.writerow([path, k, f"{conf:.6f}"])
    finally:
        if args.out:
            out.close()
    if attempted == 0:
        raise CommandError(EXIT_EVAL, f"no images found in {target}")
    if failures == attempted:
        raise CommandError(EXIT_EVAL, "every input failed")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.json)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_USAGE, f"cannot read {path}: {exc}") from exc
    kind = data.get("format", "") if isinstance(data, dict) else ""
    try:
        validate(data)
    except ValueError as exc:
        raise CommandError(EXIT_USAGE, f"{path}: {exc}") from exc
    out_dir = Path(args.out) if args.out else path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind.startswith("path24-train-report"):
        report = TrainReport.from_dict(data)
        print(f"{'epoch':>5}{'train_loss':>12}{'train_acc':>11}{'val_loss':>11}{'val_acc':>10}")
        for e in report.epochs:
            marker = " *" if e.epoch == report.best_epoch else ""
            print(f"{e.epoch:>5}{e.train_loss:>12.4f}{e.train_acc:>11.4f}{e.val_loss:>11.4f}{e.val_acc:>10.4f}{marker}")
        print(f"wall time: {report.wall_time_s:.1f}s")
        plot_curves(report, out_dir / "curves.png")
    else:
        result = EvalResult.from_dict(data)
        table = format_report_table(result)
        (out_dir / "report.txt").write_text(table, encoding="utf-8")
        plot_confusion(result.confusion, out_dir / "confusion.png")
        print(table, end="")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="path24", description="Histopathology scan classification with frozen pretrained backbones.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="build a manifest from a dataset tree")
    p.add_argument("root", nargs="?", help=f"dataset root (default: ${ENV_DATA_ROOT})")
    p.add_argument("--out", default="manifest.csv")
    p.add_argument("--color-mode", choices=["rgb", "grayscale"], default="rgb")
    p.add_argument("--require-size", type=int, default=None,
                   help="reject patches that are not SIZE x SIZE (1000 for the official data)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="stratified train/validation split of a manifest")
    p.add_argument("manifest")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output manifest (default: rewrite the input)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a classifier head")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--manifest")
    p.add_argument("--output-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone")
    p.add_argument("--color-mode", choices=["rgb", "grayscale"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the manifest's test split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify patches or tiled images")
    p.add_argument("checkpoint")
    p.add_argument("input", help="image file or directory of images")
    p.add_argument("--tile", type=int, help="tile size for large images")
    p.add_argument("--stride", type=int)
    p.add_argument("--white-threshold", type=float, help="skip tiles brighter than this mean intensity")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="render tables and plots from a stored JSON result")
    p.add_argument("json")
    p.add_argument("--out", help="output directory (default: next to the JSON)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_USAGE
    except Path24Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
