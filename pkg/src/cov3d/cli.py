"""``cov3d`` command-line entry point.

Exit codes: 0 success, 1 data/runtime error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from cov3d.augment import center_eval_crop
from cov3d.checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint, transfer_init
from cov3d.config import ConfigError, RunConfig, load_config
from cov3d.data import LABEL_NAMES, CachedDataset, ManifestRecord, atomic_write_text, read_manifest, write_manifest
from cov3d.model import build_model
from cov3d.synth import DEFAULT_SIZE, synthesize_dataset
from cov3d.train import evaluate, predict_logits, softmax_rows, train
from cov3d.volume import preprocess_scan, write_raw

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _run_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _target(args, cfg: RunConfig) -> tuple[int, int, int]:
    d, h, w = cfg.target
    return (args.depth or d, args.height or h, args.width or w)


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_synth(args) -> int:
    size = (args.depth or DEFAULT_SIZE[0], args.height or DEFAULT_SIZE[1], args.width or DEFAULT_SIZE[2])
    manifests = synthesize_dataset(args.out, args.n_train, args.n_val, seed=args.seed, size=size)
    print(f"wrote {args.n_train} train + {args.n_val} val scans of size {size} to {args.out}")
    for split, path in manifests.items():
        print(f"  {split} manifest: {path}")
    return EXIT_OK


def _write_volume_atomic(dest: Path, voxels: np.ndarray) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=dest.parent, prefix=f".{dest.name}."))
    try:
        write_raw(tmp, voxels, "f32")
        if dest.exists():
            shutil.rmtree(dest)
        os.replace(tmp, dest)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def cmd_preprocess(args) -> int:
    cfg = _run_config(args)
    records = read_manifest(args.manifest)
    out = Path(args.out)
    target = _target(args, cfg)
    prune = cfg.prune and not args.no_prune
    cached, reports, failures = [], [], 0
    for rec in records:
        if os.sep in rec.id or rec.id.startswith(".") or (os.altsep and os.altsep in rec.id):
            _err(f"{rec.id}: id cannot be used as a cache directory name")
            failures += 1
            continue
        try:
            vol = preprocess_scan(rec.path, prune=prune, target=target, **cfg.prune_params())
            dest = out / "volumes" / rec.id
            _write_volume_atomic(dest, vol.voxels)
        except (ValueError, OSError) as exc:
            _err(f"{rec.id}: {exc}")
            failures += 1
            continue
        cached.append(ManifestRecord(rec.id, str(dest), rec.label))
        if prune:
            reports.append({"id": rec.id, **vol.prune_report.to_dict()})
    name = Path(args.manifest).name
    if cached:
        write_manifest(out / name, cached)
    if prune and reports:
        atomic_write_text(out / (Path(name).stem + ".prune.jsonl"),
                          "".join(json.dumps(r) + "\n" for r in reports))
    print(f"preprocessed {len(cached)}/{len(records)} scans to {target} in {out}"
          + ("" if prune else " (pruning disabled)"))
    if failures:
        _err(f"{failures} scan(s) failed")
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args).with_overrides(seed=args.seed, epochs=args.epochs)
    train_ds = CachedDataset.from_manifest(args.manifest)
    val_ds = CachedDataset.from_manifest(args.val)
    d, h, w = train_ds[0][0].shape
    tcfg = cfg.train_config(init_ckpt=None)
    depth = tcfg.resolved_eval_depth or d
    model_cfg = cfg.model_config().with_input(depth, h, w)
    model = build_model(model_cfg, init_seed=cfg.seed)

    out = Path(args.out)
    history_path = Path(args.history) if args.history else _sidecar(out, ".history.csv")
    init_path = args.init or cfg.init_ckpt
    echo = {"config": cfg.to_dict(), "model_config": model_cfg.to_dict(), "train_manifest": str(args.manifest),
            "val_manifest": str(args.val), "init": init_path}
    atomic_write_text(_sidecar(out, ".config.json"), json.dumps(echo, indent=2, sort_keys=True) + "\n")

    if init_path:
        report = transfer_init(model, load_checkpoint(init_path), seed=cfg.seed)
        print(report.format())

    def progress(r):
        print(f"epoch {r.epoch}/{cfg.epochs}  loss {r.train_loss:.4f}  val macro F1 {r.val_macro_f1:.4f}  "
              f"{r.seconds:.1f}s", flush=True)

    result = train(model, train_ds, val_ds, tcfg, on_epoch=progress)
    result.best.metadata.update(preprocess=cfg.preprocess_options(), run=cfg.to_dict())
    save_checkpoint(result.best, out)
    result.history.write_csv(history_path)
    print(f"best epoch {result.best_epoch}: val macro F1 {result.best_report.macro_f1:.4f}")
    print(f"checkpoint: {out}\nhistory: {history_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    ds = CachedDataset.from_manifest(args.manifest)
    report = evaluate(model, ds, depth_to=model.config.input_shape[1])
    print(report.format(LABEL_NAMES))
    if args.json:
        atomic_write_text(args.json, json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    opts = dict(RunConfig().preprocess_options())
    opts.update(ckpt.metadata.get("preprocess", {}))
    prune = bool(opts.pop("prune")) and not args.no_prune
    target = tuple(opts.pop("target"))
    vol = preprocess_scan(args.scan, prune=prune, target=target, **opts)
    crop = center_eval_crop(vol, model.config.input_shape[1])
    probs = softmax_rows(predict_logits(model, [crop]))[0]
    k = int(np.argmax(probs))
    print(LABEL_NAMES[k])
    print("  ".join(f"p({name})={p:.6f}" for name, p in zip(LABEL_NAMES, probs)))
    if vol.prune_report is not None:
        print(f"pruned slices: head {vol.prune_report.head_removed}, tail {vol.prune_report.tail_removed}")
    else:
        print("pruned slices: none (pruning disabled)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _non_negative(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _add_shape(p, what: str) -> None:
    p.add_argument("--depth", type=_positive, help=f"{what} depth")
    p.add_argument("--height", type=_positive, help=f"{what} height")
    p.add_argument("--width", type=_positive, help=f"{what} width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cov3d", description="3D CT scan classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic CT-like dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=_non_negative, default=64)
    p.add_argument("--n-val", type=_non_negative, default=32)
    p.add_argument("--seed", type=int, default=0)
    _add_shape(p, "scan")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize, prune and resize scans into a cache")
    p.add_argument("--manifest", required=True, help="input manifest (JSON lines)")
    p.add_argument("--out", required=True, help="cache directory")
    p.add_argument("--config", help="run config JSON (preprocessing keys are used)")
    p.add_argument("--no-prune", action="store_true", help="skip non-lung slice pruning")
    _add_shape(p, "target")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on preprocessed manifests")
    p.add_argument("--manifest", required=True, help="training manifest (preprocessed cache)")
    p.add_argument("--val", required=True, help="validation manifest (preprocessed cache)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True, help="checkpoint path for the best model")
    p.add_argument("--init", help="checkpoint for transfer initialization")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--epochs", type=_non_negative, help="override the config epoch count")
    p.add_argument("--history", help="history CSV path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print validation metrics for a checkpoint")
    p.add_argument("--manifest", required=True, help="preprocessed manifest")
    p.add_argument("--ckpt", required=True, help="C3DW checkpoint")
    p.add_argument("--json", help="also write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one raw scan directory")
    p.add_argument("--scan", required=True, help="scan directory (PGM slices or raw volume)")
    p.add_argument("--ckpt", required=True, help="C3DW checkpoint")
    p.add_argument("--no-prune", action="store_true", help="skip non-lung slice pruning")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        _err(str(exc))
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as exc:
        _err(str(exc))
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
