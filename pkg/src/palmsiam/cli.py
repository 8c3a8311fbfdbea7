"""Command-line surface: synth / train / eval / verify / gradcheck.

Exit codes: 0 success (or GENUINE decision), 1 runtime failure, 2 usage
error, 3 IMPOSTER decision, 4 failed self-check. Every run is fully
determined by its flags, config file, and seed; `train` writes the resolved
configuration (defaults included) next to its outputs, and feeding that file
back via --config reproduces the run.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SplitSpec, load_dataset, roi_preprocess, split, synth_generate
from .evaluation import evaluate, metrics_csv, threshold_sweep
from .gradcheck import run_all, tolerance_for
from .model import (
    CheckpointError,
    embed_samples,
    load_checkpoint,
    probability_values,
    save_checkpoint,
)
from .training import LOSS_KINDS, TrainConfig, train


class UsageError(ValueError):
    """Bad arguments or config values; maps to exit code 2."""


_EXTRA_DEFAULTS = {
    "data": "",
    "out": "",
    "train_fraction": 0.70,
    "pool_train_fraction": 0.75,
}

_INT_KEYS = {
    "n", "episodes_per_epoch", "max_epochs", "plateau_patience",
    "early_stop_patience", "val_pairs_per_class", "seed",
}
_FLOAT_KEYS = {
    "margin", "lr", "beta1", "beta2", "adam_eps", "plateau_factor",
    "plateau_min_delta", "lr_floor", "dropout_rate",
    "train_fraction", "pool_train_fraction",
}
_STR_KEYS = {"loss", "data", "out"}


def _default_run_config() -> dict[str, object]:
    merged = dict(_EXTRA_DEFAULTS)
    base = TrainConfig()
    for f in fields(TrainConfig):
        merged[f.name] = getattr(base, f.name)
    return merged


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment anywhere."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def config_to_text(resolved: dict[str, object]) -> str:
    lines = ["# resolved run configuration"]
    for key in ("data", "out"):
        lines.append(f"{key} = {resolved[key]}")
    for key in ("train_fraction", "pool_train_fraction"):
        lines.append(f"{key} = {resolved[key]!r}")
    for f in fields(TrainConfig):
        value = resolved[f.name]
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _coerce(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as e:
        raise UsageError(f"config key {key}: {e}") from None
    if key in _STR_KEYS:
        return value
    raise UsageError(f"unknown config key {key!r}")


def _resolve_train_config(args) -> dict[str, object]:
    merged = _default_run_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        for key, value in parse_config_text(path.read_text()).items():
            merged[key] = _coerce(key, value)
    for key in ("data", "out", "loss", "n", "seed"):
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    return merged


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    for name in ("subjects", "sessions", "instances"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1, got {getattr(args, name)}")
    if args.sessions * args.instances < 2:
        raise UsageError("sessions x instances must be >= 2 so every subject has a genuine pair")
    ds = synth_generate(args.subjects, args.sessions, args.instances, args.seed, args.out)
    print(f"wrote {ds.num_samples} samples for {len(ds.subjects)} subjects under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    resolved = _resolve_train_config(args)
    if not resolved["data"]:
        raise UsageError("no dataset directory: pass --data or set data= in the config")
    if not resolved["out"]:
        raise UsageError("no output directory: pass --out or set out= in the config")
    try:
        config = TrainConfig(**{f.name: resolved[f.name] for f in fields(TrainConfig)})
        train_spec = SplitSpec(float(resolved["train_fraction"]), config.seed)
        val_spec = SplitSpec(float(resolved["pool_train_fraction"]), config.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None

    dataset = load_dataset(resolved["data"])
    train_pool, _test = split(dataset, train_spec)
    train_split, val_split = split(train_pool, val_spec)
    params, history = train(config, train_split, val_split)

    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model.pvsn")
    (out / "history.csv").write_text(history.to_csv())
    (out / "config.txt").write_text(config_to_text(resolved))
    best = min(history.records, key=lambda r: r.val_loss)
    print(f"checkpoint: {out / 'model.pvsn'}")
    print(f"history: {out / 'history.csv'} ({len(history.records)} epochs, {history.stop_reason})")
    print(
        f"best epoch {best.epoch}: val_loss {best.val_loss:.6f} "
        f"val_accuracy {best.val_accuracy:.6f} threshold {params.calib_threshold:.6f}"
    )
    return 0


def _parse_sweep(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"--sweep expects LO:HI:STEP, got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"--sweep expects numeric LO:HI:STEP, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise UsageError(f"--sweep needs step > 0 and HI >= LO, got {text!r}")
    grid = []
    k = 0
    while True:
        t = lo + k * step
        if t > hi + 1e-9:
            break
        grid.append(t)
        k += 1
    for t in grid:
        if not 0.0 < t < 1.0:
            raise UsageError(f"sweep threshold {t:g} outside (0, 1)")
    return grid


def cmd_eval(args) -> int:
    if args.n_pairs < 1:
        raise UsageError(f"--n-pairs must be >= 1, got {args.n_pairs}")
    params = load_checkpoint(args.model)
    dataset = load_dataset(args.data)
    _train_pool, test = split(dataset, SplitSpec(args.train_fraction, args.seed))
    if args.threshold is not None:
        threshold = args.threshold
        source = "flag"
    elif params.calib_threshold is not None:
        threshold = params.calib_threshold
        source = "checkpoint calibration"
    else:
        threshold = 0.5
        source = "default"
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold must be in (0, 1), got {threshold}")
    if args.sweep:
        grid = _parse_sweep(args.sweep)
        reports = threshold_sweep(
            params, test, grid, pairs_per_class=args.n_pairs,
            seed=args.seed, n=args.n, loss=args.loss,
        )
    else:
        print(f"threshold {threshold:.6f} ({source})", file=sys.stderr)
        reports = [
            evaluate(
                params, test, pairs_per_class=args.n_pairs, threshold=threshold,
                seed=args.seed, n=args.n, loss=args.loss,
            )
        ]
    sys.stdout.write(metrics_csv(reports))
    return 0


def _load_palm(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return roi_preprocess(np.asarray(im.convert("L")))
    except (OSError, ValueError) as e:
        raise RuntimeError(f"cannot read image {path}: {e}") from None


def cmd_verify(args) -> int:
    params = load_checkpoint(args.model)
    images = np.stack(
        [_load_palm(p) for p in (args.left_a, args.right_a, args.left_b, args.right_b)]
    )[:, None, :, :]
    emb = embed_samples(params.extractor, images)
    fused = np.concatenate([emb[0::2], emb[1::2]], axis=1)
    d = float(np.abs(fused[0] - fused[1]).sum())
    p = float(probability_values(d, params.theta0.item(), params.theta1.item()))
    if args.threshold is not None:
        threshold = args.threshold
    elif params.calib_threshold is not None:
        threshold = params.calib_threshold
    else:
        threshold = 0.5
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold must be in (0, 1), got {threshold}")
    genuine = p >= threshold
    print(f"distance: {d:.6f}")
    print(f"probability: {p:.6f}")
    print(f"threshold: {threshold:.6f}")
    print(f"decision: {'GENUINE' if genuine else 'IMPOSTER'}")
    return 0 if genuine else 3


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    failed = []
    for name, err in results.items():
        tol = tolerance_for(name)
        ok = err <= tol
        if not ok:
            failed.append(name)
        print(f"{name:<18} max_rel_err {err:.3e} (tol {tol:.0e}) {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 4
    return 0


# -- parser / entry ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palmsiam",
        description="Few-shot dual-palm vein verification: data synthesis, "
        "training, evaluation, and pairwise verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--instances", type=int, default=3, help="instances per session")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the 70% subject split of a dataset")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--loss", choices=list(LOSS_KINDS))
    p.add_argument("--n", type=int, help="pairs per class per episode")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for checkpoint/history/config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the held-out test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-pairs", type=int, default=500, help="query pairs per class")
    p.add_argument("--threshold", type=float, help="override the stored decision threshold")
    p.add_argument("--sweep", help="LO:HI:STEP threshold grid; one CSV row per threshold")
    p.add_argument("--seed", type=int, default=0, help="split/query seed (use the training seed)")
    p.add_argument("--train-fraction", type=float, default=0.70)
    p.add_argument("--loss", default="contrastive", help="label for the CSV loss column")
    p.add_argument("--n", type=int, default=5, help="label for the CSV n column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="compare two users' palm image pairs")
    p.add_argument("--model", required=True)
    p.add_argument("--left-a", required=True)
    p.add_argument("--right-a", required=True)
    p.add_argument("--left-b", required=True)
    p.add_argument("--right-b", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference self-test of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
