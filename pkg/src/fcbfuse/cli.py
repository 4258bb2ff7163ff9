"""Command-line entry point: ``fcbfuse train|eval|predict|gradcheck``.

Exit codes: 0 ok, 1 gradient check failed, 2 bad configuration, 3 data
error, 4 numerical abort, 5 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import functional as F

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = range(6)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Resolved training configuration; flags override values from the JSON file."""

    seed: int | None = None
    data: str | None = None
    out: str = "run"
    preset: str = "toy-64"
    arch: str = "fcbformer"
    input_hw: list[int] | None = None
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    max_steps: int | None = None
    augment: bool = True
    split: str = "auto"  # "auto": seeded 80/10/10; "overfit": train and validate on everything
    manifest: str | None = None
    threads: int | None = None

    def validate(self) -> None:
        if self.seed is None:
            raise CliError("a seed is required (set \"seed\" in the config or pass --seed)", EXIT_CONFIG)
        if self.data is None:
            raise CliError("no dataset given (set \"data\" in the config or pass --data)", EXIT_CONFIG)
        if self.split not in ("auto", "overfit"):
            raise CliError(f"unknown split mode {self.split!r}", EXIT_CONFIG)
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise CliError("epochs, batch_size and lr must be positive", EXIT_CONFIG)


def _load_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {args.config}", EXIT_CONFIG)
        except json.JSONDecodeError as exc:
            raise CliError(f"cannot parse config {args.config}: {exc}", EXIT_CONFIG)
        if not isinstance(values, dict):
            raise CliError(f"config {args.config} must be a JSON object", EXIT_CONFIG)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}", EXIT_CONFIG)
    for key in known:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG)
    return cfg


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("FCBFUSE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"FCBFUSE_THREADS must be an integer, got {env!r}", EXIT_CONFIG)
    return 1


@contextmanager
def thread_limit(n: int):
    from threadpoolctl import threadpool_limits

    if n < 1:
        raise CliError("--threads must be at least 1", EXIT_CONFIG)
    with threadpool_limits(limits=n):
        yield


# --------------------------------------------------------------------------
# commands


def _model_config(run: RunConfig):
    from .models import preset

    try:
        overrides = {"arch": run.arch}
        if run.input_hw is not None:
            overrides["input_hw"] = tuple(run.input_hw)
        return preset(run.preset, **overrides)
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"invalid model configuration: {exc}", EXIT_CONFIG)


def _load_data(root):
    from .data import DataError, load_dataset

    try:
        items = load_dataset(root)
    except DataError as exc:
        raise CliError(str(exc), EXIT_DATA)
    if not items:
        raise CliError(f"no samples found under {root}", EXIT_DATA)
    return items


def cmd_train(args) -> int:
    from .augment import AugmentConfig
    from .data import DataError, apply_split, read_manifest, split_ids, write_manifest
    from .models import Model
    from .train import NumericalError, TrainConfig, fit

    run = _load_run_config(args)
    if args.print_config:
        print(json.dumps(asdict(run), indent=2, sort_keys=True))
        return EXIT_OK
    run.validate()
    mcfg = _model_config(run)
    out = Path(run.out)
    items = _load_data(run.data)
    try:
        if run.manifest:
            assignment = read_manifest(run.manifest)
        elif run.split == "overfit":
            assignment = {s.id: "train" for s in items}
        else:
            assignment = split_ids([s.id for s in items], run.seed)
        train, val, test = apply_split(items, assignment)
    except (DataError, ValueError, OSError) as exc:
        raise CliError(f"cannot split dataset: {exc}", EXIT_DATA)
    if run.split == "overfit":
        val = train
    if not train or not val:
        raise CliError("training and validation splits must be non-empty", EXIT_DATA)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(assignment, out / "split.tsv")
    (out / "run_config.json").write_text(json.dumps(asdict(run), indent=2, sort_keys=True) + "\n")

    tcfg = TrainConfig(epochs=run.epochs, batch_size=run.batch_size, lr=run.lr,
                       weight_decay=run.weight_decay, seed=run.seed, max_steps=run.max_steps,
                       augment=run.augment)
    model = Model.create(mcfg, run.seed)
    with thread_limit(resolve_threads(run.threads)):
        try:
            result = fit(model, train, val, tcfg, out_dir=out, augment_cfg=AugmentConfig(),
                         on_epoch=lambda r: print(f"epoch {r.epoch} loss {r.train_loss:.5f} "
                                                  f"val_mDice {r.val_mdice:.4f} lr {r.lr:.2e}"))
        except NumericalError as exc:
            raise CliError(f"training aborted: {exc}", EXIT_NUMERIC)
    best = result.best
    print(f"best val mDice {best.val_mdice:.4f} at epoch {best.epoch}; wrote {out / 'best.ckpt'}")
    return EXIT_OK


def _load_ckpt(path, size=None):
    from .checkpoint import CheckpointError, load_checkpoint
    from .models import Model

    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}", EXIT_CHECKPOINT)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT)
    if size is not None and tuple(size) != tuple(ckpt.config.input_hw):
        raise CliError(f"checkpoint was trained at {tuple(ckpt.config.input_hw)}, "
                       f"not at the requested size {tuple(size)}", EXIT_CHECKPOINT)
    return ckpt, Model(ckpt.config, ckpt.params)


def cmd_eval(args) -> int:
    from .data import DataError, apply_split, read_manifest
    from .metrics import evaluate_split, generalisability_eval

    ckpt, model = _load_ckpt(args.checkpoint, args.size)
    hw = tuple(model.cfg.input_hw)
    items = _load_data(args.data)
    with thread_limit(resolve_threads(args.threads)):
        if args.full_dataset:
            report = generalisability_eval(model.predict_proba, items, hw, args.train_name,
                                           args.test_name or Path(args.data).name)
        else:
            manifest = Path(args.manifest) if args.manifest else Path(args.checkpoint).with_name("split.tsv")
            try:
                parts = dict(zip(("train", "val", "test"), apply_split(items, read_manifest(manifest))))
            except (DataError, OSError) as exc:
                raise CliError(f"cannot apply split manifest {manifest}: {exc}", EXIT_DATA)
            samples = parts[args.split]
            if not samples:
                raise CliError(f"split {args.split!r} is empty", EXIT_DATA)
            report = evaluate_split(model.predict_proba, samples, hw, args.name or args.split,
                                    {"split": args.split})
    report.metadata.update({"checkpoint": str(args.checkpoint), "arch": model.cfg.arch})
    csv_path, json_path = report.write(args.out, args.stem)
    print(report.format_means())
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _save_mask(binary: np.ndarray, path: Path) -> None:
    Image.fromarray((binary.astype(np.uint8) * 255), "L").save(path)


def _save_gray(a: np.ndarray, path: Path) -> None:
    lo, hi = float(a.min()), float(a.max())
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), "L").save(path)


def cmd_predict(args) -> int:
    from .data import DataError, read_image
    from .metrics import binarize
    from .models import fcb_forward, tb_forward
    from .tensor import Tensor

    ckpt, model = _load_ckpt(args.checkpoint)
    if args.ablate_fcb and not model.cfg.has_fcb:
        raise CliError(f"architecture {model.cfg.arch!r} has no FCB to ablate", EXIT_CONFIG)
    h, w = model.cfg.input_hw
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    with thread_limit(resolve_threads(args.threads)):
        for path in args.inputs:
            path = Path(path)
            try:
                src = read_image(path)
            except (DataError, OSError) as exc:
                print(f"error: {path}: {exc}", file=sys.stderr)
                failed += 1
                continue
            x = F.resize_array(src, h, w, "bilinear", antialias=True)[None] * 2.0 - 1.0
            x = x.astype(model.dtype)

            def finish(prob):
                m = binarize(prob[0, 0])
                if args.resize_to_source:
                    m = binarize(F.resize_array(m.astype(np.float64), src.shape[1], src.shape[2],
                                                "nearest"))
                return m

            _save_mask(finish(model.predict_proba(x)), out / f"{path.stem}_mask.png")
            if args.ablate_fcb:
                _save_mask(finish(model.predict_proba(x)), out / f"{path.stem}_withfcb.png")
                _save_mask(finish(model.predict_proba(x, ablate_fcb=True)),
                           out / f"{path.stem}_withoutfcb.png")
            if args.dump_features:
                xt = Tensor(x)
                _save_gray(tb_forward(xt, model.cfg, model.params).data[0].mean(axis=0),
                           out / f"{path.stem}_tb.png")
                if model.cfg.has_fcb:
                    _save_gray(fcb_forward(xt, model.cfg, model.params).data[0].mean(axis=0),
                               out / f"{path.stem}_fcb.png")
    print(f"wrote predictions for {len(args.inputs) - failed}/{len(args.inputs)} inputs to {out}")
    return EXIT_DATA if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_row, run_suite, select

    if args.preset != "toy-64":
        raise CliError(f"the gradient-check suite runs on the toy-64 preset only, got {args.preset!r}",
                       EXIT_CONFIG)
    try:
        select(args.only)
    except KeyError as exc:
        raise CliError(str(exc.args[0]), EXIT_CONFIG)
    with thread_limit(resolve_threads(args.threads)):
        rows = run_suite(args.seed, args.only, args.samples,
                         on_row=lambda r: print(format_row(r), flush=True))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    if failed:
        print("failed: " + ", ".join(f"{r.name} (worst param {r.worst_param})" for r in failed))
        return EXIT_GRADCHECK
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcbfuse", description="Train and evaluate FCBFormer-style "
                                "polyp segmentation models on a NumPy autograd engine.")
    sub = p.add_subparsers(dest="command", required=True)
    threads = dict(type=int, default=None,
                   help="BLAS threads (default: $FCBFUSE_THREADS, else 1)")

    t = sub.add_parser("train", help="train a model on an images/ + masks/ dataset")
    t.add_argument("--config", help="JSON run config; flags below override its values")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=("toy-64", "full-352"))
    t.add_argument("--arch")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--split", choices=("auto", "overfit"))
    t.add_argument("--manifest", help="reuse an existing split manifest")
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False, default=None)
    t.add_argument("--threads", **threads)
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split or a whole dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--split", choices=("train", "val", "test"), default="test")
    mode.add_argument("--full-dataset", action="store_true",
                      help="evaluate on every sample of --data (cross-dataset test)")
    e.add_argument("--manifest", help="split manifest (default: split.tsv next to the checkpoint)")
    e.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    e.add_argument("--out", default=".")
    e.add_argument("--stem", default="report")
    e.add_argument("--name", help="report name")
    e.add_argument("--train-name", default="A")
    e.add_argument("--test-name")
    e.add_argument("--threads", **threads)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write binary masks for input images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("inputs", nargs="+")
    r.add_argument("--dump-features", action="store_true",
                   help="also write channel-mean images of the TB and FCB outputs")
    r.add_argument("--ablate-fcb", action="store_true",
                   help="also write predictions with the FCB output replaced by zeros")
    r.add_argument("--resize-to-source", action="store_true")
    r.add_argument("--threads", **threads)
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="run the float64 finite-difference gradient checks")
    g.add_argument("--preset", default="toy-64")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--only", nargs="+", help="restrict to checks by name, prefix or kind")
    g.add_argument("--samples", type=int,
                   help="coordinates per tensor (default 100 for blocks, 48 for the model)")
    g.add_argument("--threads", **threads)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
