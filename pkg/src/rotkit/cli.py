"""Command-line entry points: gen-data, train, eval, report.

One command is one process. Settings resolve in precedence order:
explicit command-line flags, then a JSON config file (``--config``),
then built-in defaults. The JSON document uses the same names as the
flags with underscores, and unknown keys are rejected rather than
ignored. Every random decision in a command flows from its single
``--seed`` through named child streams (see the seeding module), so
repeating a command with the same inputs reproduces its outputs byte
for byte.

Exit codes: 0 on success, 2 for usage or configuration problems, 3 when
training aborts on a non-finite loss or gradient.

``ROTKIT_THREADS`` caps the augmentation worker count requested by
``--workers``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import augment, curriculum, data, metrics, model, seeding, so3, trainer

__all__ = ["RunConfig", "main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

COMPARISON_HEADER = (
    "run,total_iters,ssl_iters,final_loss_s,final_loss_u,"
    "final_mask_ratio,mean_mask_ratio,last_half_ratio_std,stages"
)


@dataclass
class RunConfig:
    """Resolved settings for one training run.

    Schedule selection: ``schedule`` is one of ``fixed``, ``multistage``,
    ``adaptive``, or ``none`` (supervised-only baseline: the whole
    iteration budget runs as supervised training). The tau/alpha fields
    feed whichever family is selected; the others are ignored.
    """

    data: str | None = None
    out: str | None = None
    total_iters: int = 20000
    supervised_iters: int = 10000
    batch_labeled: int = 32
    batch_unlabeled: int = 128
    lam: float = 1.0
    lr_supervised: float = 1e-4
    lr_ssl: float = 1e-5
    schedule: str = "adaptive"
    tau: float = -3.9
    tau_start: float = -4.5
    tau_end: float = -3.9
    alpha_start: float = 65.0
    alpha_end: float = 95.0
    n_stage: int = 4
    threshold_as_quantile: bool = False
    pool: str = "selected7"
    mosaic_n: int = 5
    use_mosaic: bool = True
    ema_momentum: float = 0.999
    seed: int = 0
    conv_channels: list | None = None
    embedding_dim: int = 16
    eval_data: str | None = None
    eval_every: int = 0
    checkpoint_every: int = 0
    workers: int = 1


_BOOL_FIELDS = {"threshold_as_quantile", "use_mosaic"}
_INT_FIELDS = {
    "total_iters",
    "supervised_iters",
    "batch_labeled",
    "batch_unlabeled",
    "n_stage",
    "mosaic_n",
    "seed",
    "embedding_dim",
    "eval_every",
    "checkpoint_every",
    "workers",
}
_FLOAT_FIELDS = {
    "lam",
    "lr_supervised",
    "lr_ssl",
    "tau",
    "tau_start",
    "tau_end",
    "alpha_start",
    "alpha_end",
    "ema_momentum",
}
_STR_FIELDS = {"data", "out", "schedule", "pool", "eval_data"}


def _check_json_value(key: str, value):
    if key in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ValueError(f"config key {key!r} must be a boolean")
        return value
    if key in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {key!r} must be an integer")
        return value
    if key in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {key!r} must be a number")
        return float(value)
    if key in _STR_FIELDS:
        if value is not None and not isinstance(value, str):
            raise ValueError(f"config key {key!r} must be a string")
        return value
    if key == "conv_channels":
        if not (
            isinstance(value, list)
            and len(value) == 2
            and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        ):
            raise ValueError("config key 'conv_channels' must be a list of two integers")
        return value
    raise AssertionError(key)


def load_run_config(path) -> dict:
    """Read a JSON config file, rejecting unknown keys."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _check_json_value(k, v) for k, v in doc.items()}


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, overlaid by the JSON config, overlaid by explicit flags."""
    rc = RunConfig()
    if args.config is not None:
        for key, value in load_run_config(args.config).items():
            setattr(rc, key, value)
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            setattr(rc, f.name, flag_value)
    return rc


def _worker_cap() -> int | None:
    raw = os.environ.get("ROTKIT_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"ROTKIT_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ValueError("ROTKIT_THREADS must be >= 1")
    return cap


def build_train_config(rc: RunConfig) -> trainer.TrainConfig:
    total = rc.total_iters
    supervised = rc.supervised_iters
    if rc.schedule == "none":
        # supervised-only baseline: the full budget trains on labels
        supervised = total
        schedule = None
    else:
        ssl_iters = total - supervised
        if ssl_iters < 1:
            raise ValueError(
                "schedules other than 'none' need total_iters > supervised_iters"
            )
        if rc.schedule == "fixed":
            schedule = curriculum.FixedSchedule(tau=rc.tau, n_iter=ssl_iters)
        elif rc.schedule == "multistage":
            schedule = curriculum.MultistageSchedule(
                alpha_start=rc.alpha_start,
                alpha_end=rc.alpha_end,
                n_stage=rc.n_stage,
                n_iter=ssl_iters,
            )
        elif rc.schedule == "adaptive":
            schedule = curriculum.AdaptiveSchedule(
                tau_start=rc.tau_start, tau_end=rc.tau_end, n_iter=ssl_iters
            )
        else:
            raise ValueError(
                f"unknown schedule {rc.schedule!r}; "
                "choose fixed, multistage, adaptive, or none"
            )
    workers = rc.workers
    cap = _worker_cap()
    if cap is not None:
        workers = min(workers, cap)
    return trainer.TrainConfig(
        total_iters=total,
        supervised_iters=supervised,
        batch_labeled=rc.batch_labeled,
        batch_unlabeled=rc.batch_unlabeled,
        lam=rc.lam,
        lr_supervised=rc.lr_supervised,
        lr_ssl=rc.lr_ssl,
        schedule=schedule,
        pool=augment.AugPool.from_config(rc.pool),
        mosaic_n=rc.mosaic_n,
        ema_momentum=rc.ema_momentum,
        seed=rc.seed,
        threshold_as_quantile=rc.threshold_as_quantile,
        use_mosaic=rc.use_mosaic,
        workers=workers,
    )


def _load_eval_triple(dataset_dir):
    manifest = data.load_manifest(os.path.join(dataset_dir, "manifest.json"))
    if manifest.n_unlabeled:
        raise ValueError(
            f"evaluation data must be fully labeled; "
            f"{manifest.n_unlabeled} samples in {dataset_dir} have no label"
        )
    records = manifest.records
    images = data.load_images(manifest, dataset_dir, records)
    cats = np.array([r.category for r in records], dtype=np.int64)
    rots = np.stack([r.label for r in records])
    return manifest, images, cats, rots


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = data.RenderConfig(width=args.width, height=args.height)
    manifest = data.generate_dataset(
        n_samples=args.n,
        k=args.k,
        ratio_labeled=args.ratio,
        seed=args.seed,
        out_dir=args.out,
        render_cfg=cfg,
        split=args.split,
    )
    print(f"manifest: {os.path.join(args.out, 'manifest.json')}")
    print(
        f"samples: {len(manifest.records)} "
        f"labeled: {manifest.n_labeled} unlabeled: {manifest.n_unlabeled}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    rc = resolve_run_config(args)
    if rc.data is None or rc.out is None:
        raise ValueError("train needs --data and --out (flags or config file)")
    cfg = build_train_config(rc)
    manifest = data.load_manifest(os.path.join(rc.data, "manifest.json"))
    channels = (8, 16) if rc.conv_channels is None else tuple(rc.conv_channels)
    model_cfg = model.ModelConfig(
        width=manifest.width,
        height=manifest.height,
        n_categories=manifest.n_categories,
        conv_channels=channels,
        embedding_dim=rc.embedding_dim,
        seed=seeding.child_seed(rc.seed, "model-init"),
    )
    eval_data = None
    if rc.eval_data is not None:
        _, e_imgs, e_cats, e_rots = _load_eval_triple(rc.eval_data)
        eval_data = (e_imgs, e_cats, e_rots)

    os.makedirs(rc.out, exist_ok=True)
    result = trainer.train(
        cfg,
        model_cfg,
        manifest,
        rc.data,
        eval_data=eval_data,
        eval_every=rc.eval_every,
        checkpoint_every=rc.checkpoint_every,
        checkpoint_dir=rc.out if rc.checkpoint_every else None,
    )
    log_path = os.path.join(rc.out, "train_log.csv")
    result.log.write(log_path)
    model.save_checkpoint(os.path.join(rc.out, "model.bin"), model_cfg, result.student)
    model.save_checkpoint(
        os.path.join(rc.out, "model_ema.bin"), model_cfg, result.teacher
    )
    print(f"train log: {log_path}")
    print(f"checkpoint: {os.path.join(rc.out, 'model.bin')}")
    print(f"ema checkpoint: {os.path.join(rc.out, 'model_ema.bin')}")
    if result.log.evals:
        eval_path = os.path.join(rc.out, "eval_log.csv")
        result.log.write_eval(eval_path)
        print(f"eval log: {eval_path}")
    last = result.log.records[-1]
    print(f"final loss_s: {last.loss_s!r}")
    if last.loss_u is not None:
        print(f"final loss_u: {last.loss_u!r}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _, images, cats, rots = _load_eval_triple(args.data)
    if args.predictor == "model":
        if not os.path.isfile(args.checkpoint or ""):
            raise ValueError(f"checkpoint not found: {args.checkpoint!r}")
        model_cfg, params = model.load_checkpoint(args.checkpoint)
        predict = trainer.model_predictor(model_cfg, params)
    elif args.predictor == "oracle":
        predict = lambda imgs, cs: rots  # noqa: E731 - truth injection
    else:
        rng = seeding.spawn(args.seed, "random-predictor")
        draws = so3.random_rotations(rng, images.shape[0])
        predict = lambda imgs, cs: draws  # noqa: E731

    report = metrics.summarize(metrics.angle_errors(predict, images, cats, rots))
    os.makedirs(args.out, exist_ok=True)
    per_cat = os.path.join(args.out, "per_category.csv")
    agg = os.path.join(args.out, "aggregate.csv")
    with open(per_cat, "w", newline="\n") as fh:
        fh.write(metrics.per_category_csv(report))
    with open(agg, "w", newline="\n") as fh:
        fh.write(metrics.aggregate_csv(report))
    print(f"per-category: {per_cat}")
    print(f"aggregate: {agg}")
    print(f"Mean Med: {report.mean_med_deg:.2f} deg")
    print(f"ACC@30: {report.mean_acc30:.4f}")
    return EXIT_OK


def _read_train_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0] != trainer.TRAIN_LOG_HEADER:
        raise ValueError(
            f"{path}: expected header {trainer.TRAIN_LOG_HEADER!r}, "
            f"got {lines[0] if lines else '<empty>'!r}"
        )
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        if None in row.values() or None in row:
            raise ValueError(f"{path}: malformed row {row}")
        rows.append(row)
    return rows


def cmd_report(args: argparse.Namespace) -> int:
    stems = [os.path.splitext(os.path.basename(p))[0] for p in args.logs]
    if len(set(stems)) != len(stems):
        raise ValueError("log files must have distinct names")
    os.makedirs(args.out, exist_ok=True)
    comparison = [COMPARISON_HEADER]
    for stem, path in zip(stems, args.logs):
        rows = _read_train_log(path)
        ssl = [r for r in rows if r["phase"] == trainer.PHASE_SSL]
        curve_path = os.path.join(args.out, f"curve_{stem}.csv")
        with open(curve_path, "w", newline="\n") as fh:
            fh.write(curriculum.MASK_RATIO_HEADER + "\n")
            for r in ssl:
                fh.write(
                    f"{r['iter']},{r['mask_ratio']},{r['threshold']},{r['stage']}\n"
                )
        print(f"curve: {curve_path}")
        if ssl:
            ratios = np.array([float(r["mask_ratio"]) for r in ssl])
            half = ratios[len(ratios) // 2 :]
            std = float(np.std(half))
            final = rows[-1]
            comparison.append(
                ",".join(
                    [
                        stem,
                        str(len(rows)),
                        str(len(ssl)),
                        final["loss_s"],
                        final["loss_u"],
                        final["mask_ratio"],
                        repr(float(np.mean(ratios))),
                        repr(std),
                        str(len({r["stage"] for r in ssl})),
                    ]
                )
            )
            print(f"{stem}: last-half mask-ratio std = {std!r}")
        else:
            final = rows[-1]
            comparison.append(f"{stem},{len(rows)},0,{final['loss_s']},,,,,0")
            print(f"{stem}: last-half mask-ratio std = n/a (no ssl rows)")
    table_path = os.path.join(args.out, "comparison.csv")
    with open(table_path, "w", newline="\n") as fh:
        fh.write("\n".join(comparison) + "\n")
    print(f"comparison: {table_path}")
    return EXIT_OK


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    # every default is None so that only explicitly given flags override
    # the JSON config; real defaults live in RunConfig
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--total-iters", dest="total_iters", type=int)
    p.add_argument("--supervised-iters", dest="supervised_iters", type=int)
    p.add_argument("--batch-labeled", dest="batch_labeled", type=int)
    p.add_argument("--batch-unlabeled", dest="batch_unlabeled", type=int)
    p.add_argument("--lam", type=float, help="unsupervised loss weight")
    p.add_argument("--lr-supervised", dest="lr_supervised", type=float)
    p.add_argument("--lr-ssl", dest="lr_ssl", type=float)
    p.add_argument(
        "--schedule", choices=["fixed", "multistage", "adaptive", "none"]
    )
    p.add_argument("--tau", type=float, help="fixed-schedule threshold")
    p.add_argument("--tau-start", dest="tau_start", type=float)
    p.add_argument("--tau-end", dest="tau_end", type=float)
    p.add_argument("--alpha-start", dest="alpha_start", type=float)
    p.add_argument("--alpha-end", dest="alpha_end", type=float)
    p.add_argument("--n-stage", dest="n_stage", type=int)
    p.add_argument(
        "--tau-as-quantile",
        dest="threshold_as_quantile",
        action="store_const",
        const=True,
        help="read tau values as proportions, calibrated on the first SSL batch",
    )
    p.add_argument("--pool", help="augmentation pool: selected7, all16, or a list")
    p.add_argument("--mosaic-n", dest="mosaic_n", type=int)
    p.add_argument(
        "--no-mosaic",
        dest="use_mosaic",
        action="store_const",
        const=False,
        help="feed selected unlabeled samples to the student un-augmented",
    )
    p.add_argument("--ema-momentum", dest="ema_momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotkit",
        description="Rotation regression with semi-supervised curriculum training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic rotation dataset")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--k", type=int, required=True, help="number of categories")
    g.add_argument("--ratio", type=float, required=True, help="labeled fraction")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the two-phase training loop")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    e.add_argument("--checkpoint", help="model checkpoint to score")
    e.add_argument("--data", required=True, help="labeled dataset directory")
    e.add_argument("--out", required=True, help="output directory for CSVs")
    e.add_argument(
        "--predictor",
        choices=["model", "oracle", "random"],
        default="model",
        help="oracle injects the true labels; random draws uniform rotations",
    )
    e.add_argument("--seed", type=int, default=0, help="seed for --predictor random")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="turn train logs into figure-data CSVs")
    r.add_argument("logs", nargs="+", help="train_log.csv files")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except trainer.TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
