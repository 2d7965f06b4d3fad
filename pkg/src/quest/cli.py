"""Command-line entry point: gen / train / eval / ablate / drift-curve.

Every subcommand resolves one root seed (flag, then QUEST_SEED, then the
config file), writes its resolved configuration, package version, and
input checksums next to its outputs, and renders a figure for each CSV it
emits unless --no-figures is given. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import plots, simgen
from .config import ConfigError, DataConfig, RunConfig, parse_config, write_provenance
from .dataio import DatasetFormatError, read_dataset, write_dataset
from .model import (CheckpointError, ModelConfig, ModelError, QueSTModel,
                    load_checkpoint, save_checkpoint)
from .objectives import LossWeights
from .simgen import SimError
from .trainer import TrainConfig, TrainerError, train

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


def _root_seed(args, cfg_seed: int) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("QUEST_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"QUEST_SEED must be an integer, got {env!r}")
    return cfg_seed


def _load_config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "lr", None) is not None:
        overrides.append(f"train.lr={args.lr}")
    cfg = parse_config(getattr(args, "config", None), overrides)
    cfg.seed = _root_seed(args, cfg.seed)
    cfg.train.seed = cfg.seed
    return cfg


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))  # ordered fold: results stay sorted


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    d = cfg.data
    for name in ("level", "count", "frames", "views"):
        flag = getattr(args, name)
        if flag is not None:
            setattr(d, name, flag)
    if args.noise is not None:
        d.noise = args.noise
    if args.preset is not None:
        d.preset = args.preset

    tasks = [(d.level, d.frames, cfg.seed + i, v)
             for i in range(d.count) for v in range(d.views)]

    def make(task):
        level, frames, seed, view = task
        return simgen.generate(level, frames, seed, views=d.views, view=view,
                               n_targets=d.n_targets,
                               n_distractors=d.n_distractors, preset=d.preset,
                               noise_sigma=d.noise, image_size=d.image_size)

    seqs = _parallel_map(make, tasks, args.jobs)
    write_dataset(seqs, args.out)
    write_provenance(args.out, cfg, directory=False)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg.train.stage = args.stage
    if args.ablation is not None:
        cfg.train.ablation = args.ablation
    seqs = read_dataset(args.data)
    init_model = load_checkpoint(args.init) if args.init else None
    if args.stage == 2 and init_model is None:
        raise UsageError("--stage 2 requires --init with a stage-1 checkpoint")
    out = Path(args.out)
    log_path = out.with_suffix(out.suffix + ".log.csv")
    result = train(seqs, cfg.model, cfg.train, cfg.loss, init_model=init_model,
                   log_path=log_path)
    save_checkpoint(result.model, out)
    write_provenance(out, cfg, inputs={"data": args.data, "init": args.init},
                     directory=False)
    if not args.no_figures and result.log_rows:
        plots.save_training_curves(result.log_rows,
                                   out.with_suffix(out.suffix + ".log.png"))
    status = "aborted (kept last good parameters)" if result.aborted else "ok"
    print(f"trained stage {args.stage}: {status}, best epoch "
          f"{result.best_epoch} (val {result.best_val:.6f}) -> {out}")
    return 0 if not result.aborted else RUNTIME_ERROR


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[k] for k in header])


def _write_curve(path, curve_mean, curve_std=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("frame", "mean_err", "std_err"))
        std = curve_std if curve_std is not None else np.zeros_like(curve_mean)
        for i, (m, s) in enumerate(zip(curve_mean, std)):
            writer.writerow((i, m, s))


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.ckpt)
    seqs = read_dataset(args.data)
    if seqs and seqs[0].n_targets != model.cfg.n_queries:
        raise UsageError(
            f"dataset has {seqs[0].n_targets} targets but the model tracks "
            f"{model.cfg.n_queries} queries")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    predictor = ev.model_predictor(model, seed=cfg.seed)
    rows: list[dict] = []
    curves: dict[str, tuple] = {}

    if args.protocol == "levels":
        rows += ev.protocol_levels(predictor, seqs, "quest")
        if args.baseline_sigma is not None:
            rows += ev.protocol_levels(
                lambda s: ev.noisy_flow_baseline(s, args.baseline_sigma, cfg.seed),
                seqs, f"flow({args.baseline_sigma})")
    elif args.protocol == "noise":
        rows += ev.protocol_noise(predictor, seqs, "quest", noise_seed=cfg.seed)
    elif args.protocol == "basic":
        rep = ev.evaluate_sequences(predictor, seqs)
        rows.append(ev.report_row("quest", rep))
        curves["quest"] = (rep.error_curve, None)
        if args.baseline_sigma is not None:
            brep = ev.evaluate_sequences(
                lambda s: ev.noisy_flow_baseline(s, args.baseline_sigma, cfg.seed),
                seqs)
            rows.append(ev.report_row(f"flow({args.baseline_sigma})", brep))
            curves[f"flow({args.baseline_sigma})"] = (brep.error_curve, None)
    else:
        raise UsageError(f"unknown protocol {args.protocol!r}")

    _write_rows(out / "report.csv", ev.REPORT_HEADER, rows)
    for method, (mean, std) in curves.items():
        safe = method.replace("(", "_").replace(")", "").replace(".", "p")
        _write_curve(out / f"curve_{safe}.csv", mean, std)
    write_provenance(out, cfg, inputs={"ckpt": args.ckpt, "data": args.data},
                     directory=True)
    if not args.no_figures:
        if curves:
            plots.save_drift_curves(curves, out / "drift_curves.png")
        for metric in ("ape", "drift100", "identity_acc"):
            plots.save_metric_bars(rows, metric, out / f"report_{metric}.png",
                                   group_by="method",
                                   label_by="level" if args.protocol == "levels"
                                   else "sigma")
    print(f"evaluated {len(seqs)} sequences -> {out / 'report.csv'}")
    return 0


def cmd_drift_curve(args) -> int:
    cfg = _load_config(args)
    seqs = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves: dict[str, tuple] = {}

    if args.ckpt:
        model = load_checkpoint(args.ckpt)
        rep = ev.evaluate_sequences(ev.model_predictor(model, seed=cfg.seed), seqs)
        curves["quest"] = (rep.error_curve, None)
    for sigma in args.sigmas:
        per_seed = []
        for s in range(args.baseline_seeds):
            rep = ev.evaluate_sequences(
                lambda q: ev.noisy_flow_baseline(q, sigma, seed=cfg.seed + s), seqs)
            per_seed.append(rep.error_curve)
        arr = np.stack(per_seed)
        curves[f"flow({sigma})"] = (arr.mean(axis=0), arr.std(axis=0))

    for method, (mean, std) in curves.items():
        safe = method.replace("(", "_").replace(")", "").replace(".", "p")
        _write_curve(out / f"curve_{safe}.csv", mean, std)
    write_provenance(out, cfg, inputs={"data": args.data, "ckpt": args.ckpt},
                     directory=True)
    if not args.no_figures:
        plots.save_drift_curves(curves, out / "drift_curves.png")
    print(f"wrote {len(curves)} drift curves -> {out}")
    return 0


ABLATION_SWEEPS = {
    "T": [("T=2", {"model.window": 2, "train.window": 2}),
          ("T=4", {"model.window": 4, "train.window": 4}),
          ("T=8", {"model.window": 8, "train.window": 8})],
    "K": [("K=4", {"model.n_queries": 4}),
          ("K=8", {"model.n_queries": 8}),
          ("K=16", {"model.n_queries": 16})],
    "losses": [("full", {}),
               ("no_queries", {"train.ablation": "no_queries"}),
               ("no_3d", {"train.ablation": "no_3d"}),
               ("no_smoothness", {"train.ablation": "no_smoothness"})],
}

ABLATE_HEADER = ("setting", "seed", "ape", "drift50", "drift100", "identity_acc")


def cmd_ablate(args) -> int:
    if args.sweep == "K":
        print("note: K sweep tracks the first n_queries targets of the dataset",
              file=sys.stderr)
    train_seqs = read_dataset(args.train_data)
    eval_seqs = read_dataset(args.eval_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, agg_rows = [], []
    for setting, extra in ABLATION_SWEEPS[args.sweep]:
        per_seed = {"ape": [], "drift50": [], "drift100": [], "identity_acc": []}
        for seed in args.seeds:
            overrides = [f"{k}={v}" for k, v in extra.items()]
            cfg = parse_config(getattr(args, "config", None),
                               (args.set or []) + overrides)
            cfg.seed = seed
            cfg.train.seed = seed
            if args.epochs is not None:
                cfg.train.max_epochs = args.epochs
                cfg.train.patience = min(cfg.train.patience, args.epochs)
            if cfg.model.n_queries > eval_seqs[0].n_targets:
                raise UsageError("n_queries exceeds dataset targets; regenerate "
                                 "data with more targets for the K sweep")
            result = train(train_seqs, cfg.model, cfg.train, cfg.loss)
            rep = ev.evaluate_sequences(
                _ablation_predictor(result.model, cfg, seed), eval_seqs)
            row = {"setting": setting, "seed": seed, "ape": rep.ape,
                   "drift50": rep.drift_at.get(50, float("nan")),
                   "drift100": rep.drift_at.get(100, float("nan")),
                   "identity_acc": rep.identity_acc}
            rows.append(row)
            for k in per_seed:
                per_seed[k].append(row[k])
            print(f"  {setting} seed={seed}: ape={rep.ape:.4f} "
                  f"id={rep.identity_acc:.3f}", flush=True)
        agg = {"setting": setting, "seed": "mean±std"}
        for k, vals in per_seed.items():
            mean, std = ev.mean_std(vals)
            agg[k] = f"{mean:.4f}±{std:.4f}"
        agg_rows.append(agg)
    _write_rows(out / "ablation.csv", ABLATE_HEADER, rows)
    _write_rows(out / "ablation_summary.csv", ABLATE_HEADER, agg_rows)
    cfg = parse_config(getattr(args, "config", None), args.set or [])
    write_provenance(out, cfg,
                     inputs={"train_data": args.train_data,
                             "eval_data": args.eval_data}, directory=True)
    if not args.no_figures:
        plots.save_metric_bars(rows, "ape", out / "ablation_ape.png",
                               group_by="setting", label_by="seed")
        plots.save_metric_bars(rows, "drift100", out / "ablation_drift100.png",
                               group_by="setting", label_by="seed")
    print(f"ablation sweep {args.sweep} -> {out / 'ablation.csv'}")
    return 0


def _ablation_predictor(model, cfg, seed):
    # eval must mirror the trained variant: the dataset provides targets in
    # query order; extra targets beyond n_queries are not tracked
    def predict(seq):
        if seq.n_targets != model.cfg.n_queries:
            trimmed = _trim_targets(seq, model.cfg.n_queries)
            return ev.model_predictor(model, seed=seed)(trimmed)
        return ev.model_predictor(model, seed=seed)(seq)
    return predict


def _trim_targets(seq, k):
    from dataclasses import replace
    return replace(seq, gt2d=seq.gt2d[:, :k], gt3d=seq.gt3d[:, :k],
                   vis=seq.vis[:, :k], flow3d=seq.flow3d[:, :k])


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quest",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="sectioned key=value file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, default=None,
                       help="root seed (falls back to QUEST_SEED, then config)")
        p.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering next to CSV outputs")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--level", type=int, choices=(1, 2, 3, 4), default=None)
    g.add_argument("--count", type=int, default=None, help="scenes to generate")
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--views", type=int, default=None,
                   help="cameras per scene (one sequence each)")
    g.add_argument("--noise", type=float, default=None,
                   help="feature noise sigma (fraction of range)")
    g.add_argument("--preset", choices=("standard", "stress_occlusion", "symmetric"),
                   default=None)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--init", default=None, help="checkpoint to start from "
                   "(required for stage 2)")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--ablation", choices=("full", "no_queries", "no_3d",
                                          "no_smoothness"), default=None)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=("basic", "levels", "noise"),
                   default="basic")
    e.add_argument("--baseline-sigma", type=float, default=None,
                   help="also report the noisy-flow baseline at this sigma")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--out", required=True)

    d = sub.add_parser("drift-curve", help="per-frame error curves")
    common(d)
    d.add_argument("--data", required=True)
    d.add_argument("--ckpt", default=None)
    d.add_argument("--sigmas", type=lambda s: [float(x) for x in s.split(",")],
                   default=[0.01, 0.02, 0.05])
    d.add_argument("--baseline-seeds", type=int, default=20,
                   help="baseline noise seeds averaged per sigma")
    d.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="reproduce the ablation grids")
    common(a)
    a.add_argument("--sweep", choices=("T", "K", "losses"), required=True)
    a.add_argument("--train-data", required=True)
    a.add_argument("--eval-data", required=True)
    a.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")],
                   default=[0, 1, 2])
    a.add_argument("--epochs", type=int, default=None,
                   help="cap max_epochs for quick sweeps")
    a.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "drift-curve": cmd_drift_curve,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return USAGE_ERROR
    except (SimError, TrainerError, ModelError, CheckpointError,
            DatasetFormatError, ev.EvalError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
