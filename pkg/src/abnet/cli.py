"""Command-line entry point: gen-data, train, eval, merge.

Exit codes: 0 success, 2 configuration error, 3 dataset generation
failure, 4 training failure, 5 evaluation failure (all models).
Every command writes a manifest.json next to its artifacts.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import expert, harness
from . import model as mdl
from .config import ConfigError, load_config, worker_count, write_manifest
from .tasks import build_task

log = logging.getLogger("abnet")

EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_TRAINING = 4
EXIT_EVAL = 5


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abnet",
                                     description="barrier-constrained safe imitation learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an expert demonstration dataset")
    p.add_argument("--task", choices=["robot2d", "arm2"])
    p.add_argument("--config", help="TOML config overriding task defaults")
    p.add_argument("--trajectories", type=int, help="override the configured count")
    _add_common(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--mode", choices=["oneshot", "scalable", "baseline"], default="oneshot")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TOML config overriding task defaults")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--epochs", type=int, help="override configured epochs")
    _add_common(p)

    p = sub.add_parser("eval", help="closed-loop benchmark of one or more models")
    p.add_argument("--model", required=True,
                   help="checkpoint path(s), comma separated; the literal name "
                        "'expert' adds the expert controller as a row")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--horizon", type=int, help="override configured eval horizon")
    p.add_argument("--config", help="task config (required when only 'expert' is listed)")
    p.add_argument("--data", help="held-out dataset for the MSE metric "
                                  "(default: freshly generated expert data)")
    _add_common(p)

    p = sub.add_parser("merge", help="merge two trained models")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--wa", type=float,
                   help="weight of model A (default: from held-out losses)")
    _add_common(p)
    return parser


def cmd_gen_data(args) -> int:
    try:
        cfg = load_config(args.task, args.config)
        task = build_task(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        ds = expert.generate_dataset(task, args.seed, trajectories=args.trajectories)
    except (expert.SamplingExhausted, Exception) as exc:
        if isinstance(exc, expert.SamplingExhausted):
            log.error("generation failed: %s", exc)
            return EXIT_GENERATION
        raise
    min_b = expert.dataset_min_b(task, ds)
    if min_b < 0:
        log.error("generated dataset violates safety: min b = %g", min_b)
        return EXIT_GENERATION
    out = Path(args.out)
    path = expert.save_dataset(ds, out / "dataset.jsonl")
    write_manifest(out, "gen-data", cfg, args.seed,
                   extra={"records": ds.n_records, "trajectories": ds.n_trajectories,
                          "min_b": min_b})
    print(f"records: {ds.n_records}")
    print(f"trajectories: {ds.n_trajectories}")
    print(f"min_b: {min_b:.6f}")
    print(f"dataset: {path}")
    return 0


def _load_dataset_for_task(path, task):
    ds = expert.load_dataset(path)
    if ds.task_id != task.task_id or ds.config_hash != task.config_hash:
        raise ConfigError(
            f"dataset {path} was generated for {ds.task_id}/{ds.config_hash}, "
            f"but the resolved config is {task.task_id}/{task.config_hash}")
    return ds


def cmd_train(args) -> int:
    try:
        resumed = None
        optimizer = None
        if args.resume:
            resumed, task_cfg, optimizer = mdl.load_checkpoint(args.resume)
            cfg = task_cfg if args.config is None else load_config(None, args.config)
        else:
            cfg = load_config(None, args.config) if args.config else None
        if cfg is None:
            # infer the task from the dataset header against built-in defaults
            probe = expert.load_dataset(args.data)
            cfg = load_config(probe.task_id)
        task = build_task(cfg)
        dataset = _load_dataset_for_task(args.data, task)
    except (ConfigError, mdl.IncompatibleTasks, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    train_cfg = dict(cfg["train"])
    if args.epochs is not None:
        train_cfg["epochs"] = args.epochs
        train_cfg["scalable_epochs"] = args.epochs
    out = Path(args.out)
    try:
        if args.mode == "baseline":
            policy = resumed if resumed is not None else mdl.build_baseline(task, args.seed)
            report = mdl.train_baseline(policy, task, dataset, train_cfg, seed=args.seed)
            trained = policy
        elif args.mode == "scalable":
            trained, report = mdl.train_scalable(task, dataset, train_cfg, h=args.heads,
                                                 seed=args.seed, workers=worker_count())
        else:
            trained = resumed if resumed is not None else mdl.build_model(task, args.heads, args.seed)
            optimizer = optimizer or None
            from .autodiff import AdamState
            opt = optimizer or AdamState(lr=float(train_cfg.get("lr", 1e-3)))
            report = mdl.train_oneshot(trained, task, dataset, train_cfg,
                                       seed=args.seed, optimizer=opt)
            optimizer = opt
    except (mdl.EmptyDataset, Exception) as exc:
        if isinstance(exc, (mdl.EmptyDataset, mdl.NonPositiveLoss)):
            log.error("training failed: %s", exc)
            return EXIT_TRAINING
        raise
    path = mdl.save_checkpoint(trained, out / "model.json", task.config, optimizer=optimizer,
                               extra={"mode": args.mode, "loss_history": report.loss_history,
                                      "infeasible_samples": report.infeasible_samples})
    write_manifest(out, "train", cfg, args.seed,
                   extra={"mode": args.mode, "heads": getattr(trained, "h", 1),
                          "steps": report.steps,
                          "infeasible_samples": report.infeasible_samples})
    print(f"model: {path}")
    print(f"steps: {report.steps}")
    print(f"infeasible_samples: {report.infeasible_samples}")
    if isinstance(trained, mdl.AbnetModel):
        print(f"weights: {np.array2string(trained.weights, precision=4)}")
    return 0


def cmd_eval(args) -> int:
    paths = [p for p in args.model.split(",") if p]
    try:
        policies = {}
        task = None
        cfg = None
        want_expert = False
        for p in paths:
            if p == "expert":
                want_expert = True
                continue
            name = Path(p).stem if Path(p).stem != "model" else Path(p).parent.name
            policy, task_cfg, _ = mdl.load_checkpoint(p)
            if task is None:
                cfg = task_cfg
                task = build_task(task_cfg)
            if policy.config_hash != task.config_hash:
                raise mdl.IncompatibleTasks(
                    f"{p} was trained for another task configuration")
            policies[name] = policy
        if want_expert:
            if task is None:
                if not args.config:
                    raise ConfigError("--model expert needs --config or a checkpoint "
                                      "to determine the task")
                cfg = load_config(None, args.config)
                task = build_task(cfg)
            policies["expert"] = expert.ExpertPolicy(task)
        if not policies:
            raise ConfigError("no models to evaluate")
    except (ConfigError, mdl.IncompatibleTasks, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    horizon = args.horizon or int(cfg["eval"]["horizon"])
    if args.data:
        try:
            heldout = _load_dataset_for_task(args.data, task)
        except ConfigError as exc:
            log.error("%s", exc)
            return EXIT_CONFIG
    else:
        heldout = expert.generate_dataset(task, seed=args.seed + 990_001, trajectories=10)
    reports, trajectories = harness.benchmark(policies, task, args.runs, horizon,
                                              args.noise, args.seed, heldout,
                                              workers=worker_count())
    out = Path(args.out)
    harness.write_reports(out, reports, trajectories)
    write_manifest(out, "eval", cfg, args.seed,
                   extra={"models": paths, "runs": args.runs, "noise": args.noise,
                          "horizon": horizon})
    failed = sum(rep.failed for rep in reports.values())
    for name, rep in reports.items():
        if rep.failed:
            print(f"{name}: FAILED")
        else:
            print(f"{name}: mse={rep.mse_mean:.6g} safety={rep.safety:.4f} "
                  f"conser={rep.conser_mean:.4f}+-{rep.conser_std:.4f} "
                  f"u1={rep.u_uncertainty[0]:.4f} u2={rep.u_uncertainty[1]:.4f} "
                  f"crashes={rep.crashes}")
    print(f"report: {out / 'report.csv'}")
    return EXIT_EVAL if failed == len(policies) else 0


def cmd_merge(args) -> int:
    try:
        model_a, cfg_a, _ = mdl.load_checkpoint(args.a)
        model_b, _, _ = mdl.load_checkpoint(args.b)
        if not isinstance(model_a, mdl.AbnetModel) or not isinstance(model_b, mdl.AbnetModel):
            raise mdl.IncompatibleTasks("merge requires two barrier models")
        task = build_task(cfg_a)
        if args.wa is not None:
            if not 0.0 <= args.wa <= 1.0:
                raise ConfigError(f"--wa must lie in [0, 1], got {args.wa}")
            mix = (args.wa, 1.0 - args.wa)
        else:
            val = expert.generate_dataset(task, seed=args.seed + 770_001, trajectories=5)
            losses = [mdl.validation_mse(m, task, val) for m in (model_a, model_b)]
            mix = tuple(mdl.fuse_by_loss(losses))
            print(f"validation losses: {losses[0]:.6g} {losses[1]:.6g}")
        merged = mdl.merge(model_a, model_b, mix)
    except (ConfigError, mdl.IncompatibleTasks, mdl.NonPositiveLoss, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = Path(args.out)
    path = mdl.save_checkpoint(merged, out / "model.json", task.config,
                               extra={"merged_from": [args.a, args.b], "mix": list(mix)})
    write_manifest(out, "merge", cfg_a, args.seed,
                   extra={"mix": list(mix), "heads": merged.h})
    print(f"mix: {mix[0]:.6f} {mix[1]:.6f}")
    print(f"weights: {np.array2string(merged.weights, precision=5)}")
    print(f"model: {path}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train,
                "eval": cmd_eval, "merge": cmd_merge}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
