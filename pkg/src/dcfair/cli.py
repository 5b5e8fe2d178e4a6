"""``dcfair`` command line: inject-bias, tune, train, sweep, evaluate, pareto."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .config import ExperimentConfig, load_config
from .data import (LabeledDataset, Preprocessor, flip_labels, load_csv_with_report,
                   ranking_scores, save_csv, split)
from .errors import DcfairError
from .experiment import emit_report, grid_search, read_records, sweep
from .metrics import evaluate, export_curves
from .model import load_checkpoint, save_checkpoint
from .training import calibrated_train, predict, train

log = logging.getLogger("dcfair")

SPLITS = ("train", "validation", "test", "all")


def prepare_dataset(cfg: ExperimentConfig, preprocessor: Preprocessor | None = None
                    ) -> tuple[LabeledDataset, float | None, Preprocessor]:
    """Load the configured CSV and apply the first configured bias rate, if any.

    Returns the dataset, the applied rate and the fitted preprocessor.
    """
    ds, report = load_csv_with_report(cfg.dataset_path, cfg.schema, preprocessor)
    log.info("loaded %s: %d rows kept, %d dropped, %d encoded columns", report.path,
             len(ds), report.rows_dropped, report.encoding_width)
    if cfg.bias is None:
        return ds, None, report.preprocessor
    scores = ranking_scores(ds, cfg.bias)
    biased, bias_report = flip_labels(ds, scores, cfg.bias.group, cfg.bias.rate)
    log.info("flipped %d labels in group s=%d", bias_report.n_flipped, cfg.bias.group)
    return biased, cfg.bias.rate, report.preprocessor


def prepare_splits(cfg: ExperimentConfig, preprocessor: Preprocessor | None = None):
    ds, rate, pre = prepare_dataset(cfg, preprocessor)
    return split(ds, cfg.split), rate, ds, pre


def _seed(cfg: ExperimentConfig):
    seed = cfg.seeds[0]
    return replace(cfg.mlp, init_seed=seed), replace(cfg.train, shuffle_seed=seed)


def cmd_inject_bias(cfg: ExperimentConfig, args) -> int:
    if cfg.bias is None:
        raise DcfairError("config has no bias section")
    ds, report = load_csv_with_report(cfg.dataset_path, cfg.schema)
    scores = ranking_scores(ds, cfg.bias)
    cfg.out.mkdir(parents=True, exist_ok=True)
    for rate in cfg.bias_rates:
        biased, rep = flip_labels(ds, scores, cfg.bias.group, rate)
        stem = f"{cfg.name}_r{rate:.2f}"
        save_csv(biased, cfg.out / f"{stem}.csv")
        (cfg.out / f"{stem}_bias_report.txt").write_text(rep.summary())
        print(f"{stem}: flipped {rep.n_flipped} of {rep.n_candidates} candidates")
    return 0


def cmd_tune(cfg: ExperimentConfig, args) -> int:
    (tr, va, _), _, _, _ = prepare_splits(cfg)
    result = grid_search(tr, va, cfg.search, _seed(cfg)[1], jobs=cfg.jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    result.to_csv(cfg.out / "leaderboard.csv")
    with open(cfg.out / "best_mlp.yaml", "w") as fh:
        yaml.safe_dump({"mlp": result.best.to_dict()}, fh, sort_keys=True)
    print(f"best: {result.best.to_dict()}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    (tr, va, te), _, _, pre = prepare_splits(cfg)
    mlp, tcfg = _seed(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    if tcfg.mode.kind == "decision_centric" and tcfg.mode.k_pct is None:
        run = calibrated_train(tr, va, mlp, tcfg)
        model, history = run.model, run.history
        run.baseline_history.to_csv(out / "baseline_history.csv")
        print(f"calibrated k_pct={run.k_pct!r}")
    else:
        model, history = train(tr, va, mlp, tcfg)
    history.to_csv(out / "history.csv")
    save_checkpoint(out / "model.npz", model.params, pre,
                    {"train_config": model.train_config.to_dict(), "dataset": cfg.name})
    scores = predict(model, te)
    report = evaluate(scores, cfg.tau)
    report.write(out / "metrics.txt")
    export_curves(scores, cfg.tau, out / "test")
    sys.stdout.write(report.to_kv())
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    (tr, va, te), rate, _, _ = prepare_splits(cfg)
    records = sweep(cfg.sweep_spec(rate), tr, va, te, cfg.out, jobs=cfg.jobs, resume=args.resume)
    files = emit_report(records, cfg.out)
    n_failed = sum(not r.ok for r in records)
    print(f"{len(records)} records, {n_failed} failed -> {files.records}")
    return 1 if n_failed else 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    if not args.checkpoint:
        raise DcfairError("evaluate needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    (tr, va, te), _, ds, _ = prepare_splits(cfg, ckpt.preprocessor)
    target = {"train": tr, "validation": va, "test": te, "all": ds}[args.split]
    report = evaluate(predict(ckpt.params, target), cfg.tau)
    cfg.out.mkdir(parents=True, exist_ok=True)
    report.write(cfg.out / "metrics.txt")
    sys.stdout.write(report.to_kv())
    return 0


def cmd_pareto(cfg: ExperimentConfig, args) -> int:
    path = Path(args.records) if args.records else cfg.out / "records.csv"
    records = read_records(path)
    files = emit_report(records, cfg.out)
    for metric, front_path in files.fronts.items():
        print(f"{metric}: {front_path}")
    return 1 if files.failures else 0


COMMANDS = {
    "inject-bias": cmd_inject_bias,
    "tune": cmd_tune,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "pareto": cmd_pareto,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcfair", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--tau", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--mode", choices=("global", "decision-centric", "none"))
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help=f"worker processes (default {os.cpu_count()})")
        p.add_argument("--resume", action="store_true")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="model .npz written by train")
            p.add_argument("--split", choices=SPLITS, default="test")
        if name == "pareto":
            p.add_argument("--records", help="records.csv (default <out>/records.csv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        jobs = args.jobs if args.jobs is not None else (
            cfg.jobs if "jobs" in (cfg.raw.get("sweep") or {}) else os.cpu_count() or 1)
        cfg = cfg.with_overrides(tau=args.tau, lam=args.lam, mode=args.mode, seed=args.seed,
                                 jobs=jobs, out=args.out)
        return COMMANDS[args.command](cfg, args)
    except (DcfairError, OSError, yaml.YAMLError) as exc:
        print(f"dcfair {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
