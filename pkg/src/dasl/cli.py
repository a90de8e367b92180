"""``dasl`` command line: synth, train, eval, gradcheck.

Exit status is 0 on success.  Failures print one line
``error: <ErrorClass>: <message>`` to stderr and exit 2 for configuration
problems, 1 for everything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import (ConfigError, DatasetError, DomainPairDataset, IngestionError, SamplingError,
                   eval_candidates, load_events, split_indices, synthesize, synthetic_dataset,
                   write_snapshot)
from .dualmap import ProjectionError
from .evaluation import (EvalConfig, MetricsReport, ablation_suite, build_model, cross_validate,
                         evaluate_fold, format_table, model_features, prepare_examples)
from .gradcheck import run_gradchecks
from .metrics import UndefinedMetricError
from .seeding import make_rng
from .trainer import DivergenceError, run_manifest, train

log = logging.getLogger("dasl")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
CONFIG_ERRORS = (ConfigError,)
RUN_ERRORS = (CheckpointError, IngestionError, DatasetError, SamplingError, DivergenceError,
              ProjectionError, UndefinedMetricError, OSError)


def _setup_logging() -> None:
    level = os.environ.get("DASL_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"DASL_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.command == "synth":
            cfg.synth.seed = args.seed
        else:
            cfg.seed = args.seed
    if getattr(args, "ablation", None):
        cfg.ablation = args.ablation
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def eval_config(cfg: RunConfig) -> EvalConfig:
    trainer = dataclasses.replace(cfg.trainer, seed=cfg.seed)
    return EvalConfig(cfg.eval.n_folds, cfg.eval.test_negatives, cfg.eval.k, cfg.seed,
                      cfg.eval.fold_seed, cfg.eval.jobs, cfg.model, trainer)


def load_dataset(cfg: RunConfig) -> DomainPairDataset:
    if cfg.data.source == "synthetic":
        return synthetic_dataset(cfg.synth, cfg.data.threshold)[0]
    path = Path(cfg.data.source)
    if path.is_dir():
        path = path / "events.tsv"
    return DomainPairDataset.from_records(load_events(path), cfg.data.threshold)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(path)


def cmd_synth(cfg: RunConfig) -> int:
    records, _ = synthesize(cfg.synth)
    manifest = write_snapshot(cfg.out, records, {"synth": dataclasses.asdict(cfg.synth),
                                                 "fold_seed": cfg.eval.fold_seed,
                                                 "config": cfg.to_text()})
    print(Path(cfg.out) / "events.tsv")
    print(Path(cfg.out) / "manifest.json")
    log.info("wrote %d records, %d overlap users", manifest["total_records"], manifest["overlap_users"])
    return 0


def cmd_train(cfg: RunConfig) -> int:
    dataset = load_dataset(cfg)
    ecfg = eval_config(cfg)
    examples = prepare_examples(dataset, ecfg)
    train_rows, val_rows, test_rows = split_indices(examples.fold, cfg.eval.fold, cfg.eval.n_folds)
    model = build_model(dataset, cfg.ablation, cfg.model, cfg.seed)
    state = train(model, dataset, examples, ecfg.train, train_rows, val_rows)
    cands = eval_candidates(examples.subset(test_rows), dataset, cfg.eval.test_negatives,
                            make_rng(cfg.seed, "test", cfg.eval.fold))
    metrics = evaluate_fold(model, dataset, examples, test_rows, cfg.eval.test_negatives,
                            cfg.eval.k, candidates=cands)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model)
    print(out / "model.ckpt")
    manifest = run_manifest(cfg.to_dict(), state, dataset, model)
    manifest.update({"config_text": cfg.to_text(), "fold": cfg.eval.fold, "test_metrics": metrics})
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None, suite: bool) -> int:
    dataset = load_dataset(cfg)
    ecfg = eval_config(cfg)
    out = Path(cfg.out)
    if suite:
        reports = ablation_suite(dataset, ecfg)
        for name, rep in reports.items():
            _write(out / f"report_{name}.json", rep.to_json())
        table = format_table(reports)
    elif checkpoint:
        expected = build_model(dataset, cfg.ablation, cfg.model, cfg.seed).dims()
        model = load_checkpoint(checkpoint, expected, model_features(dataset, cfg.model))
        examples = prepare_examples(dataset, ecfg)
        _, _, test_rows = split_indices(examples.fold, cfg.eval.fold, cfg.eval.n_folds)
        cands = eval_candidates(examples.subset(test_rows), dataset, cfg.eval.test_negatives,
                                make_rng(cfg.seed, "test", cfg.eval.fold))
        metrics = evaluate_fold(model, dataset, examples, test_rows, cfg.eval.test_negatives,
                                cfg.eval.k, candidates=cands)
        body = {"variant": model.variant, "seed": cfg.seed, "fold": cfg.eval.fold,
                "fingerprint": dataset.fingerprint, "metrics": metrics}
        _write(out / "eval.json", json.dumps(body, indent=2, sort_keys=True) + "\n")
        table = format_table({model.variant: metrics})
    else:
        rep: MetricsReport = cross_validate(dataset, cfg.ablation, ecfg)
        _write(out / f"report_{rep.variant}.json", rep.to_json())
        table = format_table(rep)
    _write(out / "table.txt", table)
    print(table, end="")
    return 0


def cmd_gradcheck(cfg: RunConfig, instances: int) -> int:
    report = run_gradchecks(instances, cfg.seed)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} gradcheck in {report.seconds:.1f}s")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="run seed (generator seed for synth)")
    common.add_argument("--out", help="output directory")
    variant = argparse.ArgumentParser(add_help=False)
    variant.add_argument("--ablation", choices=["dasl", "de", "da", "single-domain"])
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common, variant], help="train one fold, write a checkpoint")
    ev = sub.add_parser("eval", parents=[common, variant], help="cross-validate or score a checkpoint")
    ev.add_argument("--checkpoint", help="evaluate this checkpoint on the configured test fold")
    ev.add_argument("--suite", action="store_true", help="run all four ablation variants")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--instances", type=int, default=20)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.suite)
        return cmd_gradcheck(cfg, args.instances)
    except CONFIG_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except RUN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
