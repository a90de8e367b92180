"""Five-fold cross-validation, metric reports and the ablation table."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (DOMAINS, DomainPairDataset, ExampleTable, build_examples, eval_candidates,
                   fold_split, split_indices)
from .metrics import auc, hit_rates
from .model import VARIANTS, AblationConfig, DaslModel, ModelConfig, canonical_variant
from .repr import feature_matrix
from .seeding import make_rng
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

N_FOLDS = 5
METRICS = ("auc", "hr_at_10")


class ReportError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_folds: int = N_FOLDS
    test_negatives: int = 99
    k: int = 10
    seed: int = 0
    fold_seed: int = 42
    jobs: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class MetricsReport:
    """Per-fold and aggregate AUC / HR@10 for one variant.

    ``folds`` holds one ``{domain: {"auc": .., "hr_at_10": ..}}`` dict per
    fold; ``aggregate`` is always their mean.
    """

    variant: str
    seed: int
    fingerprint: str
    folds: list[dict[str, dict[str, float]]]
    epochs: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.folds) != N_FOLDS:
            raise ReportError(f"a report needs {N_FOLDS} folds, got {len(self.folds)}")

    @property
    def aggregate(self) -> dict[str, dict[str, float]]:
        return {d: {m: float(np.mean([f[d][m] for f in self.folds])) for m in METRICS}
                for d in self.folds[0]}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["aggregate"] = self.aggregate
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        stored = raw.pop("aggregate", None)
        report = cls(**raw)
        if stored is not None:
            for d, vals in report.aggregate.items():
                for m, v in vals.items():
                    if abs(stored[d][m] - v) > 1e-12:
                        raise ReportError(f"aggregate {d}/{m} = {stored[d][m]} is not the fold mean {v}")
        return report


def evaluate_fold(model: DaslModel, dataset: DomainPairDataset, examples: ExampleTable,
                  test_rows: np.ndarray, n_neg: int = 99, k: int = 10,
                  rng: np.random.Generator | None = None,
                  candidates: np.ndarray | None = None) -> dict[str, dict[str, float]]:
    """AUC and HR@k per domain over 1 positive + ``n_neg`` sampled negatives per test example.

    AUC pools all candidate scores of a domain; HR@k averages over examples.
    """
    test_rows = np.asarray(test_rows, dtype=np.int64)
    if candidates is None:
        candidates = eval_candidates(examples.subset(test_rows), dataset, n_neg,
                                     rng if rng is not None else make_rng(0, "test"))
    scores = model.predict(examples, test_rows, candidates)
    labels = np.zeros(candidates.shape)
    labels[:, 0] = 1.0
    out = {}
    for i, d in enumerate(DOMAINS):
        sel = examples.domain[test_rows] == i
        if not sel.any():
            continue
        out[d] = {"auc": auc(scores[sel].reshape(-1), labels[sel].reshape(-1)),
                  "hr_at_10": float(hit_rates(candidates[sel], scores[sel], 0, k).mean())}
    return out


def model_features(dataset: DomainPairDataset, model_config: ModelConfig) -> dict | None:
    """Encoder inputs for autoencoder mode; None for direct embeddings."""
    if model_config.repr_mode != "autoencoder":
        return None
    return {(kind, d): feature_matrix(dataset, kind, d) for kind in ("user", "item") for d in DOMAINS}


def build_model(dataset: DomainPairDataset, variant: str, model_config: ModelConfig,
                seed: int) -> DaslModel:
    return DaslModel(dataset.n_users, {d: dataset.n_items(d) for d in DOMAINS}, model_config,
                     variant, seed, model_features(dataset, model_config))


def _run_fold(dataset: DomainPairDataset, examples: ExampleTable, variant: str,
              config: EvalConfig, fold: int):
    train_rows, val_rows, test_rows = split_indices(examples.fold, fold, config.n_folds)
    model = build_model(dataset, variant, config.model, config.seed)
    state = train(model, dataset, examples, config.train, train_rows, val_rows)
    cands = eval_candidates(examples.subset(test_rows), dataset, config.test_negatives,
                            make_rng(config.seed, "test", fold))
    metrics = evaluate_fold(model, dataset, examples, test_rows, config.test_negatives,
                            config.k, candidates=cands)
    log.info("%s fold %d: %s after %d epochs", variant, fold, metrics, state.epoch)
    return metrics, state.epoch


def prepare_examples(dataset: DomainPairDataset, config: EvalConfig) -> ExampleTable:
    examples = build_examples(dataset, config.model.history_len)
    fold_split(examples, config.n_folds, seed=config.fold_seed)
    return examples


def cross_validate(dataset: DomainPairDataset, ablation: AblationConfig | str = "DASL",
                   config: EvalConfig | None = None,
                   examples: ExampleTable | None = None) -> MetricsReport:
    """Train and test one variant on every fold; deterministic under ``config.seed``."""
    config = config or EvalConfig()
    variant = ablation.variant if isinstance(ablation, AblationConfig) else canonical_variant(ablation)
    if examples is None:
        examples = prepare_examples(dataset, config)
    jobs = [(dataset, examples, variant, config, f) for f in range(config.n_folds)]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*jobs)))
    else:
        results = [_run_fold(*j) for j in jobs]
    return MetricsReport(variant, config.seed, dataset.fingerprint,
                         [m for m, _ in results], [e for _, e in results])


def ablation_suite(dataset: DomainPairDataset, config: EvalConfig | None = None
                   ) -> dict[str, MetricsReport]:
    """All four variants on the same folds, seeds and test candidates."""
    config = config or EvalConfig()
    examples = prepare_examples(dataset, config)
    return {v: cross_validate(dataset, v, config, examples) for v in VARIANTS}


def format_table(reports) -> str:
    """Aligned text table: one row per variant, domain/metric columns.

    Accepts a report, a mapping of name to report, or a mapping of name to a
    bare ``{domain: {metric: value}}`` dict.
    """
    if isinstance(reports, MetricsReport):
        reports = {reports.variant: reports}
    aggs = {name: r.aggregate if isinstance(r, MetricsReport) else r for name, r in reports.items()}
    domains = [d for d in DOMAINS if any(d in a for a in aggs.values())]
    head = ["Algorithm"] + [f"{d} {label}" for d in domains for label in ("AUC", "HR@10")]
    rows = []
    for name, agg in aggs.items():
        cells = [name]
        for d in domains:
            cells += [f"{agg[d][m]:.4f}" if d in agg else "-" for m in METRICS]
        rows.append(cells)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]

    def line(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                         for i, (c, w) in enumerate(zip(cells, widths)))

    sep = "-" * len(line(head))
    return "\n".join([line(head), sep] + [line(r) for r in rows]) + "\n"
