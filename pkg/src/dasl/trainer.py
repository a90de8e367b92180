"""Joint training with alternating target domains until validation AUC plateaus."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adam, Tape, Tensor, add, mul
from .data import (DOMAINS, DatasetError, DomainPairDataset, ExampleTable, eval_candidates,
                   sample_excluding)
from .dualmap import dual_loss, forward_loss, orthogonality_penalty
from .metrics import auc
from .model import DaslModel
from .repr import reconstruction_penalty
from .seeding import make_rng

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 50
    min_epochs: int = 4
    alpha: float = 0.1
    beta: float = 0.5
    lam: float = 1.0
    n_neg: int = 4
    proj_every: int = 10
    val_negatives: int = 9
    plateau_window: int = 3
    plateau_tol: float = 1e-3
    seed: int = 0


@dataclass
class TrainState:
    epoch: int = 0
    val_auc: dict[str, list[float]] = field(default_factory=lambda: {"A": [], "B": []})
    train_loss: list[float] = field(default_factory=list)
    ctr_loss: list[float] = field(default_factory=list)
    converged: bool = False
    convergence_epoch: int | None = None
    batches: dict[str, int] = field(default_factory=lambda: {"A": 0, "B": 0})
    wall_time: float = 0.0


def convergence_check(state: TrainState, window: int = 3, tol: float = 1e-3) -> bool:
    """True once every domain's validation AUC moved less than ``tol`` over ``window`` epochs."""
    doms = [d for d in DOMAINS if state.val_auc.get(d)]
    if not doms or any(len(state.val_auc[d]) < window + 1 for d in doms):
        return False
    return max(abs(state.val_auc[d][-1] - state.val_auc[d][-1 - window]) for d in doms) < tol


def _parameter_norms(model: DaslModel) -> dict[str, float]:
    return {name: float(np.linalg.norm(p.data)) for name, p in model.named_parameters()}


def _epoch_batches(ex: ExampleTable, rows: np.ndarray, batch_size: int, rng) -> list[tuple[str, np.ndarray]]:
    """Shuffle per domain, split both into the same number of batches, interleave A, B, A, B."""
    per_dom = {d: rng.permutation(rows[ex.domain[rows] == i]) for i, d in enumerate(DOMAINS)}
    present = [d for d in DOMAINS if per_dom[d].size]
    if not present:
        return []
    total = sum(per_dom[d].size for d in present)
    n_batches = max(1, math.ceil(total / (len(present) * batch_size)))
    n_batches = min(n_batches, min(per_dom[d].size for d in present))
    chunks = {d: np.array_split(per_dom[d], n_batches) for d in present}
    out = []
    for b in range(n_batches):
        for d in present:
            out.append((d, chunks[d][b]))
    return out


def batch_loss(model: DaslModel, ex: ExampleTable, rows: np.ndarray, candidates: np.ndarray,
               labels: np.ndarray, target: str, config: TrainConfig):
    """(total, ctr) loss tensors for one target-domain batch; call inside a Tape."""
    ctr = model.ctr_loss(ex, rows, candidates, labels, target)
    total = ctr
    users = ex.user[rows]
    if config.alpha:
        rec = reconstruction_penalty(
            [model.users(target), model.items(target)],
            [users, np.concatenate([candidates.reshape(-1), ex.hist[target][rows][ex.mask[target][rows]]])])
        if rec is not None:
            total = add(total, mul(rec, config.alpha))
    if model.ablation.dual_embedding:
        ov = np.unique(users[model.overlap_mask[users]])
        if ov.size and config.beta:
            W_A = model.user_A.lookup(ov)
            W_B = model.user_B.lookup(ov)
            pair = add(forward_loss(model.dual_map, W_A, W_B), dual_loss(model.dual_map, W_A, W_B))
            total = add(total, mul(pair, config.beta / rows.size))
        if config.lam:
            total = add(total, mul(orthogonality_penalty(model.dual_map), config.lam))
    return total, ctr


def train(model: DaslModel, dataset: DomainPairDataset, examples: ExampleTable,
          config: TrainConfig | None = None, train_rows: np.ndarray | None = None,
          val_rows: np.ndarray | None = None) -> TrainState:
    """Train ``model`` in place and return the per-epoch record.

    Each epoch draws fresh negatives, then runs alternating A/B mini-batches
    of ``loss = BCE + alpha * reconstruction + beta * (forward + dual map
    losses) / batch + lam * orthogonality penalty``, each followed by an Adam
    step.  The map is projected back onto the orthogonal group every
    ``proj_every`` steps and at the end of every epoch.
    """
    config = config or TrainConfig()
    started = time.perf_counter()
    if train_rows is None:
        train_rows = np.arange(len(examples))
    train_rows = np.asarray(train_rows, dtype=np.int64)
    if model.ablation.cross_domain:
        for i, d in enumerate(DOMAINS):
            if not np.any(examples.domain[train_rows] == i):
                raise DatasetError(f"no training examples in domain {d}")
    model.set_overlap(dataset.overlap.rows)
    blocked = {d: dataset.interacted(d) for d in DOMAINS}
    params = model.parameters()
    if not model.ablation.dual_embedding:
        params = [p for p in params if p is not model.dual_map.X]
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    state = TrainState()

    val_cands = val_labels = None
    if val_rows is not None and len(val_rows):
        val_rows = np.asarray(val_rows, dtype=np.int64)
        val_cands = eval_candidates(examples.subset(val_rows), dataset, config.val_negatives,
                                    make_rng(config.seed, "validation"))
        val_labels = np.zeros(val_cands.shape)
        val_labels[:, 0] = 1.0

    steps = 0
    for epoch in range(config.max_epochs):
        rng = make_rng(config.seed, "epoch", epoch)
        cands = np.empty((examples.user.size, 1 + config.n_neg), dtype=np.int64)
        for i, d in enumerate(DOMAINS):
            rows = train_rows[examples.domain[train_rows] == i]
            if rows.size:
                cands[rows, 0] = examples.item[rows]
                cands[rows, 1:] = sample_excluding(blocked[d][examples.user[rows]], config.n_neg, rng)
        labels = np.zeros((1, 1 + config.n_neg))
        labels[0, 0] = 1.0
        total_sum = ctr_sum = 0.0
        n_batches = 0
        for target, rows in _epoch_batches(examples, train_rows, config.batch_size, rng):
            opt.zero_grad()
            with Tape() as tape:
                total, ctr = batch_loss(model, examples, rows, cands[rows],
                                        np.repeat(labels, rows.size, axis=0), target, config)
            if not math.isfinite(total.item()):
                norms = _parameter_norms(model)
                worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
                raise DivergenceError(f"loss became {total.item()} at epoch {epoch}; "
                                      f"largest parameter norms: {worst}")
            tape.backward(total)
            opt.step()
            steps += 1
            state.batches[target] += 1
            total_sum += total.item()
            ctr_sum += ctr.item()
            n_batches += 1
            if model.ablation.dual_embedding and config.proj_every and steps % config.proj_every == 0:
                model.dual_map.project_()
        if model.ablation.dual_embedding:
            model.dual_map.project_()
        state.epoch = epoch + 1
        state.train_loss.append(total_sum / max(n_batches, 1))
        state.ctr_loss.append(ctr_sum / max(n_batches, 1))
        if val_cands is not None:
            scores = model.predict(examples, val_rows, val_cands)
            for i, d in enumerate(DOMAINS):
                sel = examples.domain[val_rows] == i
                if sel.any():
                    state.val_auc[d].append(auc(scores[sel].reshape(-1), val_labels[sel].reshape(-1)))
        log.info("epoch %d: loss %.4f ctr %.4f val auc %s", epoch + 1, state.train_loss[-1],
                 state.ctr_loss[-1], {d: round(v[-1], 4) for d, v in state.val_auc.items() if v})
        if (state.epoch >= config.min_epochs
                and convergence_check(state, config.plateau_window, config.plateau_tol)):
            state.converged = True
            state.convergence_epoch = state.epoch
            break
    state.wall_time = time.perf_counter() - started
    return state


def run_manifest(config: dict, state: TrainState, dataset: DomainPairDataset, model: DaslModel) -> dict:
    return {
        "config": config,
        "variant": model.variant,
        "seed": model.seed,
        "dataset_fingerprint": dataset.fingerprint,
        "epochs": state.epoch,
        "train_loss": state.train_loss,
        "ctr_loss": state.ctr_loss,
        "val_auc": state.val_auc,
        "converged": state.converged,
        "convergence_epoch": state.convergence_epoch,
        "batches": state.batches,
        "orthogonality_drift": model.dual_map.drift(),
        "wall_time_s": state.wall_time,
    }
