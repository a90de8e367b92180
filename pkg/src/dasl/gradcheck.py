"""Finite-difference checks for every differentiable component.

Each registered check draws ``n_instances`` seeded random problems, compares
tape gradients with central differences and keeps the worst error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, check_gradients
from .dualattn import AttentionBlock, PredictionHead, dual_attention, score_candidate
from .dualmap import dual_loss, forward_loss, orthogonality_penalty
from .repr import Autoencoder, reconstruction_loss
from .seeding import make_rng
from .seq import GruCell, encode_batch, encode_sequence

RTOL = 1e-4


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar <out, w>: a generic loss that exercises every output entry."""
    return ad.tsum(ad.mul(out, Tensor(w)))


# Each case builder returns (loss_fn, params) for one seeded instance.

def _autodiff_cases(rng):
    m, n, k = (int(v) for v in rng.integers(2, 5, size=3))
    a, b = _param(rng, (m, n)), _param(rng, (m, n))
    bias = _param(rng, (n,))
    w = _param(rng, (n, k))
    batch = _param(rng, (2, m, n))
    table = _param(rng, (6, n))
    idx = rng.integers(0, 6, size=(m, 3))
    mask = rng.random((m, n)) < 0.7
    mask[:, 0] = True
    y = (rng.random((m, n)) < 0.5).astype(np.float64)
    probs = Tensor(rng.uniform(0.05, 0.95, size=(m, n)), requires_grad=True)
    draws = {}

    def wt(shape):
        # fixed per shape so repeated loss evaluations see the same weights
        return draws.setdefault(shape, rng.standard_normal(shape))

    return {
        "add": (lambda: _weighted(ad.add(a, b), wt((m, n))), [a, b]),
        "sub": (lambda: _weighted(ad.sub(a, b), wt((m, n))), [a, b]),
        "mul": (lambda: _weighted(ad.mul(a, b), wt((m, n))), [a, b]),
        "add_bias": (lambda: _weighted(ad.add_bias(a, bias), wt((m, n))), [a, bias]),
        "sigmoid": (lambda: _weighted(ad.sigmoid(a), wt((m, n))), [a]),
        "tanh": (lambda: _weighted(ad.tanh(a), wt((m, n))), [a]),
        "matmul": (lambda: _weighted(ad.matmul(a, w), wt((m, k))), [a, w]),
        "matmul_batched": (lambda: _weighted(ad.matmul(batch, w), wt((2, m, k))), [batch, w]),
        "transpose": (lambda: _weighted(ad.transpose(a), wt((n, m))), [a]),
        "concat": (lambda: _weighted(ad.concat_features(a, b), wt((m, 2 * n))), [a, b]),
        "gather": (lambda: _weighted(ad.gather_rows(table, idx), wt((m, 3, n))), [table]),
        "take_step": (lambda: _weighted(ad.take_step(batch, 1), wt((2, n))), [batch]),
        "repeat_rows": (lambda: _weighted(ad.repeat_rows(a, 3), wt((m, 3, n))), [a]),
        "softmax": (lambda: _weighted(ad.softmax_rows(a, mask), wt((m, n))), [a]),
        "mean": (lambda: ad.mean(ad.mul(a, b)), [a, b]),
        "sse": (lambda: ad.sum_squared_error(a, b), [a, b]),
        "bce": (lambda: ad.binary_cross_entropy(probs, Tensor(y)), [probs]),
    }


def _repr_cases(rng):
    n_in, d = int(rng.integers(3, 7)), int(rng.integers(2, 4))
    ae = Autoencoder(n_in, d, (5,), rng)
    x = rng.standard_normal((4, n_in))
    return {"autoencoder": (lambda: reconstruction_loss(ae, x), ae.parameters())}


def _dualmap_cases(rng):
    d, n = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    X = _param(rng, (d, d), 0.5)
    W_A, W_B = _param(rng, (n, d)), _param(rng, (n, d))
    return {
        "forward_loss": (lambda: forward_loss(X, W_A, W_B), [X, W_A, W_B]),
        "dual_loss": (lambda: dual_loss(X, W_A, W_B), [X, W_A, W_B]),
        "orthogonality_penalty": (lambda: orthogonality_penalty(X), [X]),
    }


def _seq_cases(rng):
    d_in, d_h, t_len = 3, 4, 10
    cell = GruCell(d_in, d_h, rng)
    for b in (cell.b_z, cell.b_r, cell.b_h):
        b.data[...] = 0.3 * rng.standard_normal(d_h)
    xs = [_param(rng, (d_in,)) for _ in range(t_len)]
    batch = _param(rng, (3, t_len, d_in))
    mask = np.zeros((3, t_len), dtype=bool)
    for i, n in enumerate(rng.integers(0, t_len + 1, size=3)):
        mask[i, t_len - n:] = True
    w1, w3 = rng.standard_normal((1, d_h)), rng.standard_normal((3, d_h))
    params = cell.parameters()
    return {
        "gru_unroll_10": (lambda: _weighted(encode_sequence(cell, xs).h, w1), params + xs),
        "gru_fused_batch": (lambda: _weighted(encode_batch(cell, batch, mask), w3), params + [batch]),
    }


def _dualattn_cases(rng):
    d, t_len = 4, int(rng.integers(1, 6))
    block = AttentionBlock(d, 3, 5, "A" if rng.random() < 0.5 else "B", True, rng)
    hist_A, hist_B = _param(rng, (2, t_len, d)), _param(rng, (2, t_len, d))
    mask_A = np.ones((2, t_len), dtype=bool)
    mask_B = np.ones((2, t_len), dtype=bool)
    mask_A[1, :int(rng.integers(0, t_len))] = False
    w = rng.standard_normal((2, 5))
    return {"dual_attention": (
        lambda: _weighted(dual_attention(block, hist_A, hist_B, None, mask_A, mask_B).values, w),
        block.parameters() + [hist_A, hist_B])}


def _head_cases(rng):
    d, d_v = 3, 4
    head = PredictionHead(4 * d + d_v, 6, rng)
    parts = [_param(rng, (5, d)) for _ in range(3)] + [_param(rng, (5, d_v)), _param(rng, (5, d))]
    y = (rng.random(5) < 0.5).astype(np.float64)
    return {"prediction_head": (
        lambda: ad.binary_cross_entropy(score_candidate(*parts, head), Tensor(y)),
        head.parameters() + parts)}


REGISTRY: dict[str, Callable] = {
    "autodiff": _autodiff_cases,
    "repr": _repr_cases,
    "dualmap": _dualmap_cases,
    "seq": _seq_cases,
    "dualattn": _dualattn_cases,
    "head": _head_cases,
}


@dataclass
class CheckResult:
    component: str
    check: str
    instances: int
    worst_rel_error: float
    worst_abs_error: float
    passed: bool


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst_by_component(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.component] = max(out.get(r.component, 0.0), r.worst_rel_error)
        return out

    def lines(self) -> list[str]:
        out = [f"{'PASS' if r.passed else 'FAIL'} {r.component}.{r.check}: worst rel "
               f"{r.worst_rel_error:.2e} (abs {r.worst_abs_error:.1e}) over {r.instances} instances" for r in self.results]
        for comp, worst in self.worst_by_component().items():
            out.append(f"component {comp}: worst relative error {worst:.2e}")
        return out


def run_gradchecks(n_instances: int = 20, seed: int = 0, components=None,
                   rtol: float = RTOL) -> GradcheckReport:
    """Run every registered check on ``n_instances`` seeded problems."""
    started = time.perf_counter()
    report = GradcheckReport()
    for comp, build in REGISTRY.items():
        if components and comp not in components:
            continue
        worst: dict[str, list[float]] = {}
        for i in range(n_instances):
            cases = build(make_rng(seed, "gradcheck", comp, i))
            for name, (loss_fn, params) in cases.items():
                res = check_gradients(loss_fn, params, rtol=rtol)
                rel, absv = worst.setdefault(name, [0.0, 0.0])
                worst[name] = [max(rel, res.max_rel_error), max(absv, res.max_abs_error)]
        for name, (rel, absv) in worst.items():
            report.results.append(CheckResult(comp, name, n_instances, rel, absv, rel <= rtol))
    report.seconds = time.perf_counter() - started
    return report
