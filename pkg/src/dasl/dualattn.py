"""Dual scaled dot-product attention and the CTR prediction head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import (DimensionError, Tensor, concat_features, matmul, mul, reshape,
                       sigmoid, softmax_rows, transpose)
from .nn import MLP, Module, glorot_uniform


class AttentionBlock(Module):
    """Query/key/value projections for one target domain.

    In dual mode the keys are ``2 * d_q`` wide so that the per-position
    concatenation of both domains' queries can be scored against them.  In
    single mode (the no-dual-attention ablation) only the target's own query
    projection is used and keys are ``d_q`` wide.
    """

    def __init__(self, d: int, d_q: int = 16, d_v: int = 32, target: str = "A",
                 dual: bool = True, rng: np.random.Generator | None = None):
        if target not in ("A", "B"):
            raise ValueError(f"target domain must be 'A' or 'B', got {target!r}")
        if d_q <= 0 or d_v <= 0:
            raise ValueError("d_q and d_v must be positive")

        def w(shape):
            data = glorot_uniform(rng, shape) if rng is not None else np.zeros(shape)
            return Tensor(data, requires_grad=True)

        self.target = target
        self.dual = dual
        self.proj_Q_A = w((d_q, d))
        self.proj_Q_B = w((d_q, d))
        self.proj_K = w((2 * d_q if dual else d_q, d))
        self.proj_V = w((d_v, d))
        self.cross_query_calls = 0

    @property
    def d_k(self) -> int:
        return self.proj_K.shape[0]

    @property
    def d_v(self) -> int:
        return self.proj_V.shape[0]


@dataclass
class ContextVector:
    values: Tensor
    attention_weights: np.ndarray


def dual_attention(block: AttentionBlock, hist_A, hist_B, keys_from: str | None = None,
                   mask_A=None, mask_B=None) -> ContextVector:
    """Attention over the target domain's history with queries from both domains.

    Histories are [T, d] or batched [B, T, d] with optional boolean masks
    marking real positions.  Padded rows should already be zero.  The [T, T]
    weight matrix is averaged over real query positions into one distribution
    over keys, which is then applied to the values.
    """
    keys_from = keys_from or block.target
    if keys_from != block.target:
        raise ValueError(f"block built for target {block.target}, asked for {keys_from}")
    hist_A = hist_A if isinstance(hist_A, Tensor) else Tensor(hist_A)
    hist_B = hist_B if isinstance(hist_B, Tensor) else Tensor(hist_B)
    single = hist_A.data.ndim == 2
    if single:
        hist_A = reshape(hist_A, (1,) + hist_A.shape)
        hist_B = reshape(hist_B, (1,) + hist_B.shape)
        mask_A = None if mask_A is None else np.asarray(mask_A, bool)[None]
        mask_B = None if mask_B is None else np.asarray(mask_B, bool)[None]
    if hist_A.shape[:2] != hist_B.shape[:2]:
        raise DimensionError(f"dual_attention: history lengths differ {hist_A.shape} vs {hist_B.shape}")
    b, t_len, _ = hist_A.shape
    if mask_A is None:
        mask_A = np.ones((b, t_len), dtype=bool)
    if mask_B is None:
        mask_B = np.ones((b, t_len), dtype=bool)

    if keys_from == "A":
        own, other, own_q, other_q, mask = hist_A, hist_B, block.proj_Q_A, block.proj_Q_B, mask_A
    else:
        own, other, own_q, other_q, mask = hist_B, hist_A, block.proj_Q_B, block.proj_Q_A, mask_B
    mask = np.asarray(mask, dtype=bool)

    queries = matmul(own, transpose(own_q))
    if block.dual:
        block.cross_query_calls += 1
        queries = concat_features(queries, matmul(other, transpose(other_q)))
    if queries.shape[-1] != block.d_k:
        raise DimensionError(f"query width {queries.shape[-1]} != d_k {block.d_k}")
    keys = matmul(own, transpose(block.proj_K))
    values = matmul(own, transpose(block.proj_V))

    logits = mul(matmul(queries, transpose(keys)), 1.0 / np.sqrt(block.d_k))
    key_mask = np.broadcast_to(mask[:, None, :], (b, t_len, t_len))
    weights = softmax_rows(logits, key_mask)

    counts = mask.sum(axis=1, keepdims=True)
    q_avg = np.divide(mask, counts, out=np.zeros((b, t_len)), where=counts > 0)
    pooled = matmul(Tensor(q_avg[:, None, :]), weights)
    ctx = reshape(matmul(pooled, values), (b, block.d_v))
    attn = pooled.data.reshape(b, t_len)
    if single:
        return ContextVector(reshape(ctx, (block.d_v,)), attn[0])
    return ContextVector(ctx, attn)


class PredictionHead(Module):
    """MLP scorer: tanh hidden layer(s), sigmoid output."""

    def __init__(self, n_in: int, hidden: int = 64, rng: np.random.Generator | None = None,
                 hidden_bias_scale: float = 1.0):
        self.mlp = MLP([n_in, hidden, 1], rng, hidden_bias_scale)

    @property
    def n_in(self) -> int:
        return self.mlp.sizes[0]

    def __call__(self, x: Tensor) -> Tensor:
        out = sigmoid(self.mlp(x))
        return reshape(out, out.shape[:-1])


def score_candidate(user_emb, state_target, state_other, ctx, cand_emb,
                    head: PredictionHead) -> Tensor:
    """Predicted click probability from the concatenated user-side signals.

    All inputs share leading dims (a single vector each, or batches).
    """
    parts = [p if isinstance(p, Tensor) else Tensor(p)
             for p in (user_emb, state_target, state_other, ctx, cand_emb)]
    x = concat_features(*parts)
    if x.shape[-1] != head.n_in:
        raise DimensionError(f"head expects width {head.n_in}, got {x.shape[-1]}")
    return head(x)


class Ranking(list):
    """Item ids, best first; ``short`` is set when fewer than n were available."""

    short: bool = False


def top_n(scores: Iterable[tuple[int, float]], n: int) -> Ranking:
    """Ids of the n highest scores; ties go to the smaller id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ordered = sorted(scores, key=lambda pair: (-pair[1], pair[0]))
    out = Ranking(item for item, _ in ordered[:n])
    out.short = n > len(ordered)
    return out
