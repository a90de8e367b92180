"""The full dual attentive sequential model and its ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (Tensor, add, binary_cross_entropy, concat_features, matmul, mul,
                       no_record, repeat_rows, transpose)
from .data import DOMAINS, ExampleTable
from .dualattn import AttentionBlock, PredictionHead, dual_attention
from .dualmap import OrthogonalMap
from .nn import Module
from .repr import Autoencoder, AutoencoderEmbedder, EmbeddingTable
from .seeding import make_rng
from .seq import GruCell, encode_batch

VARIANTS = ("DASL", "DASL-DE", "DASL-DA", "SingleDomain")
VARIANT_ALIASES = {
    "dasl": "DASL", "de": "DASL-DE", "dasl-de": "DASL-DE", "da": "DASL-DA",
    "dasl-da": "DASL-DA", "single-domain": "SingleDomain", "single": "SingleDomain",
    "singledomain": "SingleDomain",
}


def canonical_variant(name: str) -> str:
    if name in VARIANTS:
        return name
    try:
        return VARIANT_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown ablation variant {name!r}") from None


@dataclass(frozen=True)
class AblationConfig:
    variant: str = "DASL"

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))

    @property
    def dual_embedding(self) -> bool:
        return self.variant in ("DASL", "DASL-DA")

    @property
    def dual_attention(self) -> bool:
        return self.variant in ("DASL", "DASL-DE")

    @property
    def cross_domain(self) -> bool:
        return self.variant != "SingleDomain"


@dataclass
class ModelConfig:
    d: int = 32
    d_q: int = 16
    d_v: int = 32
    head_hidden: int = 64
    history_len: int = 10
    repr_mode: str = "direct"
    ae_hidden: tuple[int, ...] = (64,)
    orthogonality_tolerance: float = 1e-3

    def validate(self) -> None:
        if self.repr_mode not in ("direct", "autoencoder"):
            raise ValueError(f"repr.mode must be 'direct' or 'autoencoder', got {self.repr_mode!r}")
        if min(self.d, self.d_q, self.d_v, self.head_hidden, self.history_len) <= 0:
            raise ValueError("model dimensions must be positive")


class DaslModel(Module):
    """All trainable state.

    Per domain: user and item embeddings, a GRU, an attention block and a
    prediction head; shared: the orthogonal user map.  The head sees
    ``[user, own GRU state, other GRU state, attention context, candidate]``.
    """

    def __init__(self, n_users: int, n_items: dict[str, int], config: ModelConfig | None = None,
                 ablation: AblationConfig | str = "DASL", seed: int = 0,
                 features: dict | None = None):
        config = config or ModelConfig()
        config.validate()
        self.config = config
        self.ablation = ablation if isinstance(ablation, AblationConfig) else AblationConfig(ablation)
        self.seed = seed
        self.n_users = n_users
        self.n_items = dict(n_items)
        d = config.d

        def rng(*path):
            return make_rng(seed, "init", *path)

        embedders = {}
        for dom in DOMAINS:
            for kind, rows in (("user", n_users), ("item", n_items[dom])):
                if config.repr_mode == "direct":
                    embedders[(kind, dom)] = EmbeddingTable(kind, dom, rows, d, rng(kind, dom))
                else:
                    feats = (features or {}).get((kind, dom))
                    if feats is None:
                        raise ValueError(f"autoencoder mode needs {kind}-{dom} features")
                    ae = Autoencoder(feats.shape[1], d, config.ae_hidden, rng("ae", kind, dom))
                    embedders[(kind, dom)] = AutoencoderEmbedder(kind, dom, ae, feats)
        self.user_A, self.user_B = embedders[("user", "A")], embedders[("user", "B")]
        self.item_A, self.item_B = embedders[("item", "A")], embedders[("item", "B")]
        self.dual_map = OrthogonalMap(d, config.orthogonality_tolerance)
        self.gru_A = GruCell(d, d, rng("gru", "A"))
        self.gru_B = GruCell(d, d, rng("gru", "B"))
        dual_attn = self.ablation.dual_attention
        self.attn_A = AttentionBlock(d, config.d_q, config.d_v, "A", dual_attn, rng("attn", "A"))
        self.attn_B = AttentionBlock(d, config.d_q, config.d_v, "B", dual_attn, rng("attn", "B"))
        n_in = 4 * d + config.d_v
        self.head_A = PredictionHead(n_in, config.head_hidden, rng("head", "A"))
        self.head_B = PredictionHead(n_in, config.head_hidden, rng("head", "B"))
        self.overlap_mask = np.zeros(n_users, dtype=bool)

    # ------------------------------------------------------------ accessors

    @property
    def variant(self) -> str:
        return self.ablation.variant

    def users(self, dom: str):
        return self.user_A if dom == "A" else self.user_B

    def items(self, dom: str):
        return self.item_A if dom == "A" else self.item_B

    def gru(self, dom: str) -> GruCell:
        return self.gru_A if dom == "A" else self.gru_B

    def attention(self, dom: str) -> AttentionBlock:
        return self.attn_A if dom == "A" else self.attn_B

    def head(self, dom: str) -> PredictionHead:
        return self.head_A if dom == "A" else self.head_B

    def set_overlap(self, rows) -> None:
        self.overlap_mask = np.zeros(self.n_users, dtype=bool)
        self.overlap_mask[np.asarray(rows, dtype=np.int64)] = True

    def dims(self) -> dict:
        """Everything needed to rebuild an identically shaped model."""
        cfg = asdict(self.config)
        cfg["ae_hidden"] = list(cfg["ae_hidden"])
        return {"n_users": self.n_users, "n_items_A": self.n_items["A"],
                "n_items_B": self.n_items["B"], "variant": self.variant,
                "seed": self.seed, "model": cfg}

    # ------------------------------------------------------------ forward

    def _history(self, ex: ExampleTable, rows: np.ndarray, dom: str):
        mask = ex.mask[dom][rows]
        emb = self.items(dom).lookup(ex.hist[dom][rows])
        keep = np.repeat(mask[:, :, None].astype(np.float64), self.config.d, axis=2)
        return mul(emb, Tensor(keep)), mask

    def user_vector(self, users: np.ndarray, target: str) -> Tensor:
        """Own-domain user embedding, averaged with the mapped other-domain one for overlap users."""
        own = self.users(target).lookup(users)
        if not self.ablation.dual_embedding:
            return own
        coef = 0.5 * self.overlap_mask[users].astype(np.float64)
        if not coef.any():
            return own
        other = self.users("B" if target == "A" else "A").lookup(users)
        X = self.dual_map.X
        mapped = matmul(other, X) if target == "A" else matmul(other, transpose(X))
        c = Tensor(np.repeat(coef[:, None], self.config.d, axis=1))
        return add(own, mul(c, add(mapped, mul(own, -1.0))))

    def context(self, ex: ExampleTable, rows: np.ndarray, target: str) -> Tensor:
        """[B, 3d + d_v] user-side features for target-domain prediction."""
        other = "B" if target == "A" else "A"
        users = ex.user[rows]
        hist_t, mask_t = self._history(ex, rows, target)
        state_t = encode_batch(self.gru(target), hist_t, mask_t)
        if self.ablation.cross_domain:
            hist_o, mask_o = self._history(ex, rows, other)
            state_o = encode_batch(self.gru(other), hist_o, mask_o)
        else:
            hist_o, mask_o = Tensor(np.zeros(hist_t.shape)), np.zeros_like(mask_t)
            state_o = Tensor(np.zeros((rows.size, self.config.d)))
        if target == "A":
            ctx = dual_attention(self.attn_A, hist_t, hist_o, "A", mask_t, mask_o)
        else:
            ctx = dual_attention(self.attn_B, hist_o, hist_t, "B", mask_o, mask_t)
        user = self.user_vector(users, target)
        return concat_features(user, state_t, state_o, ctx.values)

    def score(self, ctx: Tensor, candidates: np.ndarray, target: str) -> Tensor:
        """[B, C] click probabilities for candidate item ids [B, C]."""
        n_c = candidates.shape[1]
        cand = self.items(target).lookup(candidates)
        x = concat_features(repeat_rows(ctx, n_c), cand)
        return self.head(target)(x)

    def predict(self, ex: ExampleTable, rows: np.ndarray, candidates: np.ndarray,
                batch_size: int = 512) -> np.ndarray:
        """Scores for ``candidates[i]`` of example ``rows[i]``, without recording."""
        out = np.empty(candidates.shape)
        with no_record():
            for di, dom in enumerate(DOMAINS):
                sel = np.flatnonzero(ex.domain[rows] == di)
                for start in range(0, sel.size, batch_size):
                    part = sel[start:start + batch_size]
                    ctx = self.context(ex, rows[part], dom)
                    out[part] = self.score(ctx, candidates[part], dom).data
        return out

    def ctr_loss(self, ex: ExampleTable, rows: np.ndarray, candidates: np.ndarray,
                 labels: np.ndarray, target: str) -> Tensor:
        probs = self.score(self.context(ex, rows, target), candidates, target)
        return binary_cross_entropy(probs, Tensor(labels))
