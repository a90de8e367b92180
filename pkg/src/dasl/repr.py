"""Latent user and item representations per domain.

Two sources are supported: plain learned ID tables (``direct``) and
autoencoders over explicit feature vectors (``autoencoder``).  Each
(entity kind, domain) pair gets its own network so nothing leaks between
domains.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (Adam, DimensionError, Tape, Tensor, gather_rows, mul, no_record,
                       reshape, sum_squared_error)
from .data import DatasetError
from .nn import MLP, Module, glorot_uniform
from .seeding import make_rng

log = logging.getLogger(__name__)

KINDS = ("user", "item")
MAX_ONEHOT = 512


@dataclass
class FeatureVector:
    entity_kind: str
    domain: str
    values: np.ndarray


class EmbeddingTable(Module):
    def __init__(self, entity_kind: str, domain: str, rows: int, dim: int,
                 rng: np.random.Generator | None = None):
        self.entity_kind = entity_kind
        self.domain = domain
        data = glorot_uniform(rng, (rows, dim)) if rng is not None else np.zeros((rows, dim))
        self.weights = Tensor(data, requires_grad=True)

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def lookup(self, index) -> Tensor:
        return gather_rows(self.weights, index)

    def recon_loss(self, index) -> Tensor | None:
        return None


class Autoencoder(Module):
    """Encoder MLP [m, hidden..., d] and a mirrored decoder."""

    def __init__(self, n_in: int, d: int, hidden: Sequence[int] = (64,),
                 rng: np.random.Generator | None = None):
        sizes = [n_in, *hidden, d]
        self.encoder = MLP(sizes, rng)
        self.decoder = MLP(sizes[::-1], rng)

    @property
    def n_in(self) -> int:
        return self.encoder.sizes[0]

    @property
    def d(self) -> int:
        return self.encoder.sizes[-1]


def _features(x) -> Tensor:
    if isinstance(x, FeatureVector):
        x = x.values
    return x if isinstance(x, Tensor) else Tensor(x)


def encode(ae: Autoencoder, x) -> Tensor:
    """Latent code of a feature vector (or a [N, m] batch)."""
    x = _features(x)
    if x.shape[-1] != ae.n_in:
        raise DimensionError(f"encode: features of width {x.shape[-1]}, encoder expects {ae.n_in}")
    return ae.encoder(x)


def decode(ae: Autoencoder, z) -> Tensor:
    return ae.decoder(_features(z))


def reconstruction_loss(ae: Autoencoder, x, reduction: str = "sum") -> Tensor:
    """Squared reconstruction error ||x - dec(enc(x))||^2 (summed or averaged over rows)."""
    x = _features(x)
    loss = sum_squared_error(x, decode(ae, encode(ae, x)))
    if reduction == "mean" and x.data.ndim > 1:
        loss = mul(loss, 1.0 / x.shape[0])
    return loss


def hashed_onehot(ids: Sequence[str], max_dim: int = MAX_ONEHOT) -> np.ndarray:
    """One-hot ID features; ids are hashed into ``max_dim`` buckets when there are more."""
    n = len(ids)
    dim = min(n, max_dim)
    out = np.zeros((n, dim))
    if n <= max_dim:
        out[np.arange(n), np.arange(n)] = 1.0
    else:
        cols = [zlib.crc32(i.encode("utf-8")) % dim for i in ids]
        out[np.arange(n), cols] = 1.0
    return out


class AutoencoderEmbedder(Module):
    """Embeddings computed live by an encoder from a fixed feature matrix."""

    def __init__(self, entity_kind: str, domain: str, ae: Autoencoder, features: np.ndarray):
        self.entity_kind = entity_kind
        self.domain = domain
        self.ae = ae
        self.features = np.asarray(features, dtype=np.float64)

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.ae.d

    def lookup(self, index) -> Tensor:
        idx = np.asarray(index, dtype=np.int64)
        z = encode(self.ae, Tensor(self.features[idx.reshape(-1)]))
        return reshape(z, idx.shape + (self.ae.d,))

    def recon_loss(self, index) -> Tensor:
        idx = np.unique(np.asarray(index, dtype=np.int64))
        return reconstruction_loss(self.ae, Tensor(self.features[idx]), reduction="mean")

    def to_table(self) -> EmbeddingTable:
        table = EmbeddingTable(self.entity_kind, self.domain, self.rows, self.dim)
        with no_record():
            table.weights.data[...] = encode(self.ae, Tensor(self.features)).data
        return table


@dataclass
class AutoencoderConfig:
    d: int = 32
    hidden: tuple[int, ...] = (64,)
    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-2
    seed: int = 0


def feature_matrix(dataset, kind: str, domain: str) -> np.ndarray:
    feats = dataset.features.get((kind, domain))
    if feats is not None:
        return np.asarray(feats, dtype=np.float64)
    ids = dataset.user_ids if kind == "user" else dataset.item_ids[domain]
    return hashed_onehot(ids)


def pretrain_autoencoder(ae: Autoencoder, features: np.ndarray, config: AutoencoderConfig,
                         rng: np.random.Generator) -> list[float]:
    """Minibatch Adam on mean reconstruction loss; returns per-epoch full-data loss."""
    opt = Adam(ae.parameters(), lr=config.lr)
    x_all = Tensor(features)
    with no_record():
        history = [reconstruction_loss(ae, x_all, "mean").item()]
    n = features.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = reconstruction_loss(ae, Tensor(features[rows]), "mean")
            tape.backward(loss)
            opt.step()
        with no_record():
            history.append(reconstruction_loss(ae, x_all, "mean").item())
    return history


def train_autoencoders(dataset, config: AutoencoderConfig | None = None):
    """Pre-train the four (kind, domain) autoencoders.

    Returns ``(autoencoders, tables, histories)``, each a dict keyed by
    ``(kind, domain)``; tables hold the encoder outputs for every entity.
    """
    config = config or AutoencoderConfig()
    aes, tables, histories = {}, {}, {}
    for domain in ("A", "B"):
        if dataset.n_items(domain) == 0:
            raise DatasetError(f"domain {domain} is empty")
        for kind in KINDS:
            feats = feature_matrix(dataset, kind, domain)
            rng = make_rng(config.seed, "autoencoder", kind, domain)
            ae = Autoencoder(feats.shape[1], config.d, config.hidden, rng)
            histories[(kind, domain)] = pretrain_autoencoder(ae, feats, config, rng)
            aes[(kind, domain)] = ae
            tables[(kind, domain)] = AutoencoderEmbedder(kind, domain, ae, feats).to_table()
            h = histories[(kind, domain)]
            log.info("autoencoder %s-%s: loss %.4f -> %.4f", kind, domain, h[0], h[-1])
    return aes, tables, histories


def reconstruction_penalty(embedders: Sequence, indices: Sequence) -> Tensor | None:
    """Sum of the embedders' reconstruction losses over the given rows (None if all direct)."""
    total = None
    for emb, idx in zip(embedders, indices):
        term = emb.recon_loss(idx)
        if term is not None:
            total = term if total is None else total + term
    return total
