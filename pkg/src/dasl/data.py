"""Interaction logs, history windows, folds, negatives and a synthetic generator.

Event files are UTF-8 text, one tab-separated record per line::

    user_id  item_id  domain  timestamp  rating_or_label

``domain`` is ``A`` or ``B``, ``timestamp`` a base-10 integer, and the last
field either a real rating or a label written ``L:0`` / ``L:1``.  Lines
starting with ``#`` are ignored.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .seeding import make_rng

log = logging.getLogger(__name__)

DOMAINS = ("A", "B")
HISTORY_LEN = 10


class IngestionError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    domain: str
    timestamp: int
    rating: float | None = None
    label: int | None = None


class Records(list):
    """Parsed records plus ingestion diagnostics."""

    malformed: int = 0
    samples: list = []


# ---------------------------------------------------------------- ingestion


def _parse_line(line: str) -> InteractionRecord:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 5:
        raise ValueError(f"expected 5 fields, got {len(fields)}")
    user, item, domain, ts, last = fields
    if not user or not item:
        raise ValueError("empty id")
    if domain not in DOMAINS:
        raise ValueError(f"bad domain {domain!r}")
    timestamp = int(ts)
    if timestamp < 0:
        raise ValueError("negative timestamp")
    if last.startswith("L:"):
        label = int(last[2:])
        if label not in (0, 1):
            raise ValueError(f"bad label {last!r}")
        return InteractionRecord(user, item, domain, timestamp, label=label)
    rating = float(last)
    if not math.isfinite(rating):
        raise ValueError("non-finite rating")
    return InteractionRecord(user, item, domain, timestamp, rating=rating)


def parse_events(lines: Iterable[str], max_malformed_frac: float = 0.01) -> Records:
    out = Records()
    bad: list[tuple[int, str, str]] = []
    seen = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        seen += 1
        try:
            out.append(_parse_line(line))
        except ValueError as exc:
            bad.append((lineno, line.rstrip("\r\n"), str(exc)))
    out.sort(key=lambda r: (r.user_id, r.timestamp))
    out.malformed = len(bad)
    out.samples = bad[:5]
    if bad:
        log.warning("skipped %d malformed line(s) of %d", len(bad), seen)
        if len(bad) > max_malformed_frac * seen:
            shown = "; ".join(f"line {n}: {why} ({text!r})" for n, text, why in bad[:3])
            raise IngestionError(f"{len(bad)}/{seen} malformed lines exceed "
                                 f"{max_malformed_frac:.0%}: {shown}")
    return out


def load_events(path, max_malformed_frac: float = 0.01) -> Records:
    """Read an event file; records come back sorted by (user_id, timestamp)."""
    with open(path, encoding="utf-8") as fh:
        return parse_events(fh, max_malformed_frac)


def format_record(r: InteractionRecord) -> str:
    last = f"L:{r.label}" if r.rating is None else repr(float(r.rating))
    return f"{r.user_id}\t{r.item_id}\t{r.domain}\t{r.timestamp}\t{last}"


def write_events(path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(format_record(r) + "\n")


def binarize(records: Iterable[InteractionRecord], threshold: float = 4.0) -> list[InteractionRecord]:
    """Label = 1 iff rating >= threshold; records already labelled pass through."""
    out = []
    rejected = 0
    for r in records:
        if r.rating is not None:
            out.append(InteractionRecord(r.user_id, r.item_id, r.domain, r.timestamp,
                                         None, int(r.rating >= threshold)))
        elif r.label is not None:
            out.append(r)
        else:
            rejected += 1
    if rejected:
        log.warning("rejected %d record(s) with neither rating nor label", rejected)
    return out


# ---------------------------------------------------------------- dataset


@dataclass
class OverlapIndex:
    pairs: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def rows(self) -> np.ndarray:
        return np.array([a for a, _ in self.pairs], dtype=np.int64)


@dataclass
class DomainLog:
    """Column arrays of one domain's labelled events, sorted by (user, time)."""

    user: np.ndarray
    item: np.ndarray
    timestamp: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return self.user.size


@dataclass
class DomainPairDataset:
    user_ids: list[str]
    item_ids: dict[str, list[str]]
    logs: dict[str, DomainLog]
    overlap: OverlapIndex
    features: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    fingerprint: str = ""

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def n_items(self, domain: str) -> int:
        return len(self.item_ids[domain])

    @classmethod
    def from_records(cls, records: Sequence[InteractionRecord], threshold: float = 4.0,
                     require_both: bool = True) -> "DomainPairDataset":
        labelled = binarize(records, threshold)
        item_domain: dict[str, str] = {}
        for r in labelled:
            prev = item_domain.setdefault(r.item_id, r.domain)
            if prev != r.domain:
                raise DatasetError(f"item {r.item_id!r} appears in both domains")
        users = sorted({r.user_id for r in labelled})
        uidx = {u: i for i, u in enumerate(users)}
        items = {d: sorted(i for i, dom in item_domain.items() if dom == d) for d in DOMAINS}
        iidx = {d: {it: i for i, it in enumerate(items[d])} for d in DOMAINS}
        logs = {}
        for d in DOMAINS:
            rows = sorted((uidx[r.user_id], r.timestamp, iidx[d][r.item_id], r.label)
                          for r in labelled if r.domain == d)
            arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
            logs[d] = DomainLog(arr[:, 0], arr[:, 2], arr[:, 1], arr[:, 3])
            if require_both and not rows:
                raise DatasetError(f"domain {d} has no interactions")
        in_a = set(logs["A"].user.tolist())
        in_b = set(logs["B"].user.tolist())
        overlap = OverlapIndex([(u, u) for u in sorted(in_a & in_b)])
        return cls(users, items, logs, overlap, fingerprint=fingerprint_records(labelled))

    def interacted(self, domain: str) -> np.ndarray:
        """Boolean [n_users, n_items] matrix of any interaction in ``domain``."""
        m = np.zeros((self.n_users, self.n_items(domain)), dtype=bool)
        lg = self.logs[domain]
        m[lg.user, lg.item] = True
        return m

    def summary(self) -> dict:
        return {
            "n_users": self.n_users,
            "records": {d: len(self.logs[d]) for d in DOMAINS},
            "items": {d: self.n_items(d) for d in DOMAINS},
            "positives": {d: int(self.logs[d].label.sum()) for d in DOMAINS},
            "overlap_users": len(self.overlap),
            "fingerprint": self.fingerprint,
        }


def fingerprint_records(records: Iterable[InteractionRecord]) -> str:
    h = hashlib.sha256()
    for r in sorted(records, key=lambda r: (r.user_id, r.timestamp, r.domain, r.item_id)):
        h.update(format_record(r).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- examples


@dataclass(frozen=True)
class TrainingExample:
    user: int
    target_domain: str
    history_A: tuple[int, ...]
    history_B: tuple[int, ...]
    candidate_item: int
    label: int
    timestamp: int
    history_ts_A: tuple[int, ...] = ()
    history_ts_B: tuple[int, ...] = ()


@dataclass
class ExampleTable:
    """Columnar positives: one row per clicked interaction.

    Histories are right-aligned in ``[N, T]`` arrays (most recent item last)
    with ``mask_*`` marking real positions.
    """

    user: np.ndarray
    domain: np.ndarray  # 0 for A, 1 for B
    item: np.ndarray
    timestamp: np.ndarray
    hist: dict[str, np.ndarray]
    hist_ts: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]
    fold: np.ndarray | None = None

    def __len__(self) -> int:
        return self.user.size

    def __getitem__(self, i: int) -> TrainingExample:
        def seq(d, arr):
            return tuple(int(x) for x in arr[d][i][self.mask[d][i]])

        return TrainingExample(
            user=int(self.user[i]), target_domain=DOMAINS[int(self.domain[i])],
            history_A=seq("A", self.hist), history_B=seq("B", self.hist),
            candidate_item=int(self.item[i]), label=1, timestamp=int(self.timestamp[i]),
            history_ts_A=seq("A", self.hist_ts), history_ts_B=seq("B", self.hist_ts))

    def __iter__(self) -> Iterator[TrainingExample]:
        return (self[i] for i in range(len(self)))

    def subset(self, rows: np.ndarray) -> "ExampleTable":
        return ExampleTable(
            self.user[rows], self.domain[rows], self.item[rows], self.timestamp[rows],
            {d: v[rows] for d, v in self.hist.items()},
            {d: v[rows] for d, v in self.hist_ts.items()},
            {d: v[rows] for d, v in self.mask.items()},
            None if self.fold is None else self.fold[rows])


def build_examples(dataset: DomainPairDataset, history_len: int = HISTORY_LEN) -> ExampleTable:
    """One example per clicked interaction, with each domain's last clicks before it.

    Histories hold clicked items only, taken strictly before the candidate's
    timestamp; an earlier click on the candidate item itself is left out of
    its own-domain window.
    """
    events = defaultdict(list)
    for di, d in enumerate(DOMAINS):
        lg = dataset.logs[d]
        for u, it, ts, lab in zip(lg.user.tolist(), lg.item.tolist(),
                                  lg.timestamp.tolist(), lg.label.tolist()):
            if lab == 1:
                events[u].append((ts, di, it))
    cols = defaultdict(list)
    for u in sorted(events):
        evs = sorted(events[u])
        recent = {0: deque(maxlen=history_len + 1), 1: deque(maxlen=history_len + 1)}
        i = 0
        while i < len(evs):
            j = i
            while j < len(evs) and evs[j][0] == evs[i][0]:
                j += 1
            for ts, di, it in evs[i:j]:
                cols["user"].append(u)
                cols["domain"].append(di)
                cols["item"].append(it)
                cols["ts"].append(ts)
                for dj in (0, 1):
                    window = [(t, x) for t, x in recent[dj] if not (dj == di and x == it)]
                    cols[f"h{dj}"].append(window[-history_len:])
            for ts, di, it in evs[i:j]:
                recent[di].append((ts, it))
            i = j
    n = len(cols["user"])
    hist, hist_ts, mask = {}, {}, {}
    for dj, d in enumerate(DOMAINS):
        h = np.zeros((n, history_len), dtype=np.int64)
        t = np.zeros((n, history_len), dtype=np.int64)
        m = np.zeros((n, history_len), dtype=bool)
        for row, window in enumerate(cols[f"h{dj}"]):
            k = len(window)
            if k:
                t[row, history_len - k:] = [w[0] for w in window]
                h[row, history_len - k:] = [w[1] for w in window]
                m[row, history_len - k:] = True
        hist[d], hist_ts[d], mask[d] = h, t, m
    return ExampleTable(np.array(cols["user"], dtype=np.int64),
                        np.array(cols["domain"], dtype=np.int64),
                        np.array(cols["item"], dtype=np.int64),
                        np.array(cols["ts"], dtype=np.int64), hist, hist_ts, mask)


def fold_split(examples: ExampleTable, n_folds: int = 5, rng: np.random.Generator | None = None,
               seed: int = 0) -> np.ndarray:
    """Per-user rotation of positives over folds.

    Each user's examples (domain A first, then B, each shuffled) are dealt
    round-robin from a random starting fold, so per-user fold sizes differ by
    at most one in total and within each domain.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    rng = rng if rng is not None else make_rng(seed, "folds")
    folds = np.empty(len(examples), dtype=np.int64)
    order = np.lexsort((examples.domain, examples.user))
    users = examples.user[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for rows in np.split(order, bounds):
        if rows.size == 0:
            continue
        doms = examples.domain[rows]
        dealt = np.concatenate([rng.permutation(rows[doms == 0]), rng.permutation(rows[doms == 1])])
        start = int(rng.integers(n_folds))
        folds[dealt] = (start + np.arange(dealt.size)) % n_folds
    examples.fold = folds
    return folds


def split_indices(folds: np.ndarray, test_fold: int, n_folds: int = 5):
    """(train, validation, test) row indices: test=i, validation=i+1 mod n, rest train."""
    val_fold = (test_fold + 1) % n_folds
    test = np.flatnonzero(folds == test_fold)
    val = np.flatnonzero(folds == val_fold)
    train = np.flatnonzero((folds != test_fold) & (folds != val_fold))
    return train, val, test


# ---------------------------------------------------------------- negatives


def sample_excluding(blocked: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct unblocked column ids per row of ``blocked`` (uniform, without replacement)."""
    n_rows, n_items = blocked.shape
    free = n_items - blocked.sum(axis=1)
    if n_rows and free.min() < k:
        raise SamplingError(f"only {int(free.min())} eligible items for {k} negatives")
    out = np.empty((n_rows, k), dtype=np.int64)
    todo = np.arange(n_rows)
    width = 2 * k + 4
    while todo.size:
        draw = rng.integers(0, n_items, size=(todo.size, width))
        ok = ~blocked[todo[:, None], draw]
        # keep only the first occurrence of each id within a row
        order = np.argsort(draw, axis=1, kind="stable")
        srt = np.take_along_axis(draw, order, axis=1)
        repeat = np.zeros_like(ok)
        repeat[:, 1:] = srt[:, 1:] == srt[:, :-1]
        dup = np.zeros_like(ok)
        np.put_along_axis(dup, order, repeat, axis=1)
        ok &= ~dup
        rank = np.cumsum(ok, axis=1)
        done = rank[:, -1] >= k
        take = ok[done] & (rank[done] <= k)
        out[todo[done]] = draw[done][take].reshape(-1, k)
        todo = todo[~done]
        width *= 2
    return out


def negative_sample(example: TrainingExample, k: int, rng: np.random.Generator,
                    dataset: DomainPairDataset, interacted: np.ndarray | None = None
                    ) -> list[TrainingExample]:
    """k label-0 copies of ``example`` with candidates the user never touched."""
    if k < 1:
        raise ValueError("k must be >= 1")
    blocked = interacted if interacted is not None else dataset.interacted(example.target_domain)
    picks = sample_excluding(blocked[[example.user]], k, rng)[0]
    return [TrainingExample(example.user, example.target_domain, example.history_A,
                            example.history_B, int(c), 0, example.timestamp,
                            example.history_ts_A, example.history_ts_B) for c in picks]


def eval_candidates(examples: ExampleTable, dataset: DomainPairDataset, n_neg: int,
                    rng: np.random.Generator) -> np.ndarray:
    """[N, 1 + n_neg] candidate ids: the positive in column 0, then negatives."""
    out = np.empty((len(examples), 1 + n_neg), dtype=np.int64)
    out[:, 0] = examples.item
    for di, d in enumerate(DOMAINS):
        rows = np.flatnonzero(examples.domain == di)
        if rows.size:
            blocked = dataset.interacted(d)[examples.user[rows]]
            out[rows, 1:] = sample_excluding(blocked, n_neg, rng)
    return out


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items_A: int = 500
    n_items_B: int = 500
    latent_dim: int = 2
    overlap_frac: float = 0.5
    noise: float = 0.5
    seed: int = 42
    min_events: int = 4
    max_events: int = 12
    affinity_scale: float = 3.0
    accept_offset: float = 2.0
    feature_dim: int = 16
    pure_noise: bool = False

    def validate(self) -> None:
        if self.n_users <= 0 or self.n_items_A <= 0 or self.n_items_B <= 0:
            raise ConfigError("synthetic config needs at least one user and one item per domain")
        if not 0.0 <= self.overlap_frac <= 1.0:
            raise ConfigError("overlap_frac must lie in [0, 1]")
        if self.noise < 0 or self.latent_dim <= 0:
            raise ConfigError("noise must be >= 0 and latent_dim > 0")
        if not 1 <= self.min_events <= self.max_events:
            raise ConfigError("need 1 <= min_events <= max_events")
        if self.max_events > min(self.n_items_A, self.n_items_B):
            raise ConfigError("max_events exceeds a domain's catalog")


@dataclass
class SyntheticTruth:
    user_latent: np.ndarray
    item_latent: dict[str, np.ndarray]
    membership: np.ndarray  # 0 = both domains, 1 = A only, 2 = B only


def synthesize(config: SynthConfig) -> tuple[list[InteractionRecord], SyntheticTruth]:
    """Events driven by one latent preference vector per user shared by both domains.

    Each (user, item) pair gets ``logit = scale * <u, v> / sqrt(k) + noise * eps``;
    items are visited in random order and accepted with probability
    ``sigmoid(logit - accept_offset)`` until the user's event budget is used.
    The 1-5 rating of an accepted item is ``round(1 + 4 * sigmoid(logit))``.
    Overlap users act in both domains, the rest in one.

    With ``pure_noise`` the affinity ``<u, v> / sqrt(k)`` is replaced by an
    independent standard normal per pair: same logit distribution, nothing
    learnable.
    """
    config.validate()
    c = config
    rng = make_rng(c.seed, "synth")
    k = c.latent_dim
    users = rng.standard_normal((c.n_users, k))
    items = {"A": rng.standard_normal((c.n_items_A, k)),
             "B": rng.standard_normal((c.n_items_B, k))}
    n_overlap = int(round(c.overlap_frac * c.n_users))
    membership = np.ones(c.n_users, dtype=np.int64)
    membership[:n_overlap] = 0
    membership[n_overlap:] = 1 + (np.arange(c.n_users - n_overlap) % 2)
    membership = rng.permutation(membership)
    width_u = len(str(c.n_users))
    width_i = len(str(max(c.n_items_A, c.n_items_B)))
    records: list[InteractionRecord] = []
    for u in range(c.n_users):
        urng = make_rng(c.seed, "synth-user", u)
        doms = [d for d, keep in (("A", membership[u] != 2), ("B", membership[u] != 1)) if keep]
        chosen = []
        for d in doms:
            v = items[d]
            if c.pure_noise:
                affinity = make_rng(c.seed, "synth-null", u, d).standard_normal(v.shape[0])
            else:
                affinity = (v @ users[u]) / math.sqrt(k)
            logit = c.affinity_scale * affinity
            logit = logit + c.noise * urng.standard_normal(v.shape[0])
            budget = int(urng.integers(c.min_events, c.max_events + 1))
            order = urng.permutation(v.shape[0])
            accept = urng.random(v.shape[0]) < _sigmoid(logit[order] - c.accept_offset)
            picked = order[accept][:budget]
            if picked.size < budget:
                rest = order[~accept][: budget - picked.size]
                picked = np.concatenate([picked, rest])
            for it in picked:
                rating = int(round(1 + 4 * _sigmoid(logit[it])))
                chosen.append((d, int(it), float(rating)))
        times = np.sort(urng.choice(10**8, size=len(chosen), replace=False))
        order = urng.permutation(len(chosen))
        for t, idx in zip(times, order):
            d, it, rating = chosen[idx]
            records.append(InteractionRecord(
                f"u{u:0{width_u}d}", f"{d.lower()}{it:0{width_i}d}", d, int(t), rating=rating))
    records.sort(key=lambda r: (r.user_id, r.timestamp))
    return records, SyntheticTruth(users, items, membership)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def synthetic_dataset(config: SynthConfig, threshold: float = 4.0
                      ) -> tuple[DomainPairDataset, SyntheticTruth]:
    """Generator output loaded as a dataset, with noisy linear features attached."""
    records, truth = synthesize(config)
    ds = DomainPairDataset.from_records(records, threshold)
    frng = make_rng(config.seed, "features")
    proj = frng.standard_normal((config.latent_dim, config.feature_dim)) / math.sqrt(config.latent_dim)
    user_pos = np.array([int(u[1:]) for u in ds.user_ids])
    for d in DOMAINS:
        ufeat = truth.user_latent[user_pos] @ proj
        ds.features[("user", d)] = ufeat + 0.1 * frng.standard_normal(ufeat.shape)
        item_pos = np.array([int(i[1:]) for i in ds.item_ids[d]])
        ifeat = truth.item_latent[d][item_pos] @ proj
        ds.features[("item", d)] = ifeat + 0.1 * frng.standard_normal(ifeat.shape)
    return ds, truth


def write_snapshot(out_dir, records: Sequence[InteractionRecord], extra: dict | None = None) -> dict:
    """Write ``events.tsv`` and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / "events.tsv", records)
    per_dom = {d: sum(1 for r in records if r.domain == d) for d in DOMAINS}
    users = {d: {r.user_id for r in records if r.domain == d} for d in DOMAINS}
    manifest = {
        "records": per_dom,
        "total_records": sum(per_dom.values()),
        "users": {d: len(users[d]) for d in DOMAINS},
        "overlap_users": len(users["A"] & users["B"]),
        "fingerprint": fingerprint_records(records),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def synth_config_dict(config: SynthConfig) -> dict:
    return asdict(config)
