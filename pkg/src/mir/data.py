"""Data schema, JSONL ingestion, padding, and a synthetic click-log generator.

The on-disk format is newline-delimited JSON, one ranking instance per line:

    {"user_id": int, "profile": [int, ...],
     "candidates": [{"item_id": int, "cat": [int x k], "dense": [float x d],
                     "label": 0|1, "pos": int, "bid": float?}, ...],
     "history":    [{"item_id": int, "cat": [int x k], "dense": [float x d],
                     "t": float}, ...]}

Index 0 of every categorical vocabulary is reserved for padding; its
embedding row stays zero, which is what makes padding neutrality checkable.
The synthetic generator plants a known position bias of 1/log2(pos+1) and
emits the true propensities so debiased metrics can be validated end to end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DataError",
    "FeatureSchema",
    "ItemRecord",
    "RankingInstance",
    "PaddedBatch",
    "load_jsonl",
    "save_jsonl",
    "pad_instance",
    "pad_and_batch",
    "SynthConfig",
    "synth_generate",
    "position_bias",
    "train_test_split",
]


class DataError(ValueError):
    """Invalid dataset content; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class FeatureSchema:
    """Declares the categorical/dense feature layout shared by all items.

    ``vocab_sizes[f]`` counts rows of field f's embedding table, including
    the reserved padding row 0.  ``d_embed`` is the per-field embedding
    width; an item embeds to ``k * d_embed + d_dense`` values.
    """

    vocab_sizes: tuple[int, ...]
    d_dense: int
    d_embed: int
    user_vocab_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.vocab_sizes) < 1:
            raise DataError("schema needs at least one categorical field")
        if any(v < 1 for v in self.vocab_sizes) or any(v < 1 for v in self.user_vocab_sizes):
            raise DataError("every vocabulary size must be >= 1")
        if self.d_dense < 0 or self.d_embed < 1:
            raise DataError("dense width must be >= 0 and embedding width >= 1")

    @property
    def k(self) -> int:
        return len(self.vocab_sizes)

    @property
    def d_item(self) -> int:
        return self.k * self.d_embed + self.d_dense

    @property
    def d_user(self) -> int:
        return len(self.user_vocab_sizes) * self.d_embed

    def to_json(self) -> dict:
        return {
            "vocab_sizes": list(self.vocab_sizes),
            "d_dense": self.d_dense,
            "d_embed": self.d_embed,
            "user_vocab_sizes": list(self.user_vocab_sizes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSchema":
        return cls(
            vocab_sizes=tuple(obj["vocab_sizes"]),
            d_dense=int(obj["d_dense"]),
            d_embed=int(obj["d_embed"]),
            user_vocab_sizes=tuple(obj["user_vocab_sizes"]),
        )


@dataclass
class ItemRecord:
    """One item occurrence, either a candidate or a history entry.

    Candidates carry ``label`` and ``logged_position``; history entries
    carry ``time_interval`` (time since the click, so non-increasing along
    a chronological list).  ``category`` for metric purposes is the first
    categorical feature.
    """

    item_id: int
    cat_feats: tuple[int, ...]
    dense_feats: tuple[float, ...]
    label: int | None = None
    logged_position: int | None = None
    time_interval: float | None = None
    bid: float | None = None

    @property
    def category(self) -> int:
        return self.cat_feats[0]


@dataclass
class RankingInstance:
    """One reranking request: profile, candidate set, chronological history."""

    user_id: int
    profile: tuple[int, ...]
    candidates: list[ItemRecord]
    history: list[ItemRecord]

    @property
    def n(self) -> int:
        return len(self.candidates)

    @property
    def m(self) -> int:
        return len(self.history)

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.candidates], dtype=np.int64)


@dataclass
class PaddedBatch:
    """One instance padded to fixed candidate/history lengths with masks.

    Padded slots hold the reserved index 0 (categoricals), zeros (dense,
    intervals, labels) and False in the masks; they contribute nothing to
    any score downstream.
    """

    user_id: int
    profile: np.ndarray          # [num user fields] int
    cand_cat: np.ndarray         # [n_max, k] int
    cand_dense: np.ndarray       # [n_max, d_dense]
    cand_mask: np.ndarray        # [n_max] bool
    labels: np.ndarray           # [n_max] int
    logged_positions: np.ndarray  # [n_max] int, 0 on padding
    hist_cat: np.ndarray         # [m_max, k] int
    hist_dense: np.ndarray       # [m_max, d_dense]
    hist_mask: np.ndarray        # [m_max] bool
    intervals: np.ndarray        # [m_max] float, 0 on padding
    item_ids: np.ndarray         # [n_max] int, -1 on padding

    @property
    def n(self) -> int:
        return int(self.cand_mask.sum())

    @property
    def m(self) -> int:
        return int(self.hist_mask.sum())


# ---------------------------------------------------------------------------
# JSONL ingestion.

_CAND_FIELDS = {"item_id", "cat", "dense", "label", "pos", "bid"}
_HIST_FIELDS = {"item_id", "cat", "dense", "t"}
_TOP_FIELDS = {"user_id", "profile", "candidates", "history"}


def _check_cats(cats, schema: FeatureSchema, line: int, where: str) -> tuple[int, ...]:
    if not isinstance(cats, list) or len(cats) != schema.k:
        raise DataError(f"{where}: expected {schema.k} categorical indices, got {cats!r}", line)
    for f, idx in enumerate(cats):
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise DataError(f"{where}: categorical index {idx!r} in field {f} is not an integer", line)
        if not (0 <= idx < schema.vocab_sizes[f]):
            raise DataError(
                f"{where}: categorical index {idx} out of range for field {f} "
                f"(vocabulary size {schema.vocab_sizes[f]})", line)
    return tuple(cats)


def _check_dense(dense, schema: FeatureSchema, line: int, where: str) -> tuple[float, ...]:
    if not isinstance(dense, list) or len(dense) != schema.d_dense:
        raise DataError(f"{where}: expected {schema.d_dense} dense features, got {dense!r}", line)
    vals = []
    for v in dense:
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise DataError(f"{where}: dense feature {v!r} is not a finite number", line)
        vals.append(float(v))
    return tuple(vals)


def _parse_candidate(obj: dict, schema: FeatureSchema, line: int, pos_in_list: int,
                     strict: bool) -> ItemRecord:
    where = f"candidate {pos_in_list}"
    if strict:
        unknown = set(obj) - _CAND_FIELDS
        if unknown:
            raise DataError(f"{where}: unknown fields {sorted(unknown)}", line)
    for key in ("item_id", "cat", "dense", "label", "pos"):
        if key not in obj:
            raise DataError(f"{where}: missing field '{key}'", line)
    label = obj["label"]
    if label not in (0, 1):
        raise DataError(f"{where}: label must be 0 or 1, got {label!r}", line)
    pos = obj["pos"]
    if not isinstance(pos, int) or pos < 1:
        raise DataError(f"{where}: logged position must be a positive integer, got {pos!r}", line)
    bid = obj.get("bid")
    if bid is not None and (not isinstance(bid, (int, float)) or bid < 0):
        raise DataError(f"{where}: bid must be a nonnegative number, got {bid!r}", line)
    return ItemRecord(
        item_id=int(obj["item_id"]),
        cat_feats=_check_cats(obj["cat"], schema, line, where),
        dense_feats=_check_dense(obj["dense"], schema, line, where),
        label=int(label),
        logged_position=pos,
        bid=None if bid is None else float(bid),
    )


def _parse_history(obj: dict, schema: FeatureSchema, line: int, pos_in_list: int,
                   strict: bool) -> ItemRecord:
    where = f"history item {pos_in_list}"
    if strict:
        unknown = set(obj) - _HIST_FIELDS
        if unknown:
            raise DataError(f"{where}: unknown fields {sorted(unknown)}", line)
    for key in ("item_id", "cat", "dense", "t"):
        if key not in obj:
            raise DataError(f"{where}: missing field '{key}'", line)
    t = obj["t"]
    if not isinstance(t, (int, float)) or isinstance(t, bool) or not math.isfinite(t) or t < 0:
        raise DataError(f"{where}: time interval must be a nonnegative number, got {t!r}", line)
    return ItemRecord(
        item_id=int(obj["item_id"]),
        cat_feats=_check_cats(obj["cat"], schema, line, where),
        dense_feats=_check_dense(obj["dense"], schema, line, where),
        time_interval=float(t),
    )


def parse_instance(obj: dict, schema: FeatureSchema, line: int = 0, strict: bool = False,
                   chronological: bool = False) -> RankingInstance:
    if strict:
        unknown = set(obj) - _TOP_FIELDS
        if unknown:
            raise DataError(f"unknown fields {sorted(unknown)}", line)
    for key in ("user_id", "profile", "candidates", "history"):
        if key not in obj:
            raise DataError(f"missing field '{key}'", line)
    profile = obj["profile"]
    if not isinstance(profile, list) or len(profile) != len(schema.user_vocab_sizes):
        raise DataError(
            f"profile: expected {len(schema.user_vocab_sizes)} indices, got {profile!r}", line)
    for f, idx in enumerate(profile):
        if not isinstance(idx, int) or not (0 <= idx < schema.user_vocab_sizes[f]):
            raise DataError(
                f"profile: index {idx!r} out of range for user field {f} "
                f"(vocabulary size {schema.user_vocab_sizes[f]})", line)
    candidates = [_parse_candidate(c, schema, line, i, strict)
                  for i, c in enumerate(obj["candidates"])]
    if not candidates:
        raise DataError("candidate list is empty", line)
    history = [_parse_history(h, schema, line, j, strict)
               for j, h in enumerate(obj["history"])]
    if chronological:
        ts = [h.time_interval for h in history]
        for j in range(1, len(ts)):
            if ts[j] > ts[j - 1]:
                raise DataError(
                    f"history item {j}: time interval {ts[j]} increases along a "
                    "chronological list", line)
    return RankingInstance(
        user_id=int(obj["user_id"]),
        profile=tuple(profile),
        candidates=candidates,
        history=history,
    )


def load_jsonl(path, schema: FeatureSchema, strict: bool = False,
               chronological: bool = False) -> list[RankingInstance]:
    """Load and validate a JSONL dataset; errors carry the 1-based line number."""
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise DataError(f"malformed JSON ({e.msg})", lineno) from e
            if not isinstance(obj, dict):
                raise DataError("line is not a JSON object", lineno)
            instances.append(parse_instance(obj, schema, lineno, strict, chronological))
    return instances


def instance_to_json(inst: RankingInstance) -> dict:
    cands = []
    for c in inst.candidates:
        obj = {"item_id": c.item_id, "cat": list(c.cat_feats), "dense": list(c.dense_feats),
               "label": c.label, "pos": c.logged_position}
        if c.bid is not None:
            obj["bid"] = c.bid
        cands.append(obj)
    hist = [{"item_id": h.item_id, "cat": list(h.cat_feats), "dense": list(h.dense_feats),
             "t": h.time_interval} for h in inst.history]
    return {"user_id": inst.user_id, "profile": list(inst.profile),
            "candidates": cands, "history": hist}


def save_jsonl(instances: Iterable[RankingInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_json(inst), separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Padding.

def pad_instance(inst: RankingInstance, n_max: int, m_max: int,
                 schema: FeatureSchema) -> PaddedBatch:
    """Pad one instance to fixed sizes.

    Candidate lists longer than ``n_max`` are rejected; history keeps the
    most recent ``m_max`` entries (the tail of the chronological list).
    """
    n, k = inst.n, schema.k
    if n > n_max:
        raise DataError(f"user {inst.user_id}: {n} candidates exceed the limit n_max={n_max}")
    hist = inst.history[-m_max:] if m_max else []
    m = len(hist)

    cand_cat = np.zeros((n_max, k), dtype=np.int64)
    cand_dense = np.zeros((n_max, schema.d_dense))
    labels = np.zeros(n_max, dtype=np.int64)
    logged = np.zeros(n_max, dtype=np.int64)
    item_ids = np.full(n_max, -1, dtype=np.int64)
    for i, c in enumerate(inst.candidates):
        cand_cat[i] = c.cat_feats
        if schema.d_dense:
            cand_dense[i] = c.dense_feats
        labels[i] = c.label
        logged[i] = c.logged_position
        item_ids[i] = c.item_id
    cand_mask = np.arange(n_max) < n

    hist_cat = np.zeros((m_max, k), dtype=np.int64)
    hist_dense = np.zeros((m_max, schema.d_dense))
    intervals = np.zeros(m_max)
    for j, h in enumerate(hist):
        hist_cat[j] = h.cat_feats
        if schema.d_dense:
            hist_dense[j] = h.dense_feats
        intervals[j] = h.time_interval
    hist_mask = np.arange(m_max) < m

    return PaddedBatch(
        user_id=inst.user_id,
        profile=np.asarray(inst.profile, dtype=np.int64),
        cand_cat=cand_cat, cand_dense=cand_dense, cand_mask=cand_mask,
        labels=labels, logged_positions=logged,
        hist_cat=hist_cat, hist_dense=hist_dense, hist_mask=hist_mask,
        intervals=intervals, item_ids=item_ids,
    )


def pad_and_batch(instances: Sequence[RankingInstance], n_max: int, m_max: int,
                  schema: FeatureSchema) -> list[PaddedBatch]:
    return [pad_instance(inst, n_max, m_max, schema) for inst in instances]


# ---------------------------------------------------------------------------
# Synthetic click logs with planted position bias.

def position_bias(pos: int) -> float:
    """Examination probability planted by the generator: 1/log2(pos+1)."""
    return 1.0 / math.log2(pos + 1)


@dataclass
class SynthConfig:
    """Knobs for the synthetic click-log generator.

    Click probability for a candidate at logged position p is
    sigmoid(affinity) * position_bias(p).  The affinity mixes several
    planted effects, each aimed at a different part of the model:

    * long-term category preference (a few liked categories per user) and
      a short-term boost that decays with the *time* since each history
      click; history gaps are drawn at random, so time and list position
      carry different information;
    * a price-affinity term: the product of a candidate's dense "price"
      feature with the user's historical average price (an item-level
      interaction between dense features, invisible to categorical-only
      paths);
    * a streak-fatigue term: when the most recent history items all share
      one category, the user is saturated and candidates of that category
      take a penalty (an order-sensitive effect that recency counting
      alone gets backwards);
    * a small per-item quality effect and a within-list contrast term.
    """

    num_users: int = 100
    n: int = 10
    m: int = 15
    vocab_sizes: tuple[int, ...] = (21, 13, 13)
    user_vocab_sizes: tuple[int, ...] = (50,)
    d_dense: int = 4
    d_embed: int = 8
    seed: int = 0
    affinity_weight: float = 4.0
    affinity_offset: float = 2.5
    short_term_weight: float = 2.5
    short_term_tau: float = 2.0
    quality_weight: float = 0.3
    contrast_weight: float = 0.8
    liked_categories: int = 3
    disliked_level: float = 0.2
    price_weight: float = 2.0
    streak_weight: float = -2.0
    streak_length: int = 3
    gap_scale: float = 1.0

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            vocab_sizes=tuple(self.vocab_sizes),
            d_dense=self.d_dense,
            d_embed=self.d_embed,
            user_vocab_sizes=tuple(self.user_vocab_sizes),
        )

    def to_json(self) -> dict:
        return {
            "num_users": self.num_users, "n": self.n, "m": self.m,
            "vocab_sizes": list(self.vocab_sizes),
            "user_vocab_sizes": list(self.user_vocab_sizes),
            "d_dense": self.d_dense, "d_embed": self.d_embed, "seed": self.seed,
            "affinity_weight": self.affinity_weight,
            "affinity_offset": self.affinity_offset,
            "short_term_weight": self.short_term_weight,
            "short_term_tau": self.short_term_tau,
            "quality_weight": self.quality_weight,
            "contrast_weight": self.contrast_weight,
            "liked_categories": self.liked_categories,
            "disliked_level": self.disliked_level,
            "price_weight": self.price_weight,
            "streak_weight": self.streak_weight,
            "streak_length": self.streak_length,
            "gap_scale": self.gap_scale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        kwargs = dict(obj)
        for key in ("vocab_sizes", "user_vocab_sizes"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class SynthTruth:
    """Ground truth emitted alongside a synthetic dataset."""

    position_bias: list[float] = field(default_factory=list)
    user_preferences: dict[int, list[float]] = field(default_factory=dict)
    user_prices: dict[int, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "position_bias": self.position_bias,
            "user_preferences": {str(u): p for u, p in self.user_preferences.items()},
            "user_prices": {str(u): p for u, p in self.user_prices.items()},
            "config": self.config,
        }


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def synth_generate(config: SynthConfig) -> tuple[list[RankingInstance], SynthTruth]:
    """Generate a seed-deterministic dataset with known click mechanics.

    Each user has a positive long-term preference over field-0 categories
    (a few liked categories stand out when ``liked_categories`` > 0);
    history items are drawn from that preference, candidates uniformly.
    The candidate order is independent of affinity, so the category-wise
    propensity estimator can recover the planted position bias.
    """
    if config.n < 1:
        raise DataError("synthetic config needs n >= 1")
    if config.num_users < 1:
        raise DataError("synthetic config needs num_users >= 1")
    if config.m < 0:
        raise DataError("synthetic config needs m >= 0")
    schema = config.schema()
    rng = np.random.default_rng(config.seed)
    n_cat = config.vocab_sizes[0] - 1  # real categories, excluding the pad index
    if n_cat < 1:
        raise DataError("field 0 needs at least one non-padding category")

    truth = SynthTruth(
        position_bias=[position_bias(p) for p in range(1, config.n + 1)],
        config=config.to_json(),
    )
    instances = []
    next_item_id = 1
    for uid in range(1, config.num_users + 1):
        profile = tuple(int(rng.integers(1, v)) if v > 1 else 0
                        for v in config.user_vocab_sizes)
        if config.liked_categories > 0:
            pref = np.full(n_cat, config.disliked_level)
            liked = rng.choice(n_cat, size=min(config.liked_categories, n_cat),
                               replace=False)
            pref[liked] = rng.uniform(0.8, 1.0, size=liked.size)
        else:
            pref = rng.uniform(0.05, 1.0, size=n_cat)
        truth.user_preferences[uid] = [round(float(x), 6) for x in pref]
        pref_dist = pref / pref.sum()

        avg_price = float(rng.normal(0.0, 1.0))
        truth.user_prices[uid] = round(avg_price, 6)

        # History: chronological, categories drawn from the user's preference.
        # Intervals accumulate random gaps, so elapsed time and list position
        # are distinct signals.  With probability 1/2 the newest items form a
        # single-category streak.
        hist_cats = [int(rng.choice(n_cat, p=pref_dist)) + 1 for _ in range(config.m)]
        streak_cat = 0
        if (config.streak_weight and config.m >= config.streak_length
                and rng.random() < 0.5):
            streak_cat = int(rng.integers(1, n_cat + 1))
            for j in range(config.m - config.streak_length, config.m):
                hist_cats[j] = streak_cat
        gaps = rng.exponential(config.gap_scale, size=config.m)
        ages = np.cumsum(gaps)[::-1]  # chronological: oldest first, largest age
        history = []
        boost = np.zeros(n_cat)
        for j in range(config.m):
            t = float(ages[j])
            cat0 = hist_cats[j]
            cats = (cat0,) + tuple(int(rng.integers(1, v)) if v > 1 else 0
                                   for v in config.vocab_sizes[1:])
            dense = list(rng.normal(0.0, 1.0, size=config.d_dense))
            if config.d_dense >= 2:
                dense[1] = avg_price + float(rng.normal(0.0, 0.3))
            history.append(ItemRecord(
                item_id=next_item_id, cat_feats=cats,
                dense_feats=tuple(float(x) for x in dense), time_interval=t))
            next_item_id += 1
            boost[cat0 - 1] += math.exp(-t / config.short_term_tau)

        # Candidates: uniform categories, logged order independent of affinity.
        cand_cats = rng.integers(1, n_cat + 1, size=config.n)
        quality = rng.normal(0.0, 1.0, size=config.n)
        prices = rng.normal(0.0, 1.0, size=config.n)
        match = np.array([
            pref[c - 1] + config.short_term_weight * boost[c - 1] for c in cand_cats])
        extras = np.zeros(config.n)
        if config.d_dense >= 2 and config.price_weight:
            extras += config.price_weight * prices * avg_price
        if streak_cat:
            extras += config.streak_weight * (cand_cats == streak_cat)
        raw = match + extras + config.quality_weight * quality
        centered = raw - raw.mean()
        candidates = []
        for i in range(config.n):
            cat0 = int(cand_cats[i])
            cats = (cat0,) + tuple(int(rng.integers(1, v)) if v > 1 else 0
                                   for v in config.vocab_sizes[1:])
            dense = list(rng.normal(0.0, 1.0, size=config.d_dense))
            if config.d_dense:
                dense[0] = float(quality[i])
            if config.d_dense >= 2:
                dense[1] = float(prices[i])
            pos = i + 1
            logit = (config.affinity_weight * match[i]
                     + extras[i]
                     + config.quality_weight * quality[i]
                     + config.contrast_weight * centered[i]
                     - config.affinity_offset)
            p_click = _sigmoid(logit) * position_bias(pos)
            label = int(rng.random() < p_click)
            candidates.append(ItemRecord(
                item_id=next_item_id, cat_feats=cats,
                dense_feats=tuple(float(x) for x in dense),
                label=label, logged_position=pos))
            next_item_id += 1
        instances.append(RankingInstance(
            user_id=uid, profile=profile, candidates=candidates, history=history))
    return instances, truth


def train_test_split(instances: Sequence[RankingInstance], ratio: float,
                     seed: int) -> tuple[list[RankingInstance], list[RankingInstance]]:
    """Disjoint split by user, deterministic in the seed.

    ``ratio`` is the training fraction; at least one instance lands on each
    side when the dataset has two or more entries.
    """
    if not instances:
        raise DataError("cannot split an empty dataset")
    if not (0.0 < ratio < 1.0):
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(instances))
    cut = int(round(len(instances) * ratio))
    cut = min(max(cut, 1), len(instances) - 1) if len(instances) > 1 else cut
    train_idx = sorted(order[:cut])
    test_idx = sorted(order[cut:])
    return ([instances[i] for i in train_idx], [instances[i] for i in test_idx])
