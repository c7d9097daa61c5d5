"""Ranking and utility metrics, including IPS-debiased variants.

Propensities are estimated category-wise from logged clicks: the click
count of a category at each position, normalized by that category's
clicks at position 1, clipped to [p_min, 1].  Debiased DCG divides each
gain by the propensity of the item's *logged* position, and the utility
metric reweights clicks by the propensity ratio between the new and the
logged position.

Per-list conventions: lists without any click are skipped by MAP/NDCG/
deNDCG (excluded from the mean) but count into Utility with value 0.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import RankingInstance

__all__ = [
    "ClickCounts",
    "PropensityTable",
    "count_clicks",
    "estimate_propensity",
    "map_at_k",
    "ndcg_at_k",
    "dendcg_at_k",
    "utility_at_k",
    "EvalReport",
    "evaluate_model",
]


def _discount(position: int) -> float:
    return 1.0 / math.log2(position + 1)


@dataclass
class ClickCounts:
    """Click tallies by (category, logged position); supports streaming."""

    by_category: dict[int, dict[int, int]] = field(default_factory=dict)
    marginal: dict[int, int] = field(default_factory=dict)

    def add(self, category: int, position: int, clicked: int) -> None:
        if not clicked:
            return
        self.by_category.setdefault(category, defaultdict(int))[position] += 1
        self.marginal[position] = self.marginal.get(position, 0) + 1


def count_clicks(instances: Iterable[RankingInstance],
                 counts: ClickCounts | None = None) -> ClickCounts:
    counts = counts if counts is not None else ClickCounts()
    for inst in instances:
        for cand in inst.candidates:
            counts.add(cand.category, cand.logged_position, cand.label)
    return counts


@dataclass
class PropensityTable:
    """(category, position) -> observation propensity in [p_min, 1]."""

    values: dict[tuple[int, int], float]
    marginal: dict[int, float]
    p_min: float
    smoothing: float

    def lookup(self, category: int, position: int) -> float:
        v = self.values.get((category, position))
        if v is not None:
            return v
        v = self.marginal.get(position)
        if v is not None:
            return v
        return self.p_min

    def to_json(self) -> dict:
        return {
            "p_min": self.p_min,
            "smoothing": self.smoothing,
            "marginal": {str(p): v for p, v in sorted(self.marginal.items())},
            "values": {f"{c}:{p}": v for (c, p), v in sorted(self.values.items())},
        }

    @classmethod
    def constant(cls, value: float = 1.0) -> "PropensityTable":
        """A degenerate table answering ``value`` everywhere (for tests)."""
        return cls(values={}, marginal=defaultdict(lambda: value), p_min=value,
                   smoothing=0.0)

    @classmethod
    def from_position_bias(cls, bias: Sequence[float], p_min: float = 0.0) -> "PropensityTable":
        marginal = {p + 1: max(float(b), p_min) for p, b in enumerate(bias)}
        return cls(values={}, marginal=marginal, p_min=max(p_min, min(marginal.values())),
                   smoothing=0.0)


def estimate_propensity(source, p_min: float = 0.05,
                        smoothing: float = 1.0) -> PropensityTable:
    """Build the category-wise propensity table from logged clicks.

    ``source`` is either an iterable of instances or a pre-accumulated
    ``ClickCounts``.  A category with no position-1 clicks cannot be
    normalized and falls back to the all-category estimate.
    """
    if not (0.0 < p_min <= 1.0):
        raise ValueError(f"p_min must be in (0, 1], got {p_min}")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    counts = source if isinstance(source, ClickCounts) else count_clicks(source)

    def clip(x: float) -> float:
        return min(1.0, max(p_min, x))

    marginal: dict[int, float] = {}
    base = counts.marginal.get(1, 0)
    if base + smoothing > 0:
        for pos, c in counts.marginal.items():
            marginal[pos] = clip((c + smoothing) / (base + smoothing))
    values: dict[tuple[int, int], float] = {}
    for cate, per_pos in counts.by_category.items():
        first = per_pos.get(1, 0)
        if first == 0:
            continue  # falls back to the marginal at lookup time
        for pos, c in per_pos.items():
            values[(cate, pos)] = clip((c + smoothing) / (first + smoothing))
    return PropensityTable(values=values, marginal=marginal, p_min=p_min,
                           smoothing=smoothing)


# ---------------------------------------------------------------------------
# Per-list metrics.  ``ranking`` holds candidate indices, best first; the
# remaining arrays align with the original candidate order.

def _check_ranking(ranking, labels, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    r = np.asarray(ranking, dtype=np.int64)
    y = np.asarray(labels)
    if sorted(r.tolist()) != list(range(len(y))):
        raise ValueError("ranking must be a permutation of the candidate indices")
    return r


def ndcg_at_k(ranking, labels, k: int) -> float | None:
    """Binary-gain NDCG truncated at K; None when the list has no clicks."""
    r = _check_ranking(ranking, labels, k)
    y = np.asarray(labels, dtype=np.float64)
    total = int(y.sum())
    if total == 0:
        return None
    depth = min(k, len(r))
    dcg = sum(y[r[i]] * _discount(i + 1) for i in range(depth))
    ideal = sum(_discount(i + 1) for i in range(min(total, depth)))
    return float(dcg / ideal)


def map_at_k(ranking, labels, k: int) -> float | None:
    """Average precision truncated at K; None when the list has no clicks."""
    r = _check_ranking(ranking, labels, k)
    y = np.asarray(labels, dtype=np.float64)
    total = int(y.sum())
    if total == 0:
        return None
    depth = min(k, len(r))
    hits = 0
    acc = 0.0
    for i in range(depth):
        if y[r[i]]:
            hits += 1
            acc += hits / (i + 1)
    return float(acc / min(total, k))


def dendcg_at_k(ranking, labels, logged_positions, categories,
                prop: PropensityTable, k: int) -> float | None:
    """NDCG on IPS-weighted gains y / prop(category, logged position).

    The normalizer is the ideal ordering of the weighted gains, i.e. the
    gains sorted descending (optimal because discounts decrease with
    position).  Identical to NDCG when all propensities are 1.
    """
    r = _check_ranking(ranking, labels, k)
    y = np.asarray(labels, dtype=np.float64)
    if int(y.sum()) == 0:
        return None
    gains = np.array([
        y[i] / prop.lookup(int(categories[i]), int(logged_positions[i]))
        for i in range(len(y))])
    depth = min(k, len(r))
    dcg = sum(gains[r[i]] * _discount(i + 1) for i in range(depth))
    ideal_gains = np.sort(gains)[::-1]
    ideal = sum(ideal_gains[i] * _discount(i + 1) for i in range(depth))
    return float(dcg / ideal)


def utility_at_k(ranking, labels, logged_positions, categories,
                 bids, prop: PropensityTable, k: int) -> float:
    """Expected clicks (or revenue with bids) in the top K after reranking.

    Each clicked item contributes prop(cate, new pos) / prop(cate, logged
    pos), times its bid when bids are given.  Zero-click lists contribute 0.
    """
    r = _check_ranking(ranking, labels, k)
    y = np.asarray(labels, dtype=np.float64)
    total = 0.0
    for new_pos in range(1, min(k, len(r)) + 1):
        i = int(r[new_pos - 1])
        if not y[i]:
            continue
        cate = int(categories[i])
        ratio = prop.lookup(cate, new_pos) / prop.lookup(cate, int(logged_positions[i]))
        weight = float(bids[i]) if bids is not None else 1.0
        total += ratio * weight
    return float(total)


# ---------------------------------------------------------------------------
# Dataset-level aggregation.

@dataclass
class EvalReport:
    k_values: list[int]
    map_: dict[int, float]
    ndcg: dict[int, float]
    dendcg: dict[int, float]
    utility: dict[int, float]
    lists_evaluated: int

    def to_json(self) -> dict:
        return {
            "K": list(self.k_values),
            "MAP": {str(k): v for k, v in self.map_.items()},
            "NDCG": {str(k): v for k, v in self.ndcg.items()},
            "deNDCG": {str(k): v for k, v in self.dendcg.items()},
            "Utility": {str(k): v for k, v in self.utility.items()},
            "lists_evaluated": self.lists_evaluated,
        }


def _instance_arrays(inst: RankingInstance):
    labels = inst.labels()
    logged = np.array([c.logged_position for c in inst.candidates])
    cats = np.array([c.category for c in inst.candidates])
    bids = None
    if all(c.bid is not None for c in inst.candidates):
        bids = np.array([c.bid for c in inst.candidates])
    return labels, logged, cats, bids


def evaluate_ranking_fn(rank_fn, instances: Sequence[RankingInstance],
                        k_values: Sequence[int], prop: PropensityTable) -> EvalReport:
    """Aggregate all metrics over a dataset for an arbitrary ranker.

    ``rank_fn`` maps an instance to a candidate-index permutation.
    """
    k_values = list(k_values)
    sums = {k: {"map": 0.0, "ndcg": 0.0, "dendcg": 0.0, "utility": 0.0} for k in k_values}
    clicked_lists = 0
    for inst in instances:
        ranking = rank_fn(inst)
        labels, logged, cats, bids = _instance_arrays(inst)
        has_clicks = bool(labels.sum())
        if has_clicks:
            clicked_lists += 1
        for k in k_values:
            if has_clicks:
                sums[k]["map"] += map_at_k(ranking, labels, k)
                sums[k]["ndcg"] += ndcg_at_k(ranking, labels, k)
                sums[k]["dendcg"] += dendcg_at_k(ranking, labels, logged, cats, prop, k)
            sums[k]["utility"] += utility_at_k(ranking, labels, logged, cats, bids, prop, k)
    n_lists = len(instances)
    denom = max(clicked_lists, 1)
    return EvalReport(
        k_values=k_values,
        map_={k: sums[k]["map"] / denom for k in k_values},
        ndcg={k: sums[k]["ndcg"] / denom for k in k_values},
        dendcg={k: sums[k]["dendcg"] / denom for k in k_values},
        utility={k: sums[k]["utility"] / n_lists for k in k_values},
        lists_evaluated=n_lists,
    )


def evaluate_model(params, instances: Sequence[RankingInstance],
                   k_values: Sequence[int], prop: PropensityTable) -> EvalReport:
    from .model import rerank
    return evaluate_ranking_fn(lambda inst: rerank(params, inst), instances,
                               k_values, prop)
