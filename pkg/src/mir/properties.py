"""Permutation-equivariance and invariance checkers.

``check_equivariance`` probes any row-aligned matrix function f with
random row permutations and reports the worst deviation of f(pi X) from
pi f(X).  ``check_invariance`` does the end-to-end version for the model:
shuffling the candidates of an instance must leave every candidate's
score (and therefore the reranked item sequence) unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import RankingInstance
from .model import ModelParameters, rerank, score

__all__ = [
    "PermutationTrial",
    "InvarianceReport",
    "check_equivariance",
    "check_invariance",
    "permute_candidates",
    "random_instances",
]


@dataclass
class PermutationTrial:
    instance_id: int
    permutation: list[int]
    max_deviation: float
    sequence_equal: bool

    def to_json(self) -> dict:
        return {"instance": self.instance_id, "permutation": self.permutation,
                "max_deviation": self.max_deviation, "sequence_equal": self.sequence_equal}


@dataclass
class InvarianceReport:
    mode: str
    tolerance: float
    trials: list[PermutationTrial] = field(default_factory=list)

    @property
    def max_deviation(self) -> float:
        return max((t.max_deviation for t in self.trials), default=0.0)

    @property
    def sequences_equal(self) -> bool:
        return all(t.sequence_equal for t in self.trials)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance and self.sequences_equal

    def to_json(self, include_trials: bool = False) -> dict:
        out = {
            "mode": self.mode,
            "tolerance": self.tolerance,
            "trials": len(self.trials),
            "max_deviation": self.max_deviation,
            "sequences_equal": self.sequences_equal,
            "passed": self.passed,
        }
        if include_trials:
            out["trial_details"] = [t.to_json() for t in self.trials]
        return out


def check_equivariance(f: Callable[[np.ndarray], np.ndarray],
                       inputs: Sequence[np.ndarray], trials: int, seed: int,
                       tol: float, mode: str = "component") -> InvarianceReport:
    """Verify f(pi X) == pi f(X) over random permutations of each input.

    ``f`` must be row-aligned: output row i belongs to input row i.  A
    shape-changing f is rejected.
    """
    rng = np.random.default_rng(seed)
    report = InvarianceReport(mode=mode, tolerance=tol)
    for idx, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        base = np.asarray(f(x))
        if base.shape[0] != x.shape[0]:
            raise ValueError(f"function is not row-aligned: {x.shape[0]} rows in, "
                             f"{base.shape[0]} rows out")
        for _ in range(trials):
            perm = rng.permutation(x.shape[0])
            permuted = np.asarray(f(x[perm]))
            deviation = float(np.abs(permuted - base[perm]).max()) if base.size else 0.0
            report.trials.append(PermutationTrial(
                instance_id=idx, permutation=perm.tolist(),
                max_deviation=deviation, sequence_equal=deviation <= tol))
    return report


def permute_candidates(inst: RankingInstance, perm) -> RankingInstance:
    perm = list(perm)
    return RankingInstance(
        user_id=inst.user_id,
        profile=inst.profile,
        candidates=[inst.candidates[i] for i in perm],
        history=list(inst.history),
    )


def check_invariance(params: ModelParameters, instances: Sequence[RankingInstance],
                     trials: int, seed: int, tol: float) -> InvarianceReport:
    """Shuffle candidates and compare per-item scores and rerank order.

    For each instance and random permutation, the permuted instance is
    scored from scratch; candidate j of the permuted input must score
    exactly like the original candidate perm[j], and sorting must emit
    the same item-id sequence.
    """
    rng = np.random.default_rng(seed)
    report = InvarianceReport(mode=params.config.mode, tolerance=tol)
    for idx, inst in enumerate(instances):
        base_scores = score(params, inst)
        base_order = rerank(params, inst)
        base_ids = [inst.candidates[i].item_id for i in base_order]
        for _ in range(trials):
            perm = rng.permutation(inst.n)
            shuffled = permute_candidates(inst, perm)
            new_scores = score(params, shuffled)
            deviation = float(np.abs(new_scores - base_scores[perm]).max())
            new_order = rerank(params, shuffled)
            new_ids = [shuffled.candidates[i].item_id for i in new_order]
            report.trials.append(PermutationTrial(
                instance_id=idx, permutation=perm.tolist(),
                max_deviation=deviation, sequence_equal=new_ids == base_ids))
    return report


def random_instances(schema, n: int, m: int, count: int, seed: int,
                     n_jitter: bool = False) -> list[RankingInstance]:
    """Feature-random instances for checks that need no click mechanics."""
    from .data import ItemRecord

    rng = np.random.default_rng(seed)
    out = []
    item_id = 1
    for uid in range(1, count + 1):
        size = int(rng.integers(2, n + 1)) if n_jitter else n
        profile = tuple(int(rng.integers(1, v)) if v > 1 else 0
                        for v in schema.user_vocab_sizes)
        cands = []
        for i in range(size):
            cands.append(ItemRecord(
                item_id=item_id,
                cat_feats=tuple(int(rng.integers(1, v)) if v > 1 else 0
                                for v in schema.vocab_sizes),
                dense_feats=tuple(float(x) for x in rng.normal(0, 1, schema.d_dense)),
                label=int(rng.random() < 0.3),
                logged_position=i + 1))
            item_id += 1
        hist = []
        for j in range(m):
            hist.append(ItemRecord(
                item_id=item_id,
                cat_feats=tuple(int(rng.integers(1, v)) if v > 1 else 0
                                for v in schema.vocab_sizes),
                dense_feats=tuple(float(x) for x in rng.normal(0, 1, schema.d_dense)),
                time_interval=float(m - 1 - j)))
            item_id += 1
        out.append(RankingInstance(user_id=uid, profile=profile,
                                   candidates=cands, history=hist))
    return out
