"""Set-to-list attention between the candidate set and the history list.

The pipeline: bilinear item-level affinity tanh(S W L^T), a feature-level
affinity that scores every categorical-field pair and mixes the k x k grid
with learned weights, an additive combination, a user-specific exponential
interest decay over history age, and finally an asymmetric attention that
produces one history-aware summary row per candidate.

Two attention parameterizations exist:

* ``literal`` projects candidates onto a fixed number of learned columns
  (one per candidate slot, lists padded to that length), so attention
  logits live on fixed positions.
* ``equivariant`` (the default) replaces the fixed columns with
  item-conditioned keys, Q_S = tanh((S Wa)(S Wb)^T + C (L Wl)(S Wb)^T)
  and Q_L = tanh(((S Wa)(S Wb)^T) C), making both the rows and the
  columns of the logits track candidate identity; permuting the
  candidates then permutes every output exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MODES = ("literal", "equivariant")


@dataclass
class DecayParameters:
    """Two-layer net mapping the user embedding to a positive decay rate."""

    hidden_w: Tensor
    hidden_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.hidden_w": self.hidden_w, f"{prefix}.hidden_b": self.hidden_b,
                f"{prefix}.out_w": self.out_w, f"{prefix}.out_b": self.out_b}


@dataclass
class SLAttentionParameters:
    """All learnable tensors of the set-to-list block.

    ``cand_proj``/``hist_proj_literal`` exist in literal mode (columns =
    candidate slots); ``query_proj``/``key_proj``/``hist_proj`` exist in
    equivariant mode.  Unused ones are None.
    """

    item_weight: Tensor                 # [2*d_item, d_item + 2*d_hidden]
    feature_weight: Tensor              # [d_embed, d_embed]
    field_mix: Tensor                   # [k, k]
    decay: DecayParameters
    query_proj: Tensor | None = None    # [2*d_item, d_attn]
    key_proj: Tensor | None = None      # [2*d_item, d_attn]
    hist_proj: Tensor | None = None     # [d_item + 2*d_hidden, d_attn]
    cand_proj: Tensor | None = None     # [2*d_item, n_max]
    hist_proj_literal: Tensor | None = None  # [d_item + 2*d_hidden, n_max]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.item_weight": self.item_weight,
               f"{prefix}.feature_weight": self.feature_weight,
               f"{prefix}.field_mix": self.field_mix}
        out.update(self.decay.named(f"{prefix}.decay"))
        for name in ("query_proj", "key_proj", "hist_proj", "cand_proj", "hist_proj_literal"):
            t = getattr(self, name)
            if t is not None:
                out[f"{prefix}.{name}"] = t
        return out


def init_slattention(d_item: int, d_hidden: int, d_embed: int, k: int, d_user: int,
                     mode: str, d_attn: int, n_max: int, decay_hidden: int,
                     rng: np.random.Generator) -> SLAttentionParameters:
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}; expected one of {MODES}")
    d_set = 2 * d_item
    d_list = d_item + 2 * d_hidden

    def uniform(rows: int, cols: int) -> Tensor:
        bound = 1.0 / math.sqrt(rows)
        return Tensor(rng.uniform(-bound, bound, (rows, cols)), True)

    decay = DecayParameters(
        hidden_w=uniform(max(d_user, 1), decay_hidden),
        hidden_b=Tensor(np.zeros((1, decay_hidden)), True),
        out_w=uniform(decay_hidden, 1),
        # Start with a small decay rate so long histories are not wiped out
        # before training has a say: softplus(-2) ~ 0.13.
        out_b=Tensor(np.full((1, 1), -2.0), True),
    )
    # The bilinear feature form starts at the identity (plus a small
    # perturbation) so same-feature pairs score high from step one; the
    # field mix starts flat and positive.  Both give the affinity path
    # usable gradients immediately instead of a near-uniform softmax.
    feature_weight = Tensor(
        np.eye(d_embed) * d_embed / 2.0
        + rng.uniform(-1, 1, (d_embed, d_embed)) / math.sqrt(d_embed), True)
    params = SLAttentionParameters(
        item_weight=uniform(d_set, d_list),
        feature_weight=feature_weight,
        field_mix=Tensor(np.full((k, k), 1.0 / k) + rng.uniform(-0.1, 0.1, (k, k)), True),
        decay=decay,
    )
    if mode == "equivariant":
        params.query_proj = uniform(d_set, d_attn)
        params.key_proj = uniform(d_set, d_attn)
        params.hist_proj = uniform(d_list, d_attn)
    else:
        params.cand_proj = uniform(d_set, n_max)
        params.hist_proj_literal = uniform(d_list, n_max)
    return params


@dataclass
class AffinityBundle:
    """Intermediate matrices of one forward pass, kept for inspection.

    All candidate-indexed rows align with the instance's candidate order;
    history-indexed columns align with chronological history order.
    ``list_attention`` is None when the history is empty.
    """

    item_affinity: Tensor        # [n, m]
    feature_affinity: Tensor     # [n, m]
    combined_affinity: Tensor    # [n, m]
    decay_matrix: Tensor         # [n, m]
    decayed_affinity: Tensor     # [n, m]
    set_attention: Tensor        # [n, n]
    list_attention: Tensor | None  # [n, m]
    decay_rate: float


def build_representations(cand: Tensor, attended: Tensor, hist: Tensor,
                          states: Tensor) -> tuple[Tensor, Tensor]:
    """Concatenate item embeddings with their interaction encodings."""
    if cand.shape[0] != attended.shape[0]:
        raise ShapeError(f"candidate rows {cand.shape} vs attention rows {attended.shape}")
    if hist.shape[0] != states.shape[0]:
        raise ShapeError(f"history rows {hist.shape} vs state rows {states.shape}")
    set_repr = ad.concat_cols([cand, attended])
    list_repr = (ad.concat_cols([hist, states]) if hist.shape[0] > 0
                 else Tensor(np.zeros((0, hist.shape[1] + states.shape[1]))))
    return set_repr, list_repr


def item_affinity(set_repr: Tensor, list_repr: Tensor, weight: Tensor) -> Tensor:
    """tanh(S W L^T): bilinear similarity of every candidate/history pair."""
    if set_repr.shape[1] != weight.shape[0] or list_repr.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"item_affinity: S {set_repr.shape}, W {weight.shape}, L {list_repr.shape}")
    return ad.tanh(ad.matmul(ad.matmul(set_repr, weight), ad.transpose(list_repr)))


def block_weighted_sum(grid: Tensor, weights: Tensor, n: int, m: int, k: int) -> Tensor:
    """Reduce an [n*k, m*k] grid to [n, m] by weighting each k x k block.

    out[i, j] = sum_{s,t} grid[i*k+s, j*k+t] * weights[s, t]
    """
    if grid.shape != (n * k, m * k) or weights.shape != (k, k):
        raise ShapeError(f"block_weighted_sum: grid {grid.shape}, weights {weights.shape} "
                         f"for n={n}, m={m}, k={k}")
    g4 = grid.data.reshape(n, k, m, k)
    out = np.einsum("isjt,st->ij", g4, weights.data)

    def backward(g: np.ndarray) -> None:
        if grid.requires_grad:
            d_grid = np.einsum("ij,st->isjt", g, weights.data)
            grid.accumulate_grad(d_grid.reshape(n * k, m * k))
        if weights.requires_grad:
            weights.accumulate_grad(np.einsum("isjt,ij->st", g4, g))

    return ad.lift(out, [grid, weights], backward)


def feature_affinity(cand_fields: Tensor, hist_fields: Tensor, feature_weight: Tensor,
                     field_mix: Tensor, n: int, m: int, k: int) -> Tensor:
    """Categorical-field interaction reduced per item pair.

    ``cand_fields``/``hist_fields`` stack each item's k field embeddings as
    consecutive rows.  Every field pair (s, t) of every item pair (i, j)
    is scored with the bilinear form tanh(e_s W e_t), and the k x k result
    is mixed into a scalar by ``field_mix``.
    """
    if m == 0:
        return Tensor(np.zeros((n, 0)))
    inner = ad.matmul(ad.matmul(cand_fields, feature_weight), ad.transpose(hist_fields))
    return block_weighted_sum(ad.tanh(inner), field_mix, n, m, k)


def combine_affinity(item_level: Tensor, feature_level: Tensor) -> Tensor:
    return ad.add(item_level, feature_level)


def decay_rate(user_vec: Tensor, decay: DecayParameters) -> Tensor:
    """Positive per-user decay rate: softplus of a two-layer LeakyReLU net."""
    hidden = ad.leaky_relu(ad.add(ad.matmul(user_vec, decay.hidden_w), decay.hidden_b))
    raw = ad.add(ad.matmul(hidden, decay.out_w), decay.out_b)
    return ad.softplus(raw)


def interest_decay(user_vec: Tensor, intervals: np.ndarray, combined: Tensor,
                   decay: DecayParameters) -> tuple[Tensor, Tensor, Tensor]:
    """Emphasize recent history: C = C_A + C_A * exp(-theta * t) per column.

    Returns (theta, decay matrix broadcast to candidate rows, decayed
    affinity).  Intervals must be nonnegative; t = 0 means "now", so a
    zero-interval column is doubled.
    """
    t = np.asarray(intervals, dtype=np.float64).reshape(1, -1)
    if np.any(t < 0):
        raise ValueError("interest_decay: negative time interval")
    n, m = combined.shape
    if t.shape[1] != m:
        raise ShapeError(f"interest_decay: {t.shape[1]} intervals for {m} history columns")
    theta = decay_rate(user_vec, decay)
    decay_row = ad.exp(ad.neg(ad.mul(theta, Tensor(t))))          # [1, m]
    decay_full = ad.matmul(Tensor(np.ones((n, 1))), decay_row)     # [n, m] for inspection
    decayed = ad.add(combined, ad.mul(combined, decay_row))
    return theta, decay_full, decayed


def attend(set_repr: Tensor, list_repr: Tensor, affinity: Tensor | None,
           params: SLAttentionParameters, mode: str,
           cand_mask: np.ndarray | None = None,
           hist_mask: np.ndarray | None = None,
           ) -> tuple[Tensor, Tensor | None, Tensor, Tensor]:
    """Asymmetric attention from the decayed affinity.

    Returns (candidate attention [n, n], history attention [n, m] or None,
    candidate summary, history summary).  With an empty history the
    affinity term drops out and the history summary is all zeros.
    """
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    n = set_repr.shape[0]
    m = list_repr.shape[0]
    col_mask = None
    if cand_mask is not None:
        col_mask = np.broadcast_to(np.asarray(cand_mask, bool).reshape(1, n), (n, n))

    if mode == "equivariant":
        keys_t = ad.transpose(ad.matmul(set_repr, params.key_proj))     # [d_attn, n]
        queries = ad.matmul(set_repr, params.query_proj)                # [n, d_attn]
        pair_logits = ad.matmul(queries, keys_t)                        # [n, n]
        if m > 0:
            hist_term = ad.matmul(affinity, ad.matmul(list_repr, params.hist_proj))
            cand_logits = ad.tanh(ad.matmul(ad.add(queries, hist_term), keys_t))
        else:
            cand_logits = ad.tanh(pair_logits)
        set_attention = ad.softmax_rows(cand_logits, col_mask)
        if m > 0:
            list_logits = ad.tanh(ad.matmul(pair_logits, affinity))
    else:
        slots = params.cand_proj.shape[1]
        if n != slots:
            raise ShapeError(
                f"literal mode operates on {slots} padded candidate slots, got {n} rows")
        projected = ad.matmul(set_repr, params.cand_proj)               # [n, n_max]
        if m > 0:
            hist_term = ad.matmul(affinity, ad.matmul(list_repr, params.hist_proj_literal))
            cand_logits = ad.tanh(ad.add(projected, hist_term))
        else:
            cand_logits = ad.tanh(projected)
        set_attention = ad.softmax_rows(cand_logits, col_mask)
        if m > 0:
            list_logits = ad.tanh(ad.matmul(projected, affinity))

    cand_summary = ad.matmul(set_attention, set_repr)
    if m == 0:
        list_attention = None
        list_summary = Tensor(np.zeros((n, list_repr.shape[1])))
    else:
        list_attention = ad.softmax_rows(list_logits, hist_mask)
        list_summary = ad.matmul(list_attention, list_repr)
    return set_attention, list_attention, cand_summary, list_summary
