"""Embedding layer: categorical lookup plus raw dense features.

One table per categorical field, shared between candidates and history, so
an item embeds identically wherever it appears.  Row 0 of every table is
the padding row: initialized to zero and excluded from optimizer updates,
which keeps padded slots exactly neutral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FeatureSchema, ItemRecord, PaddedBatch, RankingInstance, pad_instance


@dataclass
class EmbeddingTables:
    """Per-field item tables, per-field user tables, optional dense scaling."""

    item_tables: list[Tensor]      # field f: [vocab_sizes[f], d_embed]
    user_tables: list[Tensor]      # field g: [user_vocab_sizes[g], d_embed]
    schema: FeatureSchema
    dense_mean: np.ndarray | None = None
    dense_std: np.ndarray | None = None

    @property
    def d_item(self) -> int:
        return self.schema.d_item

    @property
    def d_user(self) -> int:
        return self.schema.d_user

    def transform_dense(self, dense: np.ndarray) -> np.ndarray:
        if self.dense_mean is None:
            return dense
        return (dense - self.dense_mean) / self.dense_std


def init_tables(schema: FeatureSchema, rng: np.random.Generator) -> EmbeddingTables:
    """Uniform(-1/sqrt(d_e), +1/sqrt(d_e)) entries with zeroed padding rows."""
    bound = 1.0 / np.sqrt(schema.d_embed)

    def make(vocab: int) -> Tensor:
        w = rng.uniform(-bound, bound, size=(vocab, schema.d_embed))
        w[0, :] = 0.0
        return Tensor(w, requires_grad=True)

    return EmbeddingTables(
        item_tables=[make(v) for v in schema.vocab_sizes],
        user_tables=[make(v) for v in schema.user_vocab_sizes],
        schema=schema,
    )


def set_dense_standardization(tables: EmbeddingTables,
                              instances, eps: float = 1e-8) -> None:
    """Fit per-dimension mean/std of dense features on the given split."""
    if tables.schema.d_dense == 0:
        return
    rows = []
    for inst in instances:
        for item in list(inst.candidates) + list(inst.history):
            rows.append(item.dense_feats)
    dense = np.asarray(rows, dtype=np.float64)
    tables.dense_mean = dense.mean(axis=0)
    tables.dense_std = dense.std(axis=0) + eps


def embed_item(item: ItemRecord, tables: EmbeddingTables) -> np.ndarray:
    """Concatenated field embeddings followed by dense features; no grad."""
    schema = tables.schema
    parts = []
    for f, idx in enumerate(item.cat_feats):
        table = tables.item_tables[f]
        if not (0 <= idx < table.shape[0]):
            raise IndexError(f"categorical index {idx} out of range for field {f}")
        parts.append(table.data[idx])
    dense = tables.transform_dense(np.asarray(item.dense_feats, dtype=np.float64))
    if schema.d_dense:
        parts.append(dense)
    return np.concatenate(parts)


def embed_user(profile, tables: EmbeddingTables) -> np.ndarray:
    parts = []
    for g, idx in enumerate(profile):
        table = tables.user_tables[g]
        if not (0 <= idx < table.shape[0]):
            raise IndexError(f"profile index {idx} out of range for user field {g}")
        parts.append(table.data[idx])
    return np.concatenate(parts)


@dataclass
class InstanceEmbedding:
    """Differentiable embeddings of one instance.

    ``cand_fields`` is the candidate categorical block flattened to
    [n*k, d_embed] with rows grouped per item (item i occupies rows
    i*k .. i*k+k-1); the first k*d_embed columns of ``cand`` equal that
    block row-flattened, which the feature-level affinity relies on.
    """

    cand: Tensor          # [n, d_item]
    hist: Tensor          # [m, d_item]
    user: Tensor          # [1, d_user]
    cand_fields: Tensor   # [n*k, d_embed]
    hist_fields: Tensor   # [m*k, d_embed]


def _embed_items(cat: np.ndarray, dense: np.ndarray,
                 tables: EmbeddingTables) -> tuple[Tensor, Tensor]:
    """Embed a [rows, k] categorical block plus dense features."""
    schema = tables.schema
    rows = cat.shape[0]
    if rows == 0:
        zero_fields = Tensor(np.zeros((0, schema.d_embed)))
        return Tensor(np.zeros((0, schema.d_item))), zero_fields
    looked = [ad.gather_rows(tables.item_tables[f], cat[:, f]) for f in range(schema.k)]
    cat_block = ad.concat_cols(looked)  # [rows, k*d_embed]
    fields = ad.reshape(cat_block, rows * schema.k, schema.d_embed)
    if schema.d_dense:
        dense_t = Tensor(tables.transform_dense(dense))
        full = ad.concat_cols([cat_block, dense_t])
    else:
        full = cat_block
    return full, fields


def embed_instance(inst: RankingInstance | "object", tables: EmbeddingTables,
                   n_pad: int | None = None, m_pad: int | None = None) -> InstanceEmbedding:
    """Embed an instance (or an already padded batch) as graph tensors.

    Optional ``n_pad``/``m_pad`` extend the arrays with padding slots
    (index 0, zero dense) past the real entries.
    """
    if isinstance(inst, PaddedBatch):
        batch = inst
    else:
        n_to = n_pad if n_pad is not None else inst.n
        m_to = m_pad if m_pad is not None else inst.m
        batch = pad_instance(inst, n_to, m_to, tables.schema)

    cand, cand_fields = _embed_items(batch.cand_cat, batch.cand_dense, tables)
    hist, hist_fields = _embed_items(batch.hist_cat, batch.hist_dense, tables)
    if tables.schema.user_vocab_sizes:
        user_parts = [ad.gather_rows(tables.user_tables[g], [batch.profile[g]])
                      for g in range(len(tables.schema.user_vocab_sizes))]
        user = ad.concat_cols(user_parts)
    else:
        user = Tensor(np.zeros((1, 0)))
    return InstanceEmbedding(cand=cand, hist=hist, user=user,
                             cand_fields=cand_fields, hist_fields=hist_fields)
