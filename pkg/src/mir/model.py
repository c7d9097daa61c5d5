"""Model assembly: configuration, parameters, scoring, loss, reranking,
and binary checkpoints.

The forward pass composes the embedding layer, the candidate
self-attention, the history recurrence, the set-to-list attention, and a
LeakyReLU MLP head ending in a sigmoid, giving one click score per
candidate.  Reranking sorts by score with item-id tie-breaks so the
output never depends on input order.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cross_item, embedding, slattention
from .autodiff import ShapeError, Tensor
from .data import DataError, FeatureSchema, PaddedBatch, RankingInstance, pad_instance

MAGIC = b"MIRCKPT1"
FORMAT_VERSION = 1

ABLATION_FLAGS = {
    "fi": "use_feature_affinity",
    "ii": "use_item_affinity",
    "dcy": "use_decay",
    "set": "use_intra_set",
    "lst": "use_intra_list",
}


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with the model."""


@dataclass(frozen=True)
class ModelConfig:
    d_e: int = 8
    d_h: int = 16
    d_a: int = 16
    heads: int = 1
    mlp_layers: tuple[int, ...] = (64, 32)
    learning_rate: float = 2e-3
    l2: float = 1e-6
    batch_size: int = 16
    epochs: int = 5
    seed: int = 0
    n_max: int = 30
    m_max: int = 30
    mode: str = "equivariant"
    use_feature_affinity: bool = True
    use_item_affinity: bool = True
    use_decay: bool = True
    use_intra_set: bool = True
    use_intra_list: bool = True
    decay_hidden: int = 8
    standardize_dense: bool = False

    def __post_init__(self):
        for name in ("d_e", "d_h", "d_a", "heads", "batch_size", "n_max", "m_max",
                     "decay_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be positive")
        if self.mode not in slattention.MODES:
            raise ValueError(f"mode must be one of {slattention.MODES}, got {self.mode!r}")
        if any(w < 1 for w in self.mlp_layers):
            raise ValueError("MLP layer widths must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def with_ablations(self, names) -> "ModelConfig":
        """Apply ablation toggles by their short names (fi/ii/dcy/set/lst)."""
        changes = {}
        for name in names:
            if name not in ABLATION_FLAGS:
                raise ValueError(f"unknown ablation {name!r}; expected one of "
                                 f"{sorted(ABLATION_FLAGS)}")
            changes[ABLATION_FLAGS[name]] = False
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["mlp_layers"] = list(self.mlp_layers)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "mlp_layers" in kwargs:
            kwargs["mlp_layers"] = tuple(kwargs["mlp_layers"])
        return cls(**kwargs)


@dataclass
class ModelParameters:
    """Every learnable tensor, addressable by name, plus optimizer state."""

    schema: FeatureSchema
    config: ModelConfig
    tables: embedding.EmbeddingTables
    recurrent: cross_item.RecurrentParameters
    slattn: slattention.SLAttentionParameters
    mlp: list[tuple[Tensor, Tensor]]
    named: dict[str, Tensor] = field(default_factory=dict)
    pad_frozen: set[str] = field(default_factory=set)
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0

    def zero_grads(self) -> None:
        for t in self.named.values():
            t.zero_grad()

    @property
    def d_item(self) -> int:
        return self.schema.d_item

    @property
    def mlp_input_width(self) -> int:
        d_item = self.schema.d_item
        return self.schema.d_user + d_item + 2 * d_item + (d_item + 2 * self.config.d_h)


def build_parameters(schema: FeatureSchema, config: ModelConfig,
                     rng: np.random.Generator | None = None) -> ModelParameters:
    """Initialize all tensors from the config seed.

    The effective embedding width is the config's; a schema declaring a
    different width is aligned to it.
    """
    if schema.d_embed != config.d_e:
        schema = dataclasses.replace(schema, d_embed=config.d_e)
    if config.heads > 0 and schema.d_item % config.heads != 0:
        raise ValueError(f"head count {config.heads} does not divide the item "
                         f"width {schema.d_item}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    tables = embedding.init_tables(schema, rng)
    recurrent = cross_item.init_recurrent(schema.d_item, config.d_h, rng)
    slattn = slattention.init_slattention(
        d_item=schema.d_item, d_hidden=config.d_h, d_embed=schema.d_embed,
        k=schema.k, d_user=schema.d_user, mode=config.mode, d_attn=config.d_a,
        n_max=config.n_max, decay_hidden=config.decay_hidden, rng=rng)

    mlp: list[tuple[Tensor, Tensor]] = []
    d_item = schema.d_item
    widths = [schema.d_user + d_item + 2 * d_item + (d_item + 2 * config.d_h)]
    widths += list(config.mlp_layers) + [1]
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True)
        b = Tensor(np.zeros((1, fan_out)), True)
        mlp.append((w, b))

    named: dict[str, Tensor] = {}
    pad_frozen: set[str] = set()
    for f_idx, t in enumerate(tables.item_tables):
        name = f"embed.item.{f_idx}"
        named[name] = t
        pad_frozen.add(name)
    for g_idx, t in enumerate(tables.user_tables):
        name = f"embed.user.{g_idx}"
        named[name] = t
        pad_frozen.add(name)
    named.update(recurrent.named("recurrent"))
    named.update(slattn.named("slattn"))
    for i, (w, b) in enumerate(mlp):
        named[f"mlp.{i}.weight"] = w
        named[f"mlp.{i}.bias"] = b

    return ModelParameters(schema=schema, config=config, tables=tables,
                           recurrent=recurrent, slattn=slattn, mlp=mlp,
                           named=named, pad_frozen=pad_frozen)


@dataclass
class ForwardResult:
    """Scores plus everything a caller may want to look at afterwards."""

    scores: Tensor                 # [slots, 1], padded slots included
    batch: PaddedBatch
    bundle: slattention.AffinityBundle
    n: int                         # real candidate count

    def score_vector(self) -> np.ndarray:
        return self.scores.data[:self.n, 0].copy()


def forward(params: ModelParameters, instance: RankingInstance | PaddedBatch,
            n_pad: int | None = None, m_pad: int | None = None) -> ForwardResult:
    """Full differentiable forward pass for one instance.

    In literal mode candidates are always padded to ``n_max`` because the
    attention projections have one column per slot; in equivariant mode
    the graph is built at the instance's own size unless a pad is forced.
    """
    config = params.config
    if isinstance(instance, PaddedBatch):
        batch = instance
    else:
        if instance.n > config.n_max:
            raise DataError(f"user {instance.user_id}: {instance.n} candidates exceed "
                            f"n_max={config.n_max}")
        if config.mode == "literal":
            n_to = config.n_max
        else:
            n_to = n_pad if n_pad is not None else instance.n
        m_to = m_pad if m_pad is not None else min(instance.m, config.m_max)
        batch = pad_instance(instance, n_to, m_to, params.schema)

    slots = batch.cand_cat.shape[0]
    hist_slots = batch.hist_cat.shape[0]
    n = batch.n
    m = batch.m
    cand_mask = None if n == slots else batch.cand_mask
    hist_mask = None if m == hist_slots else batch.hist_mask

    emb = embedding.embed_instance(batch, params.tables)

    if config.use_intra_set:
        attended = cross_item.intra_set_attention(emb.cand, cand_mask, config.heads)
    else:
        attended = emb.cand
    if m > 0 and config.use_intra_list:
        hist_real = emb.hist if m == hist_slots else ad.slice_rows(emb.hist, 0, m)
        states = cross_item.intra_list_encode(hist_real, params.recurrent)
        if m < hist_slots:
            states = ad.concat_rows([states, Tensor(np.zeros((hist_slots - m, 2 * config.d_h)))])
    else:
        states = Tensor(np.zeros((hist_slots, 2 * config.d_h)))

    set_repr, list_repr = slattention.build_representations(emb.cand, attended,
                                                            emb.hist, states)

    if hist_slots > 0 and config.use_item_affinity:
        item_aff = slattention.item_affinity(set_repr, list_repr, params.slattn.item_weight)
    else:
        item_aff = Tensor(np.zeros((slots, hist_slots)))
    if hist_slots > 0 and config.use_feature_affinity:
        feat_aff = slattention.feature_affinity(
            emb.cand_fields, emb.hist_fields, params.slattn.feature_weight,
            params.slattn.field_mix, slots, hist_slots, params.schema.k)
    else:
        feat_aff = Tensor(np.zeros((slots, hist_slots)))
    combined = slattention.combine_affinity(item_aff, feat_aff)

    theta_value = None
    if hist_slots > 0 and config.use_decay:
        theta, decay_full, decayed = slattention.interest_decay(
            emb.user, batch.intervals, combined, params.slattn.decay)
        theta_value = theta.item()
    else:
        decay_full = Tensor(np.ones((slots, hist_slots)))
        decayed = combined

    set_attn, list_attn, cand_summary, list_summary = slattention.attend(
        set_repr, list_repr, decayed if hist_slots > 0 else None,
        params.slattn, config.mode, cand_mask, hist_mask)

    user_rep = ad.matmul(Tensor(np.ones((slots, 1))), emb.user)
    z = ad.concat_cols([user_rep, emb.cand, cand_summary, list_summary])
    for w, b in params.mlp[:-1]:
        z = ad.leaky_relu(ad.add(ad.matmul(z, w), b))
    w_out, b_out = params.mlp[-1]
    logits = ad.add(ad.matmul(z, w_out), b_out)
    scores = ad.sigmoid(logits)

    bundle = slattention.AffinityBundle(
        item_affinity=item_aff, feature_affinity=feat_aff, combined_affinity=combined,
        decay_matrix=decay_full, decayed_affinity=decayed, set_attention=set_attn,
        list_attention=list_attn, decay_rate=theta_value)
    return ForwardResult(scores=scores, batch=batch, bundle=bundle, n=n)


def score(params: ModelParameters, instance: RankingInstance | PaddedBatch,
          n_pad: int | None = None, m_pad: int | None = None) -> np.ndarray:
    """Click scores for the real candidates, outside any tape."""
    return forward(params, instance, n_pad=n_pad, m_pad=m_pad).score_vector()


def bce_loss(scores: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Masked mean negative log-likelihood of binary click labels.

    ``scores`` must lie strictly inside (0, 1); values at the boundary are
    rejected rather than clamped, so saturation surfaces as an error
    instead of a silently flattened gradient.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != scores.shape[0] or scores.shape[1] != 1:
        raise ShapeError(f"bce_loss: scores {scores.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    m = (np.ones(y.shape) if mask is None
         else np.asarray(mask, dtype=np.float64).reshape(-1, 1))
    live = scores.data[m.reshape(-1) > 0]
    if np.any(live <= 0.0) or np.any(live >= 1.0):
        raise ValueError("bce_loss: scores must lie strictly in (0, 1)")
    count = m.sum()
    if count == 0:
        raise ValueError("bce_loss: no unmasked items")
    term = ad.add(ad.mul(Tensor(y), ad.log(scores)),
                  ad.mul(Tensor(1.0 - y), ad.log(ad.sub(Tensor(np.ones((1, 1))), scores))))
    return ad.scale(ad.sum_all(ad.mul(term, Tensor(m))), -1.0 / count)


def rerank(params: ModelParameters, instance: RankingInstance) -> np.ndarray:
    """Candidate indices in descending score order, ties by ascending item id.

    The tie-break uses item identity, never input position, so equal-score
    permutated inputs produce the same item sequence.
    """
    scores = score(params, instance)
    ids = np.array([c.item_id for c in instance.candidates])
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    return np.array(order, dtype=np.int64)


# ---------------------------------------------------------------------------
# Checkpoints: magic, config JSON block, then named float64 tensors.

def _named_payload(params: ModelParameters) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in params.named.items()}
    for name in params.named:
        out[f"opt.m.{name}"] = params.opt_m.get(name, np.zeros(params.named[name].shape))
        out[f"opt.v.{name}"] = params.opt_v.get(name, np.zeros(params.named[name].shape))
    if params.tables.dense_mean is not None:
        out["dense.mean"] = params.tables.dense_mean.reshape(1, -1)
        out["dense.std"] = params.tables.dense_std.reshape(1, -1)
    return out


def save_checkpoint(params: ModelParameters, path) -> None:
    header = {
        "format": FORMAT_VERSION,
        "config": params.config.to_json(),
        "schema": params.schema.to_json(),
        "opt_step": params.opt_step,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _named_payload(params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(payload)))
        for name, arr in payload.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> ModelParameters:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError("not a model checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, blob_len, "header"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt config block: {e}") from e
        if header.get("format") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format')}")
        config = ModelConfig.from_json(header["config"])
        schema = FeatureSchema.from_json(header["schema"])
        params = build_parameters(schema, config)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * size, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last tensor")

    for name, t in params.named.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                  f"expected {t.shape}")
        t.data = tensors[name]
        m = tensors.get(f"opt.m.{name}")
        v = tensors.get(f"opt.v.{name}")
        if m is None or v is None:
            raise CheckpointError(f"checkpoint is missing optimizer state for {name!r}")
        params.opt_m[name] = m
        params.opt_v[name] = v
    params.opt_step = int(header.get("opt_step", 0))
    if "dense.mean" in tensors:
        params.tables.dense_mean = tensors["dense.mean"].reshape(-1)
        params.tables.dense_std = tensors["dense.std"].reshape(-1)
    return params
