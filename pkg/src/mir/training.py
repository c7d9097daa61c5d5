"""Training loop: adaptive-moment optimizer with decoupled L2, fixed
shuffle order, and gradient accumulation over per-instance graphs.

Everything is deterministic in the config seed: parameter init, the
per-epoch shuffle, and the order gradients are accumulated in.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .data import RankingInstance
from .embedding import set_dense_standardization
from .model import ModelConfig, ModelParameters, bce_loss, build_parameters, forward

log = logging.getLogger("mir.training")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training aborted; carries the offending epoch/batch."""


def adam_step(params: ModelParameters, grad_scale: float = 1.0) -> None:
    """Apply one optimizer step from the accumulated gradients.

    ``grad_scale`` divides the accumulated sums (1/batch size for a mean).
    Row 0 of embedding tables never moves: its gradient is zeroed before
    the moment update, and its value is zero so weight decay is inert.
    """
    config = params.config
    params.opt_step += 1
    t = params.opt_step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.named.items():
        g = np.zeros(p.shape) if p.grad is None else p.grad * grad_scale
        if name in params.pad_frozen:
            g = g.copy() if p.grad is not None else g
            g[0, :] = 0.0
        m = params.opt_m.get(name)
        v = params.opt_v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        params.opt_m[name] = m
        params.opt_v[name] = v
        update = config.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        if config.l2:
            update = update + config.learning_rate * config.l2 * p.data
        p.data = p.data - update


def train(dataset: Sequence[RankingInstance], config: ModelConfig, schema,
          params: ModelParameters | None = None) -> tuple[ModelParameters, list[dict]]:
    """Fit the model; returns the parameters and a per-epoch loss trace."""
    if not dataset:
        raise TrainingError("training set is empty")
    if params is None:
        params = build_parameters(schema, config)
    if config.standardize_dense and params.tables.dense_mean is None:
        set_dense_standardization(params.tables, dataset)

    shuffle_rng = np.random.default_rng([config.seed, 7919])
    trace: list[dict] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(dataset))
        epoch_losses = []
        for batch_id, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = order[start:start + config.batch_size]
            params.zero_grads()
            for idx in chunk:
                inst = dataset[int(idx)]
                with Tape() as tape:
                    result = forward(params, inst)
                    loss = bce_loss(result.scores, result.batch.labels,
                                    result.batch.cand_mask)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss ({value}) in epoch {epoch}, batch {batch_id}, "
                        f"user {inst.user_id}")
                tape.backward(loss)
                epoch_losses.append(value)
            adam_step(params, grad_scale=1.0 / len(chunk))
        mean_loss = float(np.mean(epoch_losses))
        trace.append({"epoch": epoch, "loss": mean_loss})
        log.info("epoch %d: loss %.6f", epoch, mean_loss)
    return params, trace
