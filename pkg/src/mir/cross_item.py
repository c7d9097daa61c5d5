"""Low-level interactions: self-attention over the candidate set and a
bidirectional LSTM over the history list.

The candidate encoder is order-free by construction (row-equivariant
scaled dot-product attention without learned projections); the history
encoder is order-sensitive on purpose.  The recurrence runs as one fused
tape node with a hand-written backward-through-time pass, which keeps the
per-instance graph small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, _stable_sigmoid

GATES = ("input", "forget", "output", "cell")


def intra_set_attention(items: Tensor, mask: np.ndarray | None = None,
                        heads: int = 1) -> Tensor:
    """Scaled dot-product self-attention over candidate rows.

    With one head this is softmax(V V^T / sqrt(d)) V; with several heads
    each column block of width d/heads is attended independently and the
    results concatenated.  ``mask`` flags real rows; masked rows get zero
    attention weight (and their own output rows are zeroed).
    """
    n, d = items.shape
    if n < 1:
        raise ShapeError("intra_set_attention needs at least one row")
    if heads < 1 or d % heads != 0:
        raise ShapeError(f"head count {heads} does not divide width {d}")
    width = d // heads
    col_mask = None
    if mask is not None:
        col_mask = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(1, n), (n, n))

    outputs = []
    for h in range(heads):
        block = ad.slice_cols(items, h * width, (h + 1) * width) if heads > 1 else items
        logits = ad.scale(ad.matmul(block, ad.transpose(block)), 1.0 / math.sqrt(width))
        weights = ad.softmax_rows(logits, col_mask)
        outputs.append(ad.matmul(weights, block))
    attended = outputs[0] if heads == 1 else ad.concat_cols(outputs)
    if mask is not None:
        # Padded rows attend to real rows; zero them so nothing downstream
        # can pick up their mixture values.
        attended = ad.mul(attended, Tensor(np.asarray(mask, float).reshape(n, 1)))
    return attended


@dataclass
class DirectionParameters:
    """Gate weights for one recurrence direction."""

    w_input: Tensor
    w_forget: Tensor
    w_output: Tensor
    w_cell: Tensor
    u_input: Tensor
    u_forget: Tensor
    u_output: Tensor
    u_cell: Tensor
    b_input: Tensor
    b_forget: Tensor
    b_output: Tensor
    b_cell: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f"{kind}_{gate}") for kind in ("w", "u", "b") for gate in GATES]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{kind}_{gate}": getattr(self, f"{kind}_{gate}")
                for kind in ("w", "u", "b") for gate in GATES}


@dataclass
class RecurrentParameters:
    """Both directions of the history encoder."""

    fwd: DirectionParameters
    bwd: DirectionParameters
    d_in: int
    d_hidden: int

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.named(f"{prefix}.fwd")
        out.update(self.bwd.named(f"{prefix}.bwd"))
        return out


def init_recurrent(d_in: int, d_hidden: int, rng: np.random.Generator) -> RecurrentParameters:
    """Uniform(-1/sqrt(d_h), +1/sqrt(d_h)) weights; forget bias starts at 1."""
    bound = 1.0 / math.sqrt(d_hidden)

    def direction() -> DirectionParameters:
        kw = {}
        for gate in GATES:
            kw[f"w_{gate}"] = Tensor(rng.uniform(-bound, bound, (d_in, d_hidden)), True)
            kw[f"u_{gate}"] = Tensor(rng.uniform(-bound, bound, (d_hidden, d_hidden)), True)
            bias = np.full((1, d_hidden), 1.0) if gate == "forget" else np.zeros((1, d_hidden))
            kw[f"b_{gate}"] = Tensor(bias, True)
        return DirectionParameters(**kw)

    return RecurrentParameters(fwd=direction(), bwd=direction(), d_in=d_in, d_hidden=d_hidden)


def _cell_forward(x: np.ndarray, w4: np.ndarray, u4: np.ndarray, b4: np.ndarray,
                  d_h: int) -> dict:
    """Run one direction over x [T, d_in]; cache everything backward needs."""
    steps = x.shape[0]
    pre_x = x @ w4 + b4
    i_all = np.empty((steps, d_h)); f_all = np.empty((steps, d_h))
    o_all = np.empty((steps, d_h)); g_all = np.empty((steps, d_h))
    tc_all = np.empty((steps, d_h))
    h_prev_all = np.empty((steps, d_h)); c_prev_all = np.empty((steps, d_h))
    states = np.empty((steps, d_h))
    h = np.zeros(d_h)
    c = np.zeros(d_h)
    for t in range(steps):
        h_prev_all[t] = h
        c_prev_all[t] = c
        pre = pre_x[t] + h @ u4
        gi = _stable_sigmoid(pre[:3 * d_h])
        i_g, f_g, o_g = gi[:d_h], gi[d_h:2 * d_h], gi[2 * d_h:]
        g_g = np.tanh(pre[3 * d_h:])
        c = f_g * c + i_g * g_g
        tc = np.tanh(c)
        h = o_g * tc
        i_all[t], f_all[t], o_all[t], g_all[t] = i_g, f_g, o_g, g_g
        tc_all[t] = tc
        states[t] = h
    return {"states": states, "i": i_all, "f": f_all, "o": o_all, "g": g_all,
            "tc": tc_all, "h_prev": h_prev_all, "c_prev": c_prev_all, "x": x}


def _cell_backward(cache: dict, d_states: np.ndarray, w4: np.ndarray,
                   u4: np.ndarray, d_h: int):
    """Backward-through-time for one direction; returns (dx, dw4, du4, db4)."""
    x = cache["x"]
    steps = x.shape[0]
    dw4 = np.zeros_like(w4)
    du4 = np.zeros_like(u4)
    db4 = np.zeros((1, 4 * d_h))
    dx = np.zeros_like(x)
    dh_next = np.zeros(d_h)
    dc_next = np.zeros(d_h)
    dpre = np.empty(4 * d_h)
    for t in range(steps - 1, -1, -1):
        i_g, f_g = cache["i"][t], cache["f"][t]
        o_g, g_g, tc = cache["o"][t], cache["g"][t], cache["tc"][t]
        dh = d_states[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o_g * (1.0 - tc * tc)
        dpre[:d_h] = dc * g_g * i_g * (1.0 - i_g)
        dpre[d_h:2 * d_h] = dc * cache["c_prev"][t] * f_g * (1.0 - f_g)
        dpre[2 * d_h:3 * d_h] = do * o_g * (1.0 - o_g)
        dpre[3 * d_h:] = dc * i_g * (1.0 - g_g * g_g)
        db4 += dpre
        dw4 += np.outer(x[t], dpre)
        du4 += np.outer(cache["h_prev"][t], dpre)
        dx[t] = w4 @ dpre
        dh_next = u4 @ dpre
        dc_next = dc * f_g
    return dx, dw4, du4, db4


def _pack(direction: DirectionParameters):
    w4 = np.concatenate([direction.w_input.data, direction.w_forget.data,
                         direction.w_output.data, direction.w_cell.data], axis=1)
    u4 = np.concatenate([direction.u_input.data, direction.u_forget.data,
                         direction.u_output.data, direction.u_cell.data], axis=1)
    b4 = np.concatenate([direction.b_input.data, direction.b_forget.data,
                         direction.b_output.data, direction.b_cell.data], axis=1)
    return w4, u4, b4


def _scatter_gate_grads(direction: DirectionParameters, dw4, du4, db4, d_h: int) -> None:
    for g, gate in enumerate(GATES):
        lo, hi = g * d_h, (g + 1) * d_h
        for kind, grad in (("w", dw4), ("u", du4), ("b", db4)):
            t = getattr(direction, f"{kind}_{gate}")
            if t.requires_grad:
                t.accumulate_grad(grad[:, lo:hi])


def intra_list_encode(history: Tensor, params: RecurrentParameters) -> Tensor:
    """Encode the chronological history as forward+backward LSTM states.

    Output row i concatenates the forward state after consuming items
    0..i and the backward state after consuming items T-1..i.  An empty
    history yields an empty (0, 2*d_hidden) encoding.
    """
    steps, d_in = history.shape
    if d_in != params.d_in:
        raise ShapeError(f"history width {d_in} does not match recurrence input {params.d_in}")
    d_h = params.d_hidden
    if steps == 0:
        return Tensor(np.zeros((0, 2 * d_h)))

    w4f, u4f, b4f = _pack(params.fwd)
    w4b, u4b, b4b = _pack(params.bwd)
    x = history.data
    cache_f = _cell_forward(x, w4f, u4f, b4f, d_h)
    cache_b = _cell_forward(x[::-1], w4b, u4b, b4b, d_h)
    out_data = np.concatenate([cache_f["states"], cache_b["states"][::-1]], axis=1)

    inputs = [history] + params.fwd.tensors() + params.bwd.tensors()

    def backward(grad: np.ndarray) -> None:
        dxf, dw4f, du4f, db4f = _cell_backward(cache_f, grad[:, :d_h], w4f, u4f, d_h)
        dxb, dw4b, du4b, db4b = _cell_backward(cache_b, grad[:, d_h:][::-1], w4b, u4b, d_h)
        if history.requires_grad:
            history.accumulate_grad(dxf + dxb[::-1])
        _scatter_gate_grads(params.fwd, dw4f, du4f, db4f, d_h)
        _scatter_gate_grads(params.bwd, dw4b, du4b, db4b, d_h)

    return ad.lift(out_data, inputs, backward)
