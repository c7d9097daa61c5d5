"""Independent scalar reference implementations used as test oracles.

Everything here is written with explicit Python loops and ``math``
functions, deliberately avoiding the package's numeric paths, so the two
routes only agree if both are right.  Matrices are lists of lists.
"""

import itertools
import math


def mat(rows, cols, fill=0.0):
    return [[fill] * cols for _ in range(rows)]


def ref_matmul(a, b):
    p, q, r = len(a), len(b), len(b[0]) if b else 0
    out = mat(p, r)
    for i in range(p):
        for j in range(r):
            s = 0.0
            for t in range(q):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def ref_transpose(a):
    return [[a[i][j] for i in range(len(a))] for j in range(len(a[0]))]


def ref_softmax_row(row, mask=None):
    if mask is None:
        mask = [True] * len(row)
    hi = max(v for v, m in zip(row, mask) if m)
    exps = [math.exp(v - hi) if m else 0.0 for v, m in zip(row, mask)]
    total = sum(exps)
    return [e / total for e in exps]


def ref_softmax_rows(a, mask=None):
    return [ref_softmax_row(row, None if mask is None else mask[i])
            for i, row in enumerate(a)]


def ref_tanh(a):
    return [[math.tanh(v) for v in row] for row in a]


def ref_sigmoid_scalar(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def ref_leaky(x, alpha=0.01):
    return x if x > 0 else alpha * x


def ref_softplus(x):
    # log(1 + e^x) without overflow
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def ref_intra_set(v, heads=1):
    """Per-entry scaled dot-product self-attention, one head slice at a time."""
    n = len(v)
    d = len(v[0])
    width = d // heads
    out = mat(n, d)
    for h in range(heads):
        lo = h * width
        block = [row[lo:lo + width] for row in v]
        logits = [[sum(block[i][t] * block[j][t] for t in range(width)) / math.sqrt(width)
                   for j in range(n)] for i in range(n)]
        weights = ref_softmax_rows(logits)
        for i in range(n):
            for t in range(width):
                out[i][lo + t] = sum(weights[i][j] * block[j][t] for j in range(n))
    return out


def ref_lstm_direction(x, w, u, b, d_h):
    """Step-by-step scalar LSTM; gate order input, forget, output, cell."""
    states = []
    h = [0.0] * d_h
    c = [0.0] * d_h
    for row in x:
        pre = [b[g][t] + sum(row[i] * w[g][i][t] for i in range(len(row)))
               + sum(h[i] * u[g][i][t] for i in range(d_h))
               for g in range(4) for t in range(d_h)]
        pre = [pre[g * d_h:(g + 1) * d_h] for g in range(4)]
        i_g = [ref_sigmoid_scalar(v) for v in pre[0]]
        f_g = [ref_sigmoid_scalar(v) for v in pre[1]]
        o_g = [ref_sigmoid_scalar(v) for v in pre[2]]
        g_g = [math.tanh(v) for v in pre[3]]
        c = [f_g[t] * c[t] + i_g[t] * g_g[t] for t in range(d_h)]
        h = [o_g[t] * math.tanh(c[t]) for t in range(d_h)]
        states.append(list(h))
    return states


def _direction_arrays(direction):
    """Pull one direction's gate tensors into nested lists."""
    w = [direction.w_input.data.tolist(), direction.w_forget.data.tolist(),
         direction.w_output.data.tolist(), direction.w_cell.data.tolist()]
    u = [direction.u_input.data.tolist(), direction.u_forget.data.tolist(),
         direction.u_output.data.tolist(), direction.u_cell.data.tolist()]
    b = [direction.b_input.data[0].tolist(), direction.b_forget.data[0].tolist(),
         direction.b_output.data[0].tolist(), direction.b_cell.data[0].tolist()]
    return w, u, b


def ref_bilstm(x, recurrent):
    d_h = recurrent.d_hidden
    wf, uf, bf = _direction_arrays(recurrent.fwd)
    wb, ub, bb = _direction_arrays(recurrent.bwd)
    fwd = ref_lstm_direction(x, wf, uf, bf, d_h)
    bwd = ref_lstm_direction(list(reversed(x)), wb, ub, bb, d_h)
    bwd = list(reversed(bwd))
    return [fwd[t] + bwd[t] for t in range(len(x))]


def ref_item_affinity(s, l, w):
    n, m = len(s), len(l)
    out = mat(n, m)
    for i in range(n):
        for j in range(m):
            total = 0.0
            for a in range(len(s[0])):
                for b in range(len(l[0])):
                    total += s[i][a] * w[a][b] * l[j][b]
            out[i][j] = math.tanh(total)
    return out


def ref_feature_affinity(e_s, e_l, w_fa, w_c):
    """e_s[i][f] and e_l[j][f] are per-field embedding vectors."""
    n, m, k = len(e_s), len(e_l), len(w_c)
    d_e = len(w_fa)
    out = mat(n, m)
    for i in range(n):
        for j in range(m):
            total = 0.0
            for s in range(k):
                for t in range(k):
                    inner = 0.0
                    for a in range(d_e):
                        for b in range(d_e):
                            inner += e_s[i][s][a] * w_fa[a][b] * e_l[j][t][b]
                    total += math.tanh(inner) * w_c[s][t]
            out[i][j] = total
    return out


def ref_decay_rate(user, decay):
    hidden_w = decay.hidden_w.data.tolist()
    hidden_b = decay.hidden_b.data[0].tolist()
    out_w = decay.out_w.data.tolist()
    out_b = decay.out_b.data[0][0]
    hidden = [ref_leaky(hidden_b[t] + sum(user[i] * hidden_w[i][t] for i in range(len(user))))
              for t in range(len(hidden_b))]
    raw = out_b + sum(hidden[t] * out_w[t][0] for t in range(len(hidden)))
    return ref_softplus(raw)


def ref_interest_decay(combined, intervals, theta):
    decay = [math.exp(-theta * t) for t in intervals]
    return [[combined[i][j] * (1.0 + decay[j]) for j in range(len(intervals))]
            for i in range(len(combined))]


def ref_attend_equivariant(s, l, c, w_a, w_b, w_l):
    n, m = len(s), len(l)
    queries = ref_matmul(s, w_a)
    keys = ref_matmul(s, w_b)
    pair = [[sum(queries[i][a] * keys[j][a] for a in range(len(keys[0])))
             for j in range(n)] for i in range(n)]
    if m:
        lw = ref_matmul(l, w_l)
        hist = [[sum(c[i][j] * lw[j][a] for j in range(m)) for a in range(len(w_l[0]))]
                for i in range(n)]
        cand_logits = [[math.tanh(sum((queries[i][a] + hist[i][a]) * keys[j][a]
                                      for a in range(len(keys[0]))))
                        for j in range(n)] for i in range(n)]
        list_logits = [[math.tanh(sum(pair[i][q] * c[q][j] for q in range(n)))
                        for j in range(m)] for i in range(n)]
    else:
        cand_logits = [[math.tanh(pair[i][j]) for j in range(n)] for i in range(n)]
        list_logits = None
    set_attn = ref_softmax_rows(cand_logits)
    cand_summary = ref_matmul(set_attn, s)
    if m:
        list_attn = ref_softmax_rows(list_logits)
        list_summary = ref_matmul(list_attn, l)
    else:
        list_attn = None
        list_summary = mat(n, len(l[0]) if l else 0)
    return set_attn, list_attn, cand_summary, list_summary


def ref_attend_literal(s, l, c, w_s, w_l, cand_mask=None):
    n, m = len(s), len(l)
    proj = ref_matmul(s, w_s)
    if m:
        lw = ref_matmul(l, w_l)
        mix = ref_matmul(c, lw)
        cand_logits = [[math.tanh(proj[i][j] + mix[i][j]) for j in range(len(proj[0]))]
                       for i in range(n)]
        list_logits = ref_tanh(ref_matmul(proj, c))
    else:
        cand_logits = ref_tanh(proj)
        list_logits = None
    mask_rows = None if cand_mask is None else [list(cand_mask)] * n
    set_attn = ref_softmax_rows(cand_logits, mask_rows)
    cand_summary = ref_matmul(set_attn, s)
    if m:
        list_attn = ref_softmax_rows(list_logits)
        list_summary = ref_matmul(list_attn, l)
    else:
        list_attn = None
        list_summary = mat(n, len(l[0]) if l else 0)
    return set_attn, list_attn, cand_summary, list_summary


def ref_score(inst, params):
    """Straight-line scalar re-implementation of the whole scoring pipeline."""
    schema = params.schema
    config = params.config
    k, d_e = schema.k, schema.d_embed
    tables = [t.data.tolist() for t in params.tables.item_tables]
    user_tables = [t.data.tolist() for t in params.tables.user_tables]

    def embed(item):
        row = []
        for f, idx in enumerate(item.cat_feats):
            row.extend(tables[f][idx])
        row.extend(item.dense_feats)
        return row

    def fields(item):
        return [tables[f][idx] for f, idx in enumerate(item.cat_feats)]

    n = inst.n
    hist = inst.history[-config.m_max:]
    m = len(hist)
    x = [embed(c) for c in inst.candidates]
    h = [embed(it) for it in hist]
    user = []
    for g, idx in enumerate(inst.profile):
        user.extend(user_tables[g][idx])

    attended = ref_intra_set(x, config.heads) if config.use_intra_set else [list(r) for r in x]
    if m and config.use_intra_list:
        states = ref_bilstm(h, params.recurrent)
    else:
        states = [[0.0] * (2 * config.d_h) for _ in range(m)]
    s = [x[i] + attended[i] for i in range(n)]
    l = [h[j] + states[j] for j in range(m)]

    if m and config.use_item_affinity:
        c_item = ref_item_affinity(s, l, params.slattn.item_weight.data.tolist())
    else:
        c_item = mat(n, m)
    if m and config.use_feature_affinity:
        c_feat = ref_feature_affinity([fields(c) for c in inst.candidates],
                                      [fields(it) for it in hist],
                                      params.slattn.feature_weight.data.tolist(),
                                      params.slattn.field_mix.data.tolist())
    else:
        c_feat = mat(n, m)
    combined = [[c_item[i][j] + c_feat[i][j] for j in range(m)] for i in range(n)]
    if m and config.use_decay:
        theta = ref_decay_rate(user, params.slattn.decay)
        c = ref_interest_decay(combined, [it.time_interval for it in hist], theta)
    else:
        c = combined

    if config.mode == "equivariant":
        _, _, cand_summary, list_summary = ref_attend_equivariant(
            s, l, c, params.slattn.query_proj.data.tolist(),
            params.slattn.key_proj.data.tolist(),
            params.slattn.hist_proj.data.tolist())
    else:
        slots = params.slattn.cand_proj.data.shape[1]
        width = len(s[0])
        s_pad = s + [[0.0] * width for _ in range(slots - n)]
        c_pad = c + [[0.0] * m for _ in range(slots - n)]
        mask = [True] * n + [False] * (slots - n)
        _, _, cand_summary, list_summary = ref_attend_literal(
            s_pad, l, c_pad, params.slattn.cand_proj.data.tolist(),
            params.slattn.hist_proj_literal.data.tolist(), mask)
        cand_summary = cand_summary[:n]
        list_summary = list_summary[:n]
    if not m:
        list_width = len(x[0]) + 2 * config.d_h
        list_summary = mat(n, list_width)

    scores = []
    for i in range(n):
        z = user + x[i] + cand_summary[i] + list_summary[i]
        for layer, (w, b) in enumerate(params.mlp):
            wl = w.data.tolist()
            bl = b.data[0].tolist()
            nxt = [bl[t] + sum(z[a] * wl[a][t] for a in range(len(z)))
                   for t in range(len(bl))]
            if layer < len(params.mlp) - 1:
                nxt = [ref_leaky(v) for v in nxt]
            z = nxt
        scores.append(ref_sigmoid_scalar(z[0]))
    return scores


def ref_bce(scores, labels):
    total = 0.0
    for p, y in zip(scores, labels):
        total += y * math.log(p) + (1 - y) * math.log(1 - p)
    return -total / len(scores)


# ---------------------------------------------------------------------------
# Metric oracles, straight from the definitions.

def ref_precision_at(ranked_labels, r):
    return sum(ranked_labels[:r]) / r


def ref_ap_at_k(ranked_labels, k):
    total = sum(ranked_labels)
    if total == 0:
        return None
    depth = min(k, len(ranked_labels))
    acc = sum(ref_precision_at(ranked_labels, r) for r in range(1, depth + 1)
              if ranked_labels[r - 1])
    return acc / min(total, k)


def ref_dcg(gains, k):
    return sum(g / math.log2(r + 2) for r, g in enumerate(gains[:k]))


def ref_ndcg_at_k(ranked_labels, k):
    """Ideal computed by brute force over all orderings."""
    if sum(ranked_labels) == 0:
        return None
    best = max(ref_dcg(list(p), k) for p in itertools.permutations(ranked_labels))
    return ref_dcg(ranked_labels, k) / best


def ref_dendcg_at_k(ranked_gains, k):
    """IPS-weighted NDCG; ideal by brute force over all orderings."""
    if all(g == 0 for g in ranked_gains):
        return None
    best = max(ref_dcg(list(p), k) for p in itertools.permutations(ranked_gains))
    return ref_dcg(ranked_gains, k) / best
