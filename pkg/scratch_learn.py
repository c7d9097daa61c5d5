"""Diagnostic: does the interaction signal get learned over epochs?"""
import sys
import time

import numpy as np

from mir.data import SynthConfig, synth_generate, train_test_split
from mir.metrics import PropensityTable, evaluate_model
from mir.model import ModelConfig, build_parameters
from mir.training import train

kw = dict(arg.split("=") for arg in sys.argv[1:])
epochs = int(kw.get("epochs", 12))
lr = float(kw.get("lr", 3e-3))
cats = int(kw.get("cats", 9))
users = int(kw.get("users", 1200))
aw = float(kw.get("aw", 4.0))
off = float(kw.get("off", 2.2))
qw = float(kw.get("qw", 0.2))
cw = float(kw.get("cw", 0.4))
stw = float(kw.get("stw", 1.5))

synth = SynthConfig(num_users=users, n=10, m=15, vocab_sizes=(cats + 1, 13, 13),
                    seed=202, affinity_weight=aw, affinity_offset=off,
                    quality_weight=qw, contrast_weight=cw, short_term_weight=stw)
insts, truth = synth_generate(synth)
labels = [c.label for i in insts for c in i.candidates]
print(f"click rate {np.mean(labels):.3f}")
schema = synth.schema()
train_set, test_set = train_test_split(insts, ratio=0.8, seed=55)
prop = PropensityTable.from_position_bias(truth.position_bias, p_min=0.05)

config = ModelConfig(n_max=10, m_max=15, epochs=1, seed=0, learning_rate=lr)
params = build_parameters(schema, config)
r = evaluate_model(params, test_set, [5], prop)
print(f"epoch -1 (untrained): ndcg5={r.ndcg[5]:.4f}")

# oracle-ish baseline: rank by history-estimated category preference
def history_rank(inst):
    from collections import Counter
    boost = Counter()
    for h in inst.history:
        boost[h.category] += 1.0 + stw * np.exp(-h.time_interval / synth.short_term_tau)
    s = np.array([boost.get(c.category, 0.0) for c in inst.candidates])
    ids = np.array([c.item_id for c in inst.candidates])
    return sorted(range(len(s)), key=lambda i: (-s[i], ids[i]))

from mir.metrics import evaluate_ranking_fn
r = evaluate_ranking_fn(history_rank, test_set, [5], prop)
print(f"history-count heuristic: ndcg5={r.ndcg[5]:.4f}")

t0 = time.time()
for epoch in range(epochs):
    params, trace = train(train_set, config, schema, params)
    r = evaluate_model(params, test_set, [5], prop)
    print(f"epoch {epoch}: loss={trace[-1]['loss']:.4f} ndcg5={r.ndcg[5]:.4f} "
          f"({time.time()-t0:.0f}s)")
