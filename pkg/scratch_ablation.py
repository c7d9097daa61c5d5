"""Scratch calibration for the learning-signal acceptance criterion.

Usage: python3 scratch_ablation.py key=value ...
Keys: epochs, seeds, users, d_h, d_a, mlp, l2, lr, and any SynthConfig field.
"""
import sys
import time

import numpy as np

from mir.data import SynthConfig, synth_generate, train_test_split
from mir.metrics import PropensityTable, evaluate_model
from mir.model import ModelConfig, build_parameters
from mir.training import train

kw = dict(arg.split("=", 1) for arg in sys.argv[1:])
epochs = int(kw.pop("epochs", 6))
n_seeds = int(kw.pop("seeds", 1))
users = int(kw.pop("users", 2500))
d_h = int(kw.pop("d_h", 16))
d_a = int(kw.pop("d_a", 16))
mlp = tuple(int(x) for x in kw.pop("mlp", "64,32").split(","))
l2 = float(kw.pop("l2", 1e-3))
lr = float(kw.pop("lr", 5e-3))

synth_kw = dict(num_users=users, n=10, m=15, vocab_sizes=(9,),
                user_vocab_sizes=(4,), d_dense=2, seed=202)
for key, val in kw.items():
    synth_kw[key] = type(getattr(SynthConfig(), key))(val) if not isinstance(
        getattr(SynthConfig(), key), tuple) else tuple(map(int, val.split(",")))
synth = SynthConfig(**synth_kw)
insts, truth = synth_generate(synth)
schema = synth.schema()
train_set, test_set = train_test_split(insts, ratio=2000 / users, seed=55)
labels = [c.label for i in insts for c in i.candidates]
print(f"train {len(train_set)} test {len(test_set)} epochs {epochs} "
      f"click_rate {np.mean(labels):.3f} model d_h={d_h} d_a={d_a} mlp={mlp} l2={l2}")
prop = PropensityTable.from_position_bias(truth.position_bias, p_min=0.05)

ABLATIONS = ["fi", "ii", "dcy", "set", "lst"]
results = {}
t_start = time.time()
for seed in range(n_seeds):
    base = ModelConfig(n_max=10, m_max=15, epochs=epochs, seed=seed,
                       learning_rate=lr, l2=l2, d_h=d_h, d_a=d_a, mlp_layers=mlp)
    untrained = build_parameters(schema, base)
    results.setdefault("untrained", []).append(
        evaluate_model(untrained, test_set, [5], prop).ndcg[5])
    params, trace = train(train_set, base, schema)
    r = evaluate_model(params, test_set, [5], prop)
    results.setdefault("full", []).append(r.ndcg[5])
    print(f"seed {seed} full: ndcg5={r.ndcg[5]:.4f} ({time.time()-t_start:.0f}s)")
    for ab in ABLATIONS:
        config = base.with_ablations([ab])
        params, _ = train(train_set, config, schema)
        r = evaluate_model(params, test_set, [5], prop)
        results.setdefault(ab, []).append(r.ndcg[5])

print(f"total {time.time()-t_start:.0f}s; mean over {n_seeds} seeds:")
full_mean = np.mean(results["full"])
for name, vals in results.items():
    margin = "" if name in ("untrained", "full") else f"  margin {full_mean - np.mean(vals):+.4f}"
    print(f"  {name:10s} {np.mean(vals):.4f}{margin}")
wins = sum(full_mean >= np.mean(results[ab]) for ab in ABLATIONS)
print(f"full >= ablation: {wins}/5 ; full > untrained: "
      f"{full_mean > np.mean(results['untrained'])}")
