import json
import math

import numpy as np
import pytest

from mir.data import (DataError, FeatureSchema, ItemRecord, RankingInstance,
                      SynthConfig, load_jsonl, pad_and_batch, pad_instance,
                      position_bias, save_jsonl, synth_generate, train_test_split)

SCHEMA = FeatureSchema(vocab_sizes=(8, 5), d_dense=2, d_embed=4, user_vocab_sizes=(6,))


def make_line(cat0=1, label=0, pos=1, hist_t=(2.0, 1.0)):
    return {
        "user_id": 1,
        "profile": [2],
        "candidates": [{"item_id": 10, "cat": [cat0, 3], "dense": [0.5, -1.0],
                        "label": label, "pos": pos}],
        "history": [{"item_id": 20 + j, "cat": [2, 1], "dense": [0.0, 0.0], "t": t}
                    for j, t in enumerate(hist_t)],
    }


def write_jsonl(path, lines):
    with open(path, "w") as fh:
        for obj in lines:
            fh.write(json.dumps(obj) + "\n")


class TestLoadJsonl:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_jsonl(path, SCHEMA) == []

    def test_single_valid_line(self, tmp_path):
        path = tmp_path / "one.jsonl"
        write_jsonl(path, [make_line()])
        insts = load_jsonl(path, SCHEMA)
        assert len(insts) == 1
        assert insts[0].n == 1
        assert insts[0].m == 2
        assert insts[0].candidates[0].logged_position == 1

    def test_out_of_vocab_index_names_field_and_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        write_jsonl(path, [make_line(), make_line(cat0=8)])
        with pytest.raises(DataError, match="line 2") as exc:
            load_jsonl(path, SCHEMA)
        assert "field 0" in str(exc.value)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text(json.dumps(make_line()) + "\n{not json\n")
        with pytest.raises(DataError, match="line 2"):
            load_jsonl(path, SCHEMA)

    def test_missing_field_rejected(self, tmp_path):
        obj = make_line()
        del obj["candidates"][0]["label"]
        path = tmp_path / "missing.jsonl"
        write_jsonl(path, [obj])
        with pytest.raises(DataError, match="label"):
            load_jsonl(path, SCHEMA)

    def test_unknown_fields_flag_controlled(self, tmp_path):
        obj = make_line()
        obj["candidates"][0]["mystery"] = 1
        path = tmp_path / "extra.jsonl"
        write_jsonl(path, [obj])
        assert len(load_jsonl(path, SCHEMA)) == 1
        with pytest.raises(DataError, match="mystery"):
            load_jsonl(path, SCHEMA, strict=True)

    def test_chronological_flag_rejects_increasing_intervals(self, tmp_path):
        path = tmp_path / "chrono.jsonl"
        write_jsonl(path, [make_line(hist_t=(1.0, 2.0))])
        assert len(load_jsonl(path, SCHEMA)) == 1
        with pytest.raises(DataError, match="increases"):
            load_jsonl(path, SCHEMA, chronological=True)

    def test_negative_interval_rejected(self, tmp_path):
        path = tmp_path / "neg.jsonl"
        write_jsonl(path, [make_line(hist_t=(-1.0,))])
        with pytest.raises(DataError, match="nonnegative"):
            load_jsonl(path, SCHEMA)

    def test_roundtrip_is_identity(self, tmp_path):
        config = SynthConfig(num_users=12, n=5, m=4, vocab_sizes=(8, 5),
                             user_vocab_sizes=(6,), d_dense=2, seed=9)
        insts, _ = synth_generate(config)
        path = tmp_path / "roundtrip.jsonl"
        save_jsonl(insts, path)
        loaded = load_jsonl(path, config.schema())
        assert loaded == insts


class TestPadding:
    def instance(self, n=3, m=2):
        cands = [ItemRecord(item_id=i, cat_feats=(1 + i % 7, 1), dense_feats=(0.1, 0.2),
                            label=i % 2, logged_position=i + 1) for i in range(n)]
        hist = [ItemRecord(item_id=100 + j, cat_feats=(2, 1), dense_feats=(0.0, 0.0),
                           time_interval=float(m - 1 - j)) for j in range(m)]
        return RankingInstance(user_id=1, profile=(2,), candidates=cands, history=hist)

    def test_exact_fit_all_true_masks(self):
        batch = pad_instance(self.instance(3, 2), 3, 2, SCHEMA)
        assert batch.cand_mask.all() and batch.hist_mask.all()

    def test_empty_history_batchable(self):
        batch = pad_instance(self.instance(3, 0), 3, 4, SCHEMA)
        assert not batch.hist_mask.any()
        assert batch.hist_cat.shape == (4, 2)

    def test_truncation_keeps_most_recent(self):
        inst = self.instance(2, 9)
        batch = pad_instance(inst, 2, 4, SCHEMA)
        assert batch.m == 4
        # most recent = tail of the chronological list = smallest intervals
        np.testing.assert_array_equal(batch.intervals, [3.0, 2.0, 1.0, 0.0])

    def test_too_many_candidates_rejected(self):
        with pytest.raises(DataError, match="n_max"):
            pad_instance(self.instance(5, 0), 4, 0, SCHEMA)

    def test_padded_slots_use_reserved_index(self):
        batch = pad_instance(self.instance(2, 1), 5, 3, SCHEMA)
        assert (batch.cand_cat[2:] == 0).all()
        assert (batch.hist_cat[1:] == 0).all()
        assert (batch.item_ids[2:] == -1).all()

    def test_pad_and_batch_is_per_instance(self):
        batches = pad_and_batch([self.instance(2, 1), self.instance(3, 2)], 4, 4, SCHEMA)
        assert [b.n for b in batches] == [2, 3]


class TestSynthGenerator:
    def test_same_seed_identical(self, tmp_path):
        config = SynthConfig(num_users=20, seed=123)
        a, truth_a = synth_generate(config)
        b, truth_b = synth_generate(config)
        assert a == b
        assert truth_a.to_json() == truth_b.to_json()
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_jsonl(a, pa)
        save_jsonl(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_position_bias_at_one(self):
        assert position_bias(1) == 1.0

    def test_position_bias_is_planted(self):
        _, truth = synth_generate(SynthConfig(num_users=1, n=4))
        assert truth.position_bias == [position_bias(p) for p in (1, 2, 3, 4)]

    def test_click_rate_ratio_matches_position_bias(self):
        # Positions are assigned independently of affinity, so the marginal
        # click-rate ratio between positions equals the bias ratio.
        config = SynthConfig(num_users=20000, n=4, m=0, vocab_sizes=(15,),
                             user_vocab_sizes=(9,), d_dense=0, seed=42)
        insts, _ = synth_generate(config)
        clicks = np.zeros(4)
        for inst in insts:
            for cand in inst.candidates:
                clicks[cand.logged_position - 1] += cand.label
        ratio = clicks[2] / clicks[0]
        assert ratio == pytest.approx(position_bias(3), abs=0.06)

    def test_doubling_affinity_weight_increases_click_rate(self):
        base = SynthConfig(num_users=800, seed=5)
        doubled = SynthConfig(num_users=800, seed=5, affinity_weight=base.affinity_weight * 2)

        def rate(config):
            insts, _ = synth_generate(config)
            labels = [c.label for inst in insts for c in inst.candidates]
            return float(np.mean(labels))

        assert rate(doubled) > rate(base)

    def test_degenerate_config_rejected(self):
        with pytest.raises(DataError):
            synth_generate(SynthConfig(num_users=0))
        with pytest.raises(DataError):
            synth_generate(SynthConfig(n=0))

    def test_history_is_chronological(self):
        insts, _ = synth_generate(SynthConfig(num_users=3, m=6, seed=2))
        for inst in insts:
            ts = [h.time_interval for h in inst.history]
            assert ts == sorted(ts, reverse=True)
            assert ts[-1] > 0.0  # age of the newest click is a random gap


class TestSplit:
    def dataset(self, count=10):
        insts, _ = synth_generate(SynthConfig(num_users=count, n=3, m=2, seed=0))
        return insts

    def test_even_split(self):
        train, test = train_test_split(self.dataset(10), 0.5, seed=1)
        assert len(train) == 5 and len(test) == 5

    def test_same_seed_same_split(self):
        data = self.dataset(10)
        a = train_test_split(data, 0.3, seed=9)
        b = train_test_split(data, 0.3, seed=9)
        assert a == b

    def test_union_is_original(self):
        data = self.dataset(11)
        train, test = train_test_split(data, 0.6, seed=3)
        ids = sorted(i.user_id for i in train) + sorted(i.user_id for i in test)
        assert sorted(ids) == sorted(i.user_id for i in data)
        assert not (set(i.user_id for i in train) & set(i.user_id for i in test))

    def test_bad_inputs(self):
        with pytest.raises(DataError):
            train_test_split([], 0.5, seed=0)
        with pytest.raises(DataError):
            train_test_split(self.dataset(4), 1.0, seed=0)


class TestSchema:
    def test_roundtrip(self):
        assert FeatureSchema.from_json(SCHEMA.to_json()) == SCHEMA

    def test_widths(self):
        assert SCHEMA.k == 2
        assert SCHEMA.d_item == 2 * 4 + 2
        assert SCHEMA.d_user == 4

    def test_invalid(self):
        with pytest.raises(DataError):
            FeatureSchema(vocab_sizes=(), d_dense=0, d_embed=4, user_vocab_sizes=(3,))
        with pytest.raises(DataError):
            FeatureSchema(vocab_sizes=(0,), d_dense=0, d_embed=4, user_vocab_sizes=(3,))
