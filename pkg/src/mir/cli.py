"""Batch command-line surface.

Subcommands: generate, train, evaluate, rerank, gradcheck, permtest,
inspect.  All reports are JSON on stdout or written to ``--out`` files;
logging goes to stderr at the level named by the MIR_LOG environment
variable (error, info, debug).

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 check
failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics, properties
from .data import (DataError, FeatureSchema, SynthConfig, load_jsonl, save_jsonl,
                   synth_generate)
from .model import (CheckpointError, ModelConfig, bce_loss, build_parameters, forward,
                    load_checkpoint, rerank, save_checkpoint, score)
from .training import TrainingError, train

log = logging.getLogger("mir.cli")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3

# Small-but-complete shape used by default when gradcheck gets no config.
GRADCHECK_INSTANCE = dict(n=6, m=8, vocab_sizes=(9, 7, 8), user_vocab_sizes=(5,), d_dense=3)
GRADCHECK_MODEL = dict(d_e=8, d_h=8, d_a=8, mlp_layers=(16, 8), decay_hidden=4,
                       n_max=6, m_max=8)


class CheckFailed(Exception):
    """A verification subcommand found violations."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for runtime
    # failures, so remap argument problems to the validation code.
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def _setup_logging() -> None:
    level_name = os.environ.get("MIR_LOG", "error").lower()
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(level_name, logging.ERROR)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _schema_path(data_path: str) -> Path:
    return Path(data_path).with_suffix(".schema.json")


def _truth_path(data_path: str) -> Path:
    return Path(data_path).with_suffix(".truth.json")


def _read_schema(args) -> FeatureSchema:
    path = getattr(args, "schema", None) or _schema_path(args.data)
    if not Path(path).exists():
        raise DataError(f"schema file {path} not found (generate one or pass --schema)")
    return FeatureSchema.from_json(_load_json(path))


def _model_config(args, schema: FeatureSchema | None = None) -> ModelConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(_load_json(args.config))
    if schema is not None and "d_e" not in values:
        values["d_e"] = schema.d_embed
    config = ModelConfig.from_json(values)
    overrides = {}
    for flag in ("seed", "epochs", "mode", "n_max", "m_max"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[flag] = v
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)
    if getattr(args, "ablate", None):
        config = config.with_ablations(args.ablate)
    return config


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_generate(args) -> int:
    values = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    synth = SynthConfig.from_json(values)
    instances, truth = synth_generate(synth)
    save_jsonl(instances, args.out)
    schema = synth.schema()
    _schema_path(args.out).write_text(json.dumps(schema.to_json(), indent=2) + "\n",
                                      encoding="utf-8")
    _truth_path(args.out).write_text(json.dumps(truth.to_json(), sort_keys=True) + "\n",
                                     encoding="utf-8")
    log.info("wrote %d instances to %s", len(instances), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    schema = _read_schema(args)
    config = _model_config(args, schema)
    instances = load_jsonl(args.data, schema, strict=args.strict)
    for inst in instances:
        if inst.n > config.n_max:
            raise DataError(f"user {inst.user_id} has {inst.n} candidates but "
                            f"n_max={config.n_max}")
    params, trace = train(instances, config, schema)
    save_checkpoint(params, args.out)
    trace_obj = {"config": params.config.to_json(), "epochs": trace}
    _emit(trace_obj, args.trace or str(args.out) + ".trace.json")
    return EXIT_OK


def _propensity_for(args, instances, schema) -> metrics.PropensityTable:
    if args.propensity == "sidecar":
        path = args.sidecar or _truth_path(args.data)
        truth = _load_json(path)
        return metrics.PropensityTable.from_position_bias(truth["position_bias"],
                                                          p_min=args.p_min)
    return metrics.estimate_propensity(instances, p_min=args.p_min,
                                       smoothing=args.smoothing)


def cmd_evaluate(args) -> int:
    schema = _read_schema(args)
    params = load_checkpoint(args.ckpt)
    instances = load_jsonl(args.data, schema)
    k_values = [int(x) for x in args.k.split(",") if x]
    if not k_values or any(k < 1 for k in k_values):
        raise DataError(f"invalid cutoff list {args.k!r}")
    prop = _propensity_for(args, instances, schema)
    report = metrics.evaluate_model(params, instances, k_values, prop)
    _emit(report.to_json(), args.out)
    return EXIT_OK


def cmd_rerank(args) -> int:
    schema = _read_schema(args)
    params = load_checkpoint(args.ckpt)
    instances = load_jsonl(args.data, schema)
    with open(args.out, "w", encoding="utf-8") as fh:
        for inst in instances:
            scores = score(params, inst)
            order = rerank(params, inst)
            fh.write(json.dumps({
                "user_id": inst.user_id,
                "item_ids": [inst.candidates[i].item_id for i in order],
                "scores": [round(float(scores[i]), 12) for i in order],
            }, separators=(",", ":")) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    inst_shape = dict(GRADCHECK_INSTANCE)
    model_values = dict(GRADCHECK_MODEL)
    if args.config:
        file_values = _load_json(args.config)
        inst_shape.update({k: file_values.pop(k) for k in list(file_values)
                           if k in inst_shape})
        model_values.update(file_values)
    seed = args.seed if args.seed is not None else 0
    model_values["seed"] = seed
    config = ModelConfig.from_json(model_values)
    schema = FeatureSchema(
        vocab_sizes=tuple(inst_shape["vocab_sizes"]),
        d_dense=int(inst_shape["d_dense"]),
        d_embed=config.d_e,
        user_vocab_sizes=tuple(inst_shape["user_vocab_sizes"]))
    params = build_parameters(schema, config)
    inst = properties.random_instances(schema, inst_shape["n"], inst_shape["m"],
                                       count=1, seed=seed + 1)[0]

    def objective():
        result = forward(params, inst)
        return bce_loss(result.scores, result.batch.labels, result.batch.cand_mask)

    report = ad.finite_diff_check(objective, params.named, step=args.step,
                                  tolerance=args.tolerance)
    worst = max(report.values())
    failures = ad.check_gradients(report, args.tolerance)
    _emit({"tolerance": args.tolerance, "step": args.step,
           "max_relative_error": worst,
           "parameters": {k: v for k, v in sorted(report.items())},
           "failures": failures, "passed": not failures}, args.out)
    if failures:
        raise CheckFailed(f"{len(failures)} parameter(s) exceed tolerance "
                          f"{args.tolerance}: {failures[:5]}")
    return EXIT_OK


def cmd_permtest(args) -> int:
    if args.ckpt:
        params = load_checkpoint(args.ckpt)
        schema = params.schema
        if args.mode and args.mode != params.config.mode:
            import dataclasses
            config = dataclasses.replace(params.config, mode=args.mode)
            params = build_parameters(schema, config)
            log.info("rebuilt random-init parameters in %s mode", args.mode)
    else:
        schema = FeatureSchema(vocab_sizes=(13, 9), d_dense=2, d_embed=4,
                               user_vocab_sizes=(7,))
        config = ModelConfig(d_e=4, d_h=4, d_a=4, mlp_layers=(8,), decay_hidden=4,
                             n_max=args.n, m_max=args.m, mode=args.mode or "equivariant",
                             seed=args.seed)
        params = build_parameters(schema, config)
    instances = properties.random_instances(schema, args.n, args.m,
                                            count=args.instances, seed=args.seed,
                                            n_jitter=False)
    report = properties.check_invariance(params, instances, trials=args.perms,
                                         seed=args.seed + 1, tol=args.tolerance)
    _emit(report.to_json(), args.out)
    if params.config.mode == "equivariant" and not report.passed:
        raise CheckFailed(f"equivariant mode deviated by {report.max_deviation:g} "
                          f"(tolerance {report.tolerance:g})")
    return EXIT_OK


def cmd_inspect(args) -> int:
    schema = _read_schema(args)
    params = load_checkpoint(args.ckpt)
    instances = load_jsonl(args.data, schema)
    if not (0 <= args.index < len(instances)):
        raise DataError(f"index {args.index} out of range for {len(instances)} instances")
    inst = instances[args.index]
    result = forward(params, inst)
    b = result.bundle
    n = result.n

    def matrix(t, rows=None):
        if t is None:
            return None
        data = t.data if rows is None else t.data[:rows]
        return [[float(x) for x in row] for row in data]

    obj = {
        "user_id": inst.user_id,
        "mode": params.config.mode,
        "candidates": {
            "item_ids": [c.item_id for c in inst.candidates],
            "categories": [c.category for c in inst.candidates],
        },
        "history": {
            "item_ids": [h.item_id for h in inst.history],
            "categories": [h.category for h in inst.history],
            "intervals": [h.time_interval for h in inst.history],
        },
        "scores": [float(x) for x in result.score_vector()],
        "decay_rate": b.decay_rate,
        "set_attention": matrix(b.set_attention, n),
        "list_attention": matrix(b.list_attention, n),
        "item_affinity": matrix(b.item_affinity, n),
        "feature_affinity": matrix(b.feature_affinity, n),
        "combined_affinity": matrix(b.combined_affinity, n),
        "decay": matrix(b.decay_matrix, n),
        "decayed_affinity": matrix(b.decayed_affinity, n),
    }
    _emit(obj, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Wiring.

def build_parser() -> _Parser:
    parser = _Parser(prog="mir", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic click-log dataset")
    p.add_argument("--config", help="synthetic generator config JSON")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a JSONL dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--schema", help="schema JSON (default: <data>.schema.json)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="training trace path (default: <out>.trace.json)")
    p.add_argument("--ablate", action="append", choices=["fi", "ii", "dcy", "set", "lst"],
                   help="disable a component (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=["literal", "equivariant"])
    p.add_argument("--n-max", dest="n_max", type=int)
    p.add_argument("--m-max", dest="m_max", type=int)
    p.add_argument("--strict", action="store_true", help="reject unknown JSON fields")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint with ranking/utility metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schema")
    p.add_argument("--k", default="5,10", help="comma-separated cutoffs")
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--propensity", choices=["estimate", "sidecar"], default="estimate")
    p.add_argument("--sidecar", help="ground-truth sidecar (default: <data>.truth.json)")
    p.add_argument("--p-min", dest="p_min", type=float, default=0.05)
    p.add_argument("--smoothing", type=float, default=1.0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("rerank", help="write reranked item lists")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schema")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rerank)

    p = sub.add_parser("gradcheck", help="verify tape gradients against finite differences")
    p.add_argument("--config", help="overrides for the default desk-scale shape")
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("permtest", help="measure permutation invariance of scoring")
    p.add_argument("--ckpt", help="checkpoint (random-init default config when omitted)")
    p.add_argument("--mode", choices=["literal", "equivariant"])
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--perms", type=int, default=20)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_permtest)

    p = sub.add_parser("inspect", help="dump attention and affinity matrices for one instance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except CheckFailed as e:
        log.error("check failed: %s", e)
        sys.stderr.write(f"check failed: {e}\n")
        return EXIT_CHECK_FAILED
    except (DataError, CheckpointError, ValueError) as e:
        sys.stderr.write(f"validation error: {e}\n")
        return EXIT_VALIDATION
    except (OSError, TrainingError, FloatingPointError) as e:
        sys.stderr.write(f"runtime failure: {e}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
