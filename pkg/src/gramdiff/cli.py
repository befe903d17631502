"""Command-line surface: gen-data, train, extract, decode, forecast, eval.

Exit codes: 0 success, 2 input error, 3 numerical failure. Every command that
takes --seed (or reads GRAMDIFF_SEED) is end-to-end reproducible: equal seeds
produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, extraction, grammar, inference, training
from .training import NumericalError, TrainConfig

EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _resolve_seed(flag_value, config_value=None):
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    env = os.environ.get("GRAMDIFF_SEED")
    return int(env) if env else 0


def cmd_gen_data(args):
    if args.grammar:
        g = data.load_grammar_file(args.grammar)
    else:
        g = data.builtin_grammar(args.builtin)
    seed = _resolve_seed(args.seed)
    records = data.sample_records(g, args.count, args.length, seed=seed,
                                  noise=args.noise, strength=args.noise_strength)
    data.write_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


_MODEL_KEYS = {"nonterminals": "N", "rules_per_nonterminal": "R", "terminals": "T",
               "context_dim": "D"}
_TRAIN_KEYS = {
    "epochs": int, "learning_rate": float, "lr_decay_every": int,
    "lr_decay_factor": float, "branching_factor": int, "max_branches": int,
    "temperature": float, "momentum": float, "keep_best": bool, "seed": int,
}


def _load_run_config(path):
    """Flat key = value sections: [model] dims and [train] hyperparameters."""
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path)
    model = {}
    for key, dim in _MODEL_KEYS.items():
        if parser.has_option("model", key) and parser.get("model", key).strip():
            model[dim] = parser.getint("model", key)
    train = {}
    for key, cast in _TRAIN_KEYS.items():
        if parser.has_option("train", key):
            if cast is bool:
                train[key] = parser.getboolean("train", key)
            else:
                train[key] = cast(parser.get("train", key))
    return model, train


def _echo_config(path, dims, config):
    parser = configparser.ConfigParser()
    parser["model"] = {
        "nonterminals": str(dims["N"]),
        "rules_per_nonterminal": str(dims["R"]),
        "terminals": str(dims["T"]),
    }
    if dims.get("D"):
        parser["model"]["context_dim"] = str(dims["D"])
    parser["train"] = {key: repr(getattr(config, key)).lower() if isinstance(getattr(config, key), bool)
                       else repr(getattr(config, key))
                       for key in _TRAIN_KEYS}
    with open(path, "w") as f:
        parser.write(f)


def cmd_train(args):
    dims, train_kwargs = _load_run_config(args.config)
    for flag, dim in (("n", "N"), ("r", "R"), ("t", "T"), ("d", "D")):
        value = getattr(args, flag)
        if value is not None:
            dims[dim] = value
    for key in _TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            train_kwargs[key] = value
    train_kwargs["seed"] = _resolve_seed(args.seed, train_kwargs.get("seed"))
    missing = [d for d in ("N", "R", "T") if d not in dims]
    if missing:
        raise ValueError(f"model dims {missing} not given (config [model] or flags)")

    records = data.read_dataset(args.dataset)
    if not records:
        raise ValueError(f"dataset {args.dataset} is empty")
    config = TrainConfig(**train_kwargs)
    config.validate()
    model = grammar.GrammarModel(dims["N"], dims["R"], dims["T"], D=dims.get("D"),
                                 seed=config.seed)
    report = training.train(model, records, config)

    out = Path(args.out)
    grammar.save_checkpoint(model, out)
    training.write_report_csv(report, out.with_suffix(".report.csv"))
    _echo_config(out.with_suffix(".config.ini"), dims, config)
    final = report[-1].mean_loss if report else float("nan")
    print(f"trained {config.epochs} epochs, final mean per-step loss {final:.6f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_extract(args):
    model, symbols = grammar.load_checkpoint(args.checkpoint)
    if args.symbols:
        symbols = args.symbols.split(",")
    g = extraction.extract(model, symbol_table=symbols, threshold=args.threshold,
                           tau=args.tau)
    formats = args.formats.split(",")
    prefix = Path(args.out_prefix)
    for fmt in formats:
        if fmt == "dot":
            prefix.with_suffix(".dot").write_text(extraction.render_dot(g))
        elif fmt == "json":
            prefix.with_suffix(".json").write_text(extraction.grammar_to_json(g))
        else:
            raise ValueError(f"unknown format {fmt!r}, expected dot or json")
    for rule in g.rules:
        print(f"{g.nonterminals[rule.lhs]} -> {g.terminals[rule.terminal]} "
              f"{g.nonterminals[rule.rhs]}  ({rule.probability:.3f})")
    print(f"start: {g.nonterminals[g.start]}")
    return 0


def cmd_decode(args):
    model, _ = grammar.load_checkpoint(args.checkpoint)
    records = data.read_dataset(args.dataset)
    with open(args.out, "w") as f:
        for rec in records:
            result = inference.constrained_decode(model, rec.targets, tau=args.tau,
                                                  beam=args.beam, context=rec.context)
            f.write(json.dumps({
                "id": rec.id,
                "fused": [[float(x) for x in row] for row in result.fused],
                "rules": result.rule_trace,
            }) + "\n")
    print(f"decoded {len(records)} records to {args.out}")
    return 0


def cmd_forecast(args):
    model, _ = grammar.load_checkpoint(args.checkpoint)
    records = data.read_dataset(args.dataset)
    obs_fracs = [float(x) for x in args.obs_frac.split(",")]
    pred_fracs = [float(x) for x in args.pred_frac.split(",")]
    rows = []
    for obs in obs_fracs:
        for pred in pred_fracs:
            acc = inference.forecast_accuracy(model, records, obs, pred,
                                              tau=args.tau, beam=args.beam)
            rows.append((obs, pred, acc))
            print(f"obs {obs:.2f} pred {pred:.2f}: accuracy {acc.mean_accuracy:.4f} "
                  f"({acc.n_records} records, {acc.n_skipped} skipped)")
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["obs_frac", "pred_frac", "accuracy", "n_records", "n_skipped"])
        for obs, pred, acc in rows:
            writer.writerow([repr(obs), repr(pred), repr(acc.mean_accuracy),
                             acc.n_records, acc.n_skipped])
    return 0


def cmd_eval(args):
    model, _ = grammar.load_checkpoint(args.checkpoint)
    records = data.read_dataset(args.dataset)
    report = inference.evaluate_detection(model, records, tau=args.tau, beam=args.beam)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "ap_fused"])
        for c, ap in enumerate(report.per_class_ap):
            writer.writerow([c, "" if np.isnan(ap) else repr(float(ap))])
        writer.writerow(["mAP_fused", repr(report.map_fused)])
        writer.writerow(["mAP_raw", repr(report.map_raw)])
        writer.writerow(["accuracy_fused", repr(report.accuracy_fused)])
        writer.writerow(["accuracy_raw", repr(report.accuracy_raw)])
    print(f"mAP fused {report.map_fused:.4f} raw {report.map_raw:.4f}; "
          f"accuracy fused {report.accuracy_fused:.4f} raw {report.accuracy_raw:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="gramdiff",
                                     description="differentiable regular grammar toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a dataset from a ground-truth grammar")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--builtin", choices=["toy", "cycle"])
    src.add_argument("--grammar", help="grammar text file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--noise", choices=["none", "logistic"], default="none")
    p.add_argument("--noise-strength", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a JSONL dataset")
    p.add_argument("--config", help="INI config with [model] and [train] sections")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.add_argument("--n", type=int, help="non-terminal count")
    p.add_argument("--r", type=int, help="rules per non-terminal")
    p.add_argument("--t", type=int, help="terminal dimension")
    p.add_argument("--d", type=int, help="context dimension")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--lr-decay-every", dest="lr_decay_every", type=int)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    p.add_argument("--branching-factor", dest="branching_factor", type=int)
    p.add_argument("--max-branches", dest="max_branches", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--keep-best", dest="keep_best", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("extract", help="read symbolic rules out of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=extraction.DEFAULT_THRESHOLD)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--formats", default="dot,json")
    p.add_argument("--symbols", help="comma-separated terminal names")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("decode", help="constrained-decode a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("forecast", help="score future-step accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--obs-frac", default="0.3")
    p.add_argument("--pred-frac", default="0.25")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("eval", help="fused vs raw detection metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
