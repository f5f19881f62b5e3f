"""Command-line front end.

Subcommands cover the pipeline stages: gen-data (phantom pool + split
directories), train (network pair + weights), attack (suites against cached
weights), suite (everything end to end), and report (re-emit reports from
stored CSVs). A JSON config file may supply every setting; individual flags
override it. The output directory resolves, in order: --output-dir flag,
SEGATTACK_OUTPUT_DIR environment variable, config file value, default.
Exit status is 0 only when every attack invariant re-check passed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import replace

from . import data as data_mod
from . import harness
from .harness import ExperimentConfig
from .model import load_weights, save_weights
from .training import train_pair

_TUPLE_FLOAT = ("epsilons", "resize_coefficients")
_TUPLE_INT = ("resize_classes",)
_TUPLE_STR = ("heart_scopes", "heart_noise_regions")
_SCALARS = {
    "pool_size": int, "train_count": int, "val_count": int, "test_count": int,
    "shared_train": int, "split_seed": int, "attack_iterations": int,
    "heart_small_fraction": float, "heart_large_ratio": float,
    "heart_variant_epsilon": float, "resize_epsilon": float,
    "master_seed": int, "output_dir": str,
}
# flag -> (nested config field, attribute, type); image_size also keeps
# spec.input_size in step so the receptive-field bookkeeping stays truthful
_NESTED = {
    "image_size": ("phantom", "image_size", int),
    "phantom_seed": ("phantom", "seed", int),
    "depth": ("spec", "depth", int),
    "base_features": ("spec", "base_features", int),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "patience": ("train", "patience", int),
    "train_seed": ("train", "seed", int),
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="JSON experiment config; flags override its values")
    for name, typ in _SCALARS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name,
                            type=typ, default=None)
    for name, (_, _, typ) in _NESTED.items():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name,
                            type=typ, default=None)
    for name in (*_TUPLE_FLOAT, *_TUPLE_INT, *_TUPLE_STR):
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name,
                            default=None, help="comma-separated list")


def _parse_tuple(raw: str, cast):
    return tuple(cast(part) for part in raw.split(",") if part.strip())


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            config = harness.config_from_dict(json.load(fh))
    else:
        config = ExperimentConfig()
    overrides = {}
    for name in _SCALARS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    for name, cast in ((*((n, float) for n in _TUPLE_FLOAT),
                        *((n, int) for n in _TUPLE_INT),
                        *((n, str) for n in _TUPLE_STR))):
        raw = getattr(args, name, None)
        if raw is not None:
            overrides[name] = _parse_tuple(raw, cast)
    nested = {}
    for name, (holder, attr, _) in _NESTED.items():
        value = getattr(args, name, None)
        if value is not None:
            nested.setdefault(holder, {})[attr] = value
    if "image_size" in nested.get("phantom", {}):
        nested.setdefault("spec", {}).setdefault(
            "input_size", nested["phantom"]["image_size"])
    for holder, fields in nested.items():
        overrides[holder] = replace(getattr(config, holder), **fields)
    if overrides:
        config = replace(config, **overrides)
    config.validate()
    return config


def _out_dir(config: ExperimentConfig) -> str:
    path = config.resolved_output_dir()
    os.makedirs(path, exist_ok=True)
    return path


def _write_config(config: ExperimentConfig, out: str) -> None:
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(harness.config_to_dict(config), fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args) -> int:
    config = build_config(args)
    out = _out_dir(config)
    pool = harness.build_pool(config)
    plan = harness.build_split(config, pool)
    data_dir = os.path.join(out, "data")
    for name in ("target_train", "target_val", "surrogate_train",
                 "surrogate_val", "test"):
        ids = getattr(plan, name)
        data_mod.write_split_dir(os.path.join(data_dir, name),
                                 [pool[i] for i in ids])
    with open(os.path.join(data_dir, "split.json"), "w") as fh:
        json.dump({name: list(getattr(plan, name)) for name in
                   ("target_train", "target_val", "surrogate_train",
                    "surrogate_val", "test")}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_config(config, out)
    print(f"wrote {len(pool)} phantoms across 5 splits to {data_dir}")
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    out = _out_dir(config)
    pool = harness.build_pool(config)
    plan = harness.build_split(config, pool)
    train_cfg = replace(config.train, seed=config.shifted(config.train.seed))
    target_net, surrogate_net = train_pair(pool, plan, config.spec, train_cfg)
    for role, net in (("target", target_net), ("surrogate", surrogate_net)):
        save_weights(net, os.path.join(out, f"{role}.weights"))
        print(f"{role}: saved weights to {out}/{role}.weights")
    _write_config(config, out)
    return 0


def cmd_attack(args) -> int:
    config = build_config(args)
    out = _out_dir(config)
    target_path = os.path.join(out, "target.weights")
    surrogate_path = os.path.join(out, "surrogate.weights")
    for path in (target_path, surrogate_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} not found; run `segattack train` first")
    result = harness.run_full_suite(config, load_weights(target_path),
                                    load_weights(surrogate_path))
    print(f"{result.attack_runs} attack rows, all invariant checks passed; "
          f"suite took {result.suite_seconds:.0f} s CPU")
    for suite, path in sorted(result.report_paths.items()):
        print(f"  {suite}: {path}")
    return 0


def cmd_suite(args) -> int:
    config = build_config(args)
    out = _out_dir(config)
    _write_config(config, out)
    result = harness.run_full_suite(config)
    print(f"{result.attack_runs} attack rows, all invariant checks passed; "
          f"suite took {result.suite_seconds:.0f} s CPU")
    for suite, path in sorted(result.report_paths.items()):
        print(f"  {suite}: {path}")
    return 0


def cmd_report(args) -> int:
    src = args.records_dir
    records = []
    for filename in harness.SUITE_FILES.values():
        path = os.path.join(src, filename)
        if os.path.exists(path):
            records += harness.read_records_csv(path)
    out = args.output_dir or os.environ.get(harness.OUTPUT_DIR_ENV) or src
    paths = harness.emit_report(records, out)
    print(f"re-emitted {len(records)} records")
    for suite, path in sorted(paths.items()):
        print(f"  {suite}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segattack",
        description="Train small segmentation networks on synthetic phantoms "
                    "and evaluate adversarial attacks against them.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, doc in (
        ("gen-data", cmd_gen_data, "generate the phantom pool and write split directories"),
        ("train", cmd_train, "train the attacked network and its surrogate"),
        ("attack", cmd_attack, "run all attack suites against cached weights"),
        ("suite", cmd_suite, "run the full experiment end to end"),
    ):
        p = sub.add_parser(name, help=doc)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="re-emit reports from stored suite CSVs")
    p.add_argument("records_dir", help="directory containing suite CSV files")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
