"""Command-line driver: ``midl pretrain | run | sweep``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Any config field can be overridden as ``--section.field value``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from .errors import ConfigurationError, FeatureFileError, MidlError, ValidationError
from .experiment import ExperimentConfig, apply_overrides, cmd_run, cmd_sweep, write_pretrain

log = logging.getLogger("midl")

KL_FLAGS = {"av": "av_only", "per-modality": "per_modality"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("pretrain", "train the source model and unimodal references"),
                            ("run", "one online protocol run"),
                            ("sweep", "method x missing-rate x seed grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="stream seed (replaces the seed list)")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pretrain":
            continue
        p.add_argument("--checkpoint", help="pretrained model checkpoint (else pretrain in-process)")
        p.add_argument("--missing-rate", type=float)
        p.add_argument("--method")
        p.add_argument("--mixed", action="store_true", help="drop audio and video with equal odds")
        p.add_argument("--warmup", choices=("none", "lta", "shifted"))
        p.add_argument("--kl-mode", choices=sorted(KL_FLAGS))
        p.add_argument("--params", choices=("norm", "all"))
        p.add_argument("--workers", type=int)
    return parser


def _parse_value(text: str):
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, str):
        # YAML 1.1 reads exponents without a dot ("1e-3") as strings
        try:
            return float(value)
        except ValueError:
            pass
    return value


def parse_dotted(extra: Sequence[str]) -> dict:
    """``--a.b v`` / ``--a.b=v`` pairs into a mapping of typed values."""
    out: dict = {}
    items = list(extra)
    while items:
        token = items.pop(0)
        if not token.startswith("--") or len(token) == 2:
            raise ConfigurationError(f"unexpected argument {token!r}")
        key, eq, value = token[2:].partition("=")
        if not eq:
            if not items or items[0].startswith("--"):
                raise ConfigurationError(f"override --{key} needs a value")
            value = items.pop(0)
        out[key] = _parse_value(value)
    return out


def resolve_config(args: argparse.Namespace, extra: Sequence[str]) -> ExperimentConfig:
    doc: dict = {}
    if args.config is not None:
        try:
            doc = yaml.safe_load(args.config.read_text()) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {args.config} is not valid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config {args.config} must be a mapping")
    flags: dict = {}
    if args.seed is not None:
        flags["seeds"] = [args.seed]
    if args.out is not None:
        flags["out"] = args.out
    if args.command != "pretrain":
        if args.checkpoint is not None:
            flags["pretrain.checkpoint"] = args.checkpoint
        if args.missing_rate is not None:
            flags["schedule.missing_rate"] = args.missing_rate
        if args.method is not None:
            flags["adapter.method"] = args.method
        if args.mixed:
            flags["schedule.missing"] = "mixed"
        if args.warmup is not None:
            flags["warmup.mode"] = args.warmup
        if args.kl_mode is not None:
            flags["adapter.kl_mode"] = KL_FLAGS[args.kl_mode]
        if args.params is not None:
            flags["adapter.param_selection"] = args.params
        if args.workers is not None:
            flags["workers"] = args.workers
    flags.update(parse_dotted(extra))
    return ExperimentConfig.from_dict(apply_overrides(doc, flags))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
        out = Path(cfg.out)
        if args.command == "pretrain":
            record = write_pretrain(cfg, out)
            result = {m: r["val_accuracy"] for m, r in record["models"].items()}
            print(json.dumps({"val_accuracy": result, "out": str(out)}))
            return 0
        if args.command == "run":
            summary = cmd_run(cfg, out)
            print(json.dumps({"accuracy": summary["accuracy"], "out": str(out)}))
            return 0
        summary = cmd_sweep(cfg, out)
        for row in summary["table"]:
            print(f"{row['method']:8s} {row['missing_rate']:.2f} "
                  f"{100 * row['accuracy_mean']:6.2f} +- {100 * row['accuracy_std']:.2f}")
        if summary["failures"]:
            for f in summary["failures"]:
                log.error("cell %s/%s/%s failed: %s", f["method"], f["missing_rate"], f["seed"], f["error"])
            return 1
        return 0
    except (ConfigurationError, ValidationError, FeatureFileError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (MidlError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
