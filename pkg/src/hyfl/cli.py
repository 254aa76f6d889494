"""Command-line entry point: ``hyfl {gen-data,run,preset,attack}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import SAMPLING_METHODS, generate
from .experiment import MODES, PRESETS, TRANSPORTS, ExperimentConfig, run_experiment, run_preset
from .models import KINDS
from .transport import ROUTE_MODES

ATTACKS = ("inversion", "membership", "attribute", "leakage")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config; flags below override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-var", type=float)
    p.add_argument("--clients", type=int)
    p.add_argument("--interval", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--classifier", choices=KINDS)
    p.add_argument("--sampling", choices=SAMPLING_METHODS)
    p.add_argument("--route", choices=ROUTE_MODES)
    p.add_argument("--fraction", type=float)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--transport", choices=TRANSPORTS)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-accounts", type=int)
    p.add_argument("--no-masking", action="store_true")
    p.add_argument("--no-encryption", action="store_true")
    p.add_argument("--out", type=Path, default=Path("out"))


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(json.loads(args.config.read_text())) if args.config else ExperimentConfig()
    direct = {"noise_var": "noise_variance", "clients": "clients", "interval": "interval", "rounds": "rounds",
              "classifier": "classifier", "sampling": "sampling", "route": "route", "fraction": "fraction",
              "mode": "mode", "transport": "transport"}
    changes = {field: getattr(args, flag) for flag, field in direct.items() if getattr(args, flag) is not None}
    if args.classifier is not None and args.classifier != cfg.classifier:
        changes["train"] = {}
    if args.no_masking:
        changes["masking"] = False
    if args.no_encryption:
        changes["encryption"] = False
    data = {}
    if args.seed is not None:
        changes["seed"] = args.seed
        data["seed"] = args.seed
    if args.n_train is not None:
        data["n_train"] = args.n_train
    if args.n_accounts is not None:
        data["n_accounts"] = args.n_accounts
    cfg = replace(cfg, data=replace(cfg.data, **data), **changes)
    cfg.validate()
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyfl", description="Hybrid federated fraud-detection experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    _common(p)

    p = sub.add_parser("run", help="run one experiment")
    _common(p)
    p.add_argument("--dump-transcript", type=Path, help="write the message transcript as JSON lines")

    p = sub.add_parser("preset", help="run a named sweep")
    p.add_argument("name", choices=PRESETS)
    p.add_argument("--seeds", type=int, nargs="+", default=[1])
    _common(p)

    p = sub.add_parser("attack", help="run one privacy attack")
    p.add_argument("kind", choices=ATTACKS)
    _common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"hyfl: invalid configuration: {exc}", file=sys.stderr)
        return 2
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "gen-data":
        ds = generate(cfg.data)
        ds.to_csv(out)
        print(f"wrote {len(ds.tx_ids)} transactions and {len(ds.account_ids)} accounts to {out}")
    elif args.command == "run":
        rep = run_experiment(cfg, out, args.dump_transcript)
        print(json.dumps({k: getattr(rep, k) for k in ("precision", "recall", "f1", "aucpr")}, sort_keys=True))
    elif args.command == "preset":
        rows = run_preset(args.name, cfg, tuple(args.seeds), out)
        print(f"{len(rows)} rows written to {out / (args.name + '.csv')}")
    else:
        from . import red_team

        if args.kind == "inversion":
            reports = red_team.run_inversion(cfg)
        elif args.kind == "membership":
            reports = red_team.run_membership(cfg)
        elif args.kind == "attribute":
            reports = [red_team.run_attribute(cfg)]
        else:
            reports = red_team.run_leakage(cfg)
        doc = [r.to_json() for r in reports]
        (out / f"attack_{args.kind}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(json.dumps([r.metrics for r in reports], sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
