"""Command-line entry point: run, compare, ablate, domain-adapt, gradcheck.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import experiment, reports
from .config import ConfigError, RunConfig, load_config
from .data_synth import DataConfigError
from .federation import PROTOCOLS, ProtocolError
from .gradcheck import gradient_suite
from .segnet import ConfigError as ModelConfigError

log = logging.getLogger("pflfe")

DEFAULT_COMPARE = ("pflfe", "fc_pflfe", "decoupled_no_lfe", "fedavg", "local_only")
CONFIG_ERRORS = (ConfigError, ModelConfigError, DataConfigError, ProtocolError, ValueError, TypeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _protocol_list(values: Sequence[str] | None) -> list[str]:
    out: list[str] = []
    for v in values or ():
        out += [p.strip() for p in v.split(",") if p.strip()]
    for p in out:
        if p not in PROTOCOLS:
            raise UsageError(f"unknown protocol {p!r}; expected one of {', '.join(PROTOCOLS)}")
    return out


def _add_common(p: argparse.ArgumentParser, protocol_help: str) -> None:
    p.add_argument("--config", required=True, help="TOML run configuration (or the name of a bundled preset)")
    p.add_argument("--protocol", action="append", help=protocol_help)
    p.add_argument("--rounds", type=int, help="override the number of communication rounds")
    p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    p.add_argument("--out", help="output directory (the PFLFE_OUT environment variable takes precedence)")
    p.add_argument("--threads", type=int, help="worker threads for client-local stages")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pflfe", description="Personalized federated segmentation experiments.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _add_common(sub.add_parser("run", help="run one protocol end to end"), "protocol to run")
    _add_common(sub.add_parser("compare", help="run several protocols from identical seeds and data"),
                "protocols to compare (repeat or comma-separate; at least two)")
    _add_common(sub.add_parser("ablate", help="sweep LFE on/off and personalization boundaries"),
                "unused; the sweep fixes its own protocols")
    _add_common(sub.add_parser("domain-adapt", help="leave-one-client-out frozen-encoder adaptation"),
                "federations to adapt from (default: configured protocol and fedavg)")

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    g.add_argument("--seeds", type=int, default=20, help="number of random seeds per case")
    g.add_argument("--tolerance", type=float, default=1e-3)
    g.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    protocols = _protocol_list(args.protocol)
    single = protocols[0] if args.command == "run" and protocols else None
    if args.command == "run" and len(protocols) > 1:
        raise UsageError("run takes a single --protocol")
    if args.rounds is not None and args.rounds < 1:
        raise ConfigError("--rounds must be >= 1")
    out_dir = os.environ.get("PFLFE_OUT") or args.out
    return cfg.with_overrides(protocol=single, rounds=args.rounds, seed=args.seed, out_dir=out_dir,
                              threads=args.threads)


def cmd_run(cfg: RunConfig) -> int:
    results = []
    for seed in cfg.seeds:
        ckpt = None
        if cfg.checkpoints:
            ckpt = os.path.join(cfg.out_dir, cfg.plan.protocol, f"seed_{seed}", "checkpoints")
        results.append(experiment.run_protocol(cfg, cfg.plan.protocol, seed, checkpoint_dir=ckpt))
    reports.emit_all(results, cfg.out_dir)
    for r in results:
        print(f"{r.protocol} seed={r.seed} dice_acli={r.final.dice_acli:.4f} "
              f"vdice_acli={r.final.vdice_acli:.4f} bytes={r.ledger.total_bytes()}")
    return 0


def cmd_compare(cfg: RunConfig, protocols: list[str]) -> int:
    results = experiment.compare(cfg, protocols)
    reports.emit_all(results, cfg.out_dir)
    for name, row in experiment.summarize(results).items():
        print(f"{name:18s} dice_acli={row['dice_acli']:.4f} vdice_acli={row['vdice_acli']:.4f} "
              f"drift_kl={row['drift_kl']:.4f}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    settings = experiment.ablation_settings(cfg)
    results = experiment.ablate(cfg)
    reports.emit_all(results, cfg.out_dir)
    boundaries = {s.label: s.boundary.label() for s in settings}
    reports.write_text(os.path.join(cfg.out_dir, "ablation.csv"), reports.ablation_csv(results, boundaries))
    for name, row in experiment.summarize(results).items():
        print(f"{name:14s} dice_acli={row['dice_acli']:.4f}")
    return 0


def cmd_domain_adapt(cfg: RunConfig, protocols: list[str]) -> int:
    study = experiment.domain_adaptation(cfg, protocols)
    for row in study.rows:
        if not row.excluded:
            raise RuntimeError(f"held-out client {row.held_out} data found in its federation")
        log.info("%s seed=%d held_out=%d dice=%.4f encoder_frozen=%s excluded=%s", row.protocol, row.seed,
                 row.held_out, row.dice, row.encoder_frozen, row.excluded)
    reports.write_text(os.path.join(cfg.out_dir, "domain_adapt.csv"), reports.adapt_csv(study))
    for protocol in protocols:
        means = [study.mean_dice(protocol, s) for s in cfg.seeds]
        print(f"{protocol:18s} held_out_dice={np.mean(means):.4f}")
    return 0


def _scramble(grads: dict[str, np.ndarray]) -> None:
    for g in grads.values():
        g *= 1.5
        g += 0.01


def cmd_gradcheck(seeds: int, tolerance: float, inject_fault: bool) -> int:
    worst = gradient_suite(range(seeds), tolerance=tolerance, fault=_scramble if inject_fault else None)
    failed = [name for name, err in worst.items() if err > tolerance]
    for name, err in worst.items():
        print(f"{name:26s} max_rel_error={err:.3e} {'FAIL' if err > tolerance else 'ok'}")
    print(f"{len(worst) - len(failed)}/{len(worst)} cases within {tolerance:g} over {seeds} seeds")
    return 1 if failed else 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"pflfe: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "gradcheck":
        if args.seeds < 1:
            print("pflfe: error: --seeds must be >= 1", file=sys.stderr)
            return 1
        return cmd_gradcheck(args.seeds, args.tolerance, args.inject_fault)

    try:
        cfg = _load(args)
        protocols = _protocol_list(args.protocol)
        if args.command == "compare":
            protocols = protocols or list(DEFAULT_COMPARE)
            if len(set(protocols)) < 2:
                raise UsageError("compare needs at least two distinct protocols")
        elif args.command == "domain-adapt":
            protocols = protocols or list(dict.fromkeys([cfg.plan.protocol, "fedavg"]))
    except (UsageError, *CONFIG_ERRORS) as exc:
        print(f"pflfe: error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "compare":
            return cmd_compare(cfg, protocols)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_domain_adapt(cfg, protocols)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"pflfe: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
