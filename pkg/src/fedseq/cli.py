"""Command-line entry point.

Subcommands mirror the pipeline stages: ``partition``, ``pretrain``,
``group``, ``train``, ``centralized``, ``report``. Every stage reads an
experiment config (file or preset) plus ``--set key=value`` overrides
and writes its artifacts into the configured output directory.

Exit codes: 0 success, 2 configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, ExperimentConfig, RunManifest, from_preset, load_config
from .harness import (
    prepare,
    prepare_estimates,
    prepare_superclients,
    run_experiment,
    write_speedup_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a flat key=value config file")
    parser.add_argument(
        "--preset",
        help="named preset (desk-synth, paper-cifar10) used instead of --config",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")
    if args.config:
        return load_config(args.config, args.overrides)
    if args.preset:
        return from_preset(args.preset, args.overrides)
    raise ConfigError("one of --config or --preset is required")


def _cmd_partition(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    setup = prepare(config)
    os.makedirs(config.output_dir, exist_ok=True)
    out = os.path.join(config.output_dir, "partition.json")
    with open(out, "w") as fh:
        fh.write(setup.partition.to_json())
    _write_stage_manifest(config, setup)
    print(f"wrote {out} ({setup.partition.num_clients} clients)")
    return EXIT_OK


def _cmd_pretrain(args: argparse.Namespace) -> int:
    from .approximator import pretrain_clients

    config = _resolve_config(args)
    setup = prepare(config)
    result = pretrain_clients(
        setup.theta0, setup.spec, setup.train, setup.partition,
        config.pretrain_epochs, setup.hyper, seed=config.seed,
    )
    ckpt_dir = os.path.join(config.output_dir, "pretrain")
    os.makedirs(ckpt_dir, exist_ok=True)
    setup.theta0.save(os.path.join(ckpt_dir, "theta0.bin"))
    for k, params in enumerate(result.client_params):
        params.save(os.path.join(ckpt_dir, f"client_{k:04d}.bin"))
    _write_stage_manifest(config, setup)
    print(f"wrote {len(result.client_params)} checkpoints under {ckpt_dir}")
    return EXIT_OK


def _cmd_group(args: argparse.Namespace) -> int:
    from .grouping import GroupingConfig, grouping_report

    config = _resolve_config(args)
    setup = prepare(config)
    estimates = prepare_estimates(config, setup)
    superclients = prepare_superclients(config, setup, estimates)
    os.makedirs(config.output_dir, exist_ok=True)
    if estimates is not None:
        estimates.to_csv(os.path.join(config.output_dir, "estimates.csv"))
    grouping_config = GroupingConfig(
        min_samples=config.grouping_min_samples,
        max_clients=config.grouping_max_clients,
        method=config.grouping_method,
        metric=config.grouping_metric,
        seed=config.seed,
    )
    out = os.path.join(config.output_dir, "grouping.csv")
    grouping_report(superclients, setup.partition, setup.train, grouping_config, out)
    _write_stage_manifest(config, setup)
    print(f"wrote {out} ({len(superclients)} superclients)")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    if config.algorithm == "centralized":
        raise ConfigError("use the 'centralized' subcommand for the centralized run")
    history, manifest = run_experiment(config)
    print(
        f"{config.algorithm}: {len(history)} rounds, "
        f"final accuracy {manifest.extras['final_accuracy']:.4f}"
    )
    return EXIT_DIVERGED if history.diverged else EXIT_OK


def _cmd_centralized(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    overridden = [*args.overrides, "algorithm=centralized"]
    if args.config:
        config = load_config(args.config, overridden)
    else:
        config = from_preset(args.preset, overridden)
    history, manifest = run_experiment(config)
    print(
        f"centralized: {len(history)} epochs, "
        f"accuracy {manifest.extras['centralized_accuracy']:.4f}"
    )
    return EXIT_DIVERGED if history.diverged else EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    out = os.path.join(args.dir, "speedups.csv")
    write_speedup_report(args.dir, out)
    print(f"wrote {out}")
    return EXIT_OK


def _write_stage_manifest(config: ExperimentConfig, setup) -> None:
    manifest = RunManifest.begin(config)
    manifest.extras.update(setup.extras)
    manifest.extras["algorithm"] = config.algorithm
    manifest.finish()
    os.makedirs(config.output_dir, exist_ok=True)
    manifest.write(os.path.join(config.output_dir, "stage_manifest.json"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedseq",
        description="Federated-learning simulator with sequentially trained "
        "superclients and standard baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler, description in (
        ("partition", _cmd_partition, "write the client partition as JSON"),
        ("pretrain", _cmd_pretrain, "pre-train per-client models and save checkpoints"),
        ("group", _cmd_group, "build superclients and write the grouping report"),
        ("train", _cmd_train, "run a federated algorithm end to end"),
        ("centralized", _cmd_centralized, "run the centralized reference"),
    ):
        p = sub.add_parser(name, help=description)
        _add_config_options(p)
        p.set_defaults(handler=handler)

    report = sub.add_parser("report", help="aggregate runs into speedups.csv")
    report.add_argument("--dir", required=True, help="directory holding run outputs")
    report.set_defaults(handler=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
