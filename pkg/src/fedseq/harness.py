"""Experiment orchestration: data -> pretrain -> group -> train -> report.

Each stage is deterministic given the experiment config, so the CLI
subcommands can re-run any prefix of the pipeline and get identical
artifacts. Wall-clock timings go into the manifest, never into the
metric CSVs, which must be byte-reproducible.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .approximator import (
    DistributionEstimate,
    oracle_estimate,
    pretrain_clients,
    psi_clf,
    psi_conf,
)
from .config import ConfigError, ExperimentConfig, RunManifest
from .data import (
    ClientPartition,
    ExemplarSet,
    LabeledDataset,
    build_exemplar_set,
    dirichlet_partition,
    load_cifar10,
    synth_dataset,
)
from .flcore import FederatedConfig, SGDHyper, evaluate, federated_run
from .grouping import GroupingConfig, Superclient, build_superclients, grouping_report
from .history import TrainHistory
from .nn import (
    Batch,
    ModelSpec,
    NonFiniteError,
    OptimizerState,
    ParamVector,
    cosine_annealing_lr,
    init_params,
    loss_and_grad,
    sgd_step,
)
from .seeding import stream, PHASE_CENTRAL
from .sequential import FedSeqConfig, fedseq_run, fedseqinter_run

NOT_REACHED = "not_reached"

CLIENT_LEVEL = ("fedavg", "fedprox", "feddyn")
SUPERCLIENT_LEVEL = (
    "fedseq",
    "fedseqinter",
    "fedseq+prox",
    "fedseq+dyn",
    "fedseqinter+prox",
    "fedseqinter+dyn",
)


@dataclass
class ExperimentSetup:
    """Everything the training loops need, derived from one config."""

    train: LabeledDataset
    test: LabeledDataset
    partition: ClientPartition
    exemplars: ExemplarSet
    eval_indices: np.ndarray
    spec: ModelSpec
    theta0: ParamVector
    hyper: SGDHyper
    extras: dict


def build_model_spec(config: ExperimentConfig, input_dim: int) -> ModelSpec:
    if config.model_kind == "small-cnn":
        if input_dim != 3072:
            raise ConfigError("small-cnn expects 3x32x32 inputs (input_dim 3072)")
        return ModelSpec(
            input_dim=input_dim,
            hidden=config.model_hidden,
            num_classes=config.data_num_classes,
            kind="small-cnn",
            image_shape=(3, 32, 32),
        )
    return ModelSpec(
        input_dim=input_dim,
        hidden=config.model_hidden,
        num_classes=config.data_num_classes,
        classifier_layers=min(config.model_classifier_layers, len(config.model_hidden) + 1),
    )


def prepare(config: ExperimentConfig) -> ExperimentSetup:
    extras: dict = {}
    if config.data_kind == "synthetic":
        train = synth_dataset(
            config.data_num_classes, config.data_per_class_train, config.data_dim,
            config.data_separation, seed=[config.seed, 0],
        )
        test = synth_dataset(
            config.data_num_classes, config.data_per_class_test, config.data_dim,
            config.data_separation, seed=[config.seed, 1],
        )
    elif config.data_kind == "cifar10":
        if not config.data_path:
            raise ConfigError("data.path must point at the CIFAR-10 binary batches")
        train, test, constants = load_cifar10(config.data_path)
        extras["normalization"] = constants
    else:
        raise ConfigError(f"unknown data.kind {config.data_kind!r}")

    partition = dirichlet_partition(
        train, config.data_num_clients, config.data_alpha, seed=[config.seed, 2]
    )
    exemplars = build_exemplar_set(
        test, config.data_exemplars_per_class, seed=[config.seed, 3]
    )
    eval_indices = np.setdiff1d(np.arange(len(test)), exemplars.source_indices)
    extras["exemplar_indices"] = exemplars.source_indices.tolist()

    spec = build_model_spec(config, train.input_dim)
    theta0 = init_params(spec, config.seed)
    hyper = SGDHyper(
        lr=config.optim_lr,
        momentum=config.optim_momentum,
        weight_decay=config.optim_weight_decay,
        batch_size=config.optim_batch_size,
    )
    return ExperimentSetup(
        train, test, partition, exemplars, eval_indices, spec, theta0, hyper, extras
    )


def prepare_estimates(
    config: ExperimentConfig, setup: ExperimentSetup
) -> DistributionEstimate | None:
    if config.grouping_method == "random":
        return None
    if config.approximator == "oracle":
        return oracle_estimate(setup.partition, setup.train)
    pretrained = pretrain_clients(
        setup.theta0, setup.spec, setup.train, setup.partition,
        config.pretrain_epochs, setup.hyper, seed=config.seed,
    )
    if config.approximator == "conf":
        return psi_conf(pretrained, setup.exemplars, mode=config.confidence_mode)
    if config.approximator == "clf":
        return psi_clf(
            pretrained, mode=config.classifier_mode,
            explained_variance=config.explained_variance,
        )
    raise ConfigError(f"unknown approximator {config.approximator!r}")


def prepare_superclients(
    config: ExperimentConfig, setup: ExperimentSetup,
    estimates: DistributionEstimate | None,
) -> list[Superclient]:
    grouping_config = GroupingConfig(
        min_samples=config.grouping_min_samples,
        max_clients=config.grouping_max_clients,
        method=config.grouping_method,
        metric=config.grouping_metric,
        seed=config.seed,
    )
    return build_superclients(
        estimates, setup.partition.sizes(), grouping_config, config.data_num_classes
    )


def centralized_training(config: ExperimentConfig, setup: ExperimentSetup) -> TrainHistory:
    """Single-model SGD over the pooled data with momentum and cosine
    annealing, evaluated once per epoch."""
    history = TrainHistory("centralized")
    theta = setup.theta0
    opt = OptimizerState.fresh(
        theta, config.optim_lr, config.centralized_momentum, config.optim_weight_decay
    )
    rng = stream(config.seed, PHASE_CENTRAL)
    n = len(setup.train)
    epochs = config.centralized_epochs
    for epoch in range(epochs):
        opt.lr = cosine_annealing_lr(epoch, epochs, config.optim_lr)
        order = rng.permutation(n)
        try:
            for start in range(0, n, setup.hyper.batch_size):
                rows = order[start : start + setup.hyper.batch_size]
                batch = Batch(setup.train.inputs[rows], setup.train.labels[rows])
                _, grad = loss_and_grad(theta, setup.spec, batch)
                theta = sgd_step(theta, grad, opt)
            if not np.isfinite(theta.values).all():
                history.diverged = True
                break
            accuracy = evaluate(theta, setup.spec, setup.test, setup.eval_indices)
        except NonFiniteError:
            history.diverged = True
            break
        history.add(epoch + 1, accuracy, aggregated=True)
    return history


def run_experiment(config: ExperimentConfig, out_dir: str | None = None) -> tuple[TrainHistory, RunManifest]:
    """Run the configured algorithm end to end, writing history.csv,
    manifest.json and (for grouped algorithms) grouping.csv."""
    out = out_dir if out_dir is not None else config.output_dir
    os.makedirs(out, exist_ok=True)
    manifest = RunManifest.begin(config)
    started = time.perf_counter()
    setup = prepare(config)
    manifest.extras.update(setup.extras)
    manifest.extras["algorithm"] = config.algorithm

    if config.algorithm == "centralized":
        history = centralized_training(config, setup)
        manifest.extras["centralized_accuracy"] = final_accuracy(history)
    elif config.algorithm in CLIENT_LEVEL:
        fed_config = FederatedConfig(
            rounds=config.rounds,
            fraction=config.fraction,
            epochs_client=config.epochs_client,
            objective=config.objective_kind(),
            mu=config.resolved_mu(),
            alpha_dyn=config.resolved_alpha_dyn(),
            aggregation=config.aggregation_kind(),
            seed=config.seed,
            hyper=setup.hyper,
        )
        history = federated_run(
            fed_config, setup.train, setup.partition, setup.theta0, setup.spec,
            setup.test, setup.eval_indices, algorithm=config.algorithm,
        )
    elif config.algorithm in SUPERCLIENT_LEVEL:
        estimates = prepare_estimates(config, setup)
        superclients = prepare_superclients(config, setup, estimates)
        grouping_config = GroupingConfig(
            min_samples=config.grouping_min_samples,
            max_clients=config.grouping_max_clients,
            method=config.grouping_method,
            metric=config.grouping_metric,
            seed=config.seed,
        )
        grouping_report(
            superclients, setup.partition, setup.train, grouping_config,
            os.path.join(out, "grouping.csv"),
        )
        manifest.extras["num_superclients"] = len(superclients)
        seq_config = FedSeqConfig(
            rounds=config.rounds,
            fraction=config.fraction,
            epochs_client=config.epochs_client,
            epochs_superclient=config.epochs_superclient,
            objective=config.objective_kind(),
            mu=config.resolved_mu(),
            alpha_dyn=config.resolved_alpha_dyn(),
            aggregation=config.aggregation_kind(),
            seed=config.seed,
            hyper=setup.hyper,
        )
        runner = (
            fedseqinter_run if config.algorithm.startswith("fedseqinter") else fedseq_run
        )
        history = runner(
            seq_config, superclients, setup.train, setup.partition, setup.theta0,
            setup.spec, setup.test, setup.eval_indices, algorithm=config.algorithm,
        )
    else:
        raise ConfigError(f"unknown algorithm {config.algorithm!r}")

    manifest.diverged = history.diverged
    manifest.extras["final_accuracy"] = final_accuracy(history) if len(history) else 0.0
    manifest.extras["rounds_recorded"] = len(history)
    manifest.extras["wall_seconds_total"] = time.perf_counter() - started
    manifest.finish()
    history.to_csv(os.path.join(out, "history.csv"))
    manifest.write(os.path.join(out, "manifest.json"))
    return history, manifest


def final_accuracy(history: TrainHistory) -> float:
    """Mean test accuracy over the trailing min(100, length) rounds."""
    accs = history.accuracies()
    if not accs:
        raise ValueError("history is empty")
    tail = accs[-min(100, len(accs)):]
    return float(np.mean(tail))


def rounds_to_target(
    history: TrainHistory,
    centralized_accuracy: float,
    fractions: tuple[float, ...] = (0.7, 0.8, 0.9),
    window: int = 10,
) -> dict[float, int | None]:
    """First round whose trailing-window smoothed accuracy reaches each
    fraction of the centralized accuracy; None when never reached."""
    if centralized_accuracy <= 0:
        raise ValueError("centralized accuracy must be positive")
    accs = history.accuracies()
    smoothed = []
    acc_sum = 0.0
    for i, a in enumerate(accs):
        acc_sum += a
        if i >= window:
            acc_sum -= accs[i - window]
        smoothed.append(acc_sum / min(i + 1, window))
    out: dict[float, int | None] = {}
    for fraction in fractions:
        target = fraction * centralized_accuracy
        out[fraction] = None
        for i, s in enumerate(smoothed):
            if s >= target:
                out[fraction] = history.records[i].round
                break
    return out


def write_speedup_report(
    run_dir: str, out_path: str, fractions: tuple[float, ...] = (0.7, 0.8, 0.9)
) -> None:
    """Scan run directories for manifests, compare every algorithm's
    rounds-to-target against FedAvg, and emit speedups.csv."""
    runs = _collect_runs(run_dir)
    centralized = [r for r in runs if r["algorithm"] == "centralized"]
    if not centralized:
        raise ConfigError(f"no centralized run under {run_dir}; cannot set targets")
    acc_centr = centralized[0]["manifest"].extras["centralized_accuracy"]

    per_run = []
    for run in runs:
        if run["algorithm"] == "centralized":
            continue
        targets = rounds_to_target(run["history"], acc_centr, fractions)
        per_run.append((run["algorithm"], run["path"], targets))
    per_run.sort(key=lambda item: (item[0], item[1]))

    fedavg_targets = next(
        (targets for algorithm, _, targets in per_run if algorithm == "fedavg"), None
    )
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "target_fraction", "rounds", "speedup_vs_fedavg"])
        for algorithm, _, targets in per_run:
            for fraction in fractions:
                reached = targets[fraction]
                speedup = ""
                if reached is not None and fedavg_targets is not None:
                    base = fedavg_targets[fraction]
                    if base is not None:
                        speedup = repr(base / reached)
                writer.writerow(
                    [algorithm, fraction,
                     reached if reached is not None else NOT_REACHED, speedup]
                )


def _collect_runs(run_dir: str) -> list[dict]:
    runs = []
    for root, _dirs, files in os.walk(run_dir):
        if "manifest.json" not in files or "history.csv" not in files:
            continue
        manifest = RunManifest.read(os.path.join(root, "manifest.json"))
        algorithm = manifest.extras.get("algorithm", manifest.config.get("algorithm", ""))
        runs.append(
            {
                "path": root,
                "manifest": manifest,
                "algorithm": algorithm,
                "history": TrainHistory.from_csv(
                    os.path.join(root, "history.csv"), algorithm
                ),
            }
        )
    return runs
