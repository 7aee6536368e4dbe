"""Local training objectives, server aggregation, and the client-level
federated round loop (FedAvg / FedProx / FedDyn).

The proximal objective penalizes distance to an anchor model; the
dynamic objective additionally carries a per-participant gradient memory
whose update after local training keeps local and global stationary
points aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClientPartition, LabeledDataset
from .history import TrainHistory
from .nn import (
    Batch,
    ModelSpec,
    NonFiniteError,
    OptimizerState,
    ParamVector,
    forward,
    loss_and_grad,
    sgd_step,
)
from .seeding import SeedKey, stream, PHASE_LOCAL, PHASE_SAMPLE

PLAIN = "plain"
PROX = "prox"
DYN = "dyn"

FEDAVG = "fedavg"
FEDDYN = "feddyn"


@dataclass(frozen=True)
class SGDHyper:
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 4e-4
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LocalObjective:
    """Loss shape for local training: plain, prox(mu, anchor), or
    dyn(alpha_dyn, anchor, grad_memory)."""

    kind: str = PLAIN
    mu: float = 0.0
    alpha_dyn: float = 0.0
    anchor: ParamVector | None = None
    grad_memory: ParamVector | None = None

    def __post_init__(self) -> None:
        if self.kind not in (PLAIN, PROX, DYN):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind == PROX:
            if self.mu < 0 or self.anchor is None:
                raise ValueError("prox objective needs mu >= 0 and an anchor")
        if self.kind == DYN:
            if self.alpha_dyn <= 0 or self.anchor is None or self.grad_memory is None:
                raise ValueError("dyn objective needs alpha_dyn > 0, anchor, grad memory")

    def check_layout(self, params: ParamVector) -> None:
        for other in (self.anchor, self.grad_memory):
            if other is not None and other.layout != params.layout:
                raise ValueError("objective anchors do not match the parameter layout")

    def penalty_grad(self, theta: np.ndarray) -> np.ndarray | None:
        if self.kind == PROX:
            return self.mu * (theta - self.anchor.values)
        if self.kind == DYN:
            return self.alpha_dyn * (theta - self.anchor.values) - self.grad_memory.values
        return None

    def updated_grad_memory(self, final: ParamVector) -> ParamVector | None:
        """Post-training recurrence: gm <- gm - alpha_dyn * (theta - anchor)."""
        if self.kind != DYN:
            return None
        return ParamVector(
            self.grad_memory.values - self.alpha_dyn * (final.values - self.anchor.values),
            final.layout,
        )


@dataclass
class ClientUpdate:
    params: ParamVector
    num_samples: int
    participant_id: int
    grad_memory: ParamVector | None = None

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError("update must represent at least one sample")


@dataclass
class ServerState:
    params: ParamVector
    round: int = 0
    h: np.ndarray | None = None
    population: int = 0

    @staticmethod
    def fresh(theta0: ParamVector, population: int, aggregation: str) -> "ServerState":
        h = np.zeros_like(theta0.values) if aggregation == FEDDYN else None
        return ServerState(theta0, 0, h, population)


def local_train(
    init: ParamVector,
    spec: ModelSpec,
    dataset: LabeledDataset,
    indices: np.ndarray,
    epochs: int,
    objective: LocalObjective,
    hyper: SGDHyper,
    seed: SeedKey | np.random.Generator,
    participant_id: int = 0,
) -> ClientUpdate:
    """Mini-batch SGD for ``epochs`` passes over the participant's data."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    objective.check_layout(init)
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    x_local = dataset.inputs[indices]
    y_local = dataset.labels[indices]
    n = len(y_local)

    theta = init
    opt = OptimizerState.fresh(init, hyper.lr, hyper.momentum, hyper.weight_decay)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            rows = order[start : start + hyper.batch_size]
            batch = Batch(x_local[rows], y_local[rows])
            _, grad = loss_and_grad(theta, spec, batch)
            extra = objective.penalty_grad(theta.values)
            if extra is not None:
                grad = ParamVector(grad.values + extra, grad.layout)
            theta = sgd_step(theta, grad, opt)
    return ClientUpdate(
        params=theta,
        num_samples=n,
        participant_id=participant_id,
        grad_memory=objective.updated_grad_memory(theta),
    )


def fedavg_aggregate(updates: list[ClientUpdate]) -> ParamVector:
    """Sample-count weighted mean of the participating models."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    total = sum(u.num_samples for u in updates)
    acc = np.zeros_like(updates[0].params.values)
    for u in sorted(updates, key=lambda u: u.participant_id):
        acc += (u.num_samples / total) * u.params.values
    return ParamVector(acc, updates[0].params.layout)


def feddyn_aggregate(
    updates: list[ClientUpdate], state: ServerState, theta_prev: ParamVector
) -> ParamVector:
    """Mean of participants minus the running drift sum over the population.

    The drift term accumulates into ``state.h`` so that repeated rounds
    keep the running-sum semantics.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    if state.population < 1 or state.h is None:
        raise ValueError("server state not prepared for dynamic aggregation")
    ordered = sorted(updates, key=lambda u: u.participant_id)
    mean = np.zeros_like(theta_prev.values)
    for u in ordered:
        mean += u.params.values
        state.h += u.params.values - theta_prev.values
    mean /= len(ordered)
    return ParamVector(mean - state.h / state.population, theta_prev.layout)


def evaluate(
    params: ParamVector,
    spec: ModelSpec,
    dataset: LabeledDataset,
    indices: np.ndarray | None = None,
    chunk: int = 1024,
) -> float:
    """Fraction of correct argmax predictions (ties go to the lowest class)."""
    if indices is None:
        inputs, labels = dataset.inputs, dataset.labels
    else:
        inputs, labels = dataset.inputs[indices], dataset.labels[indices]
    correct = 0
    for start in range(0, len(labels), chunk):
        rows = slice(start, start + chunk)
        logits = forward(params, spec, Batch(inputs[rows], labels[rows]))
        correct += int((np.argmax(logits, axis=1) == labels[rows]).sum())
    return correct / len(labels)


@dataclass(frozen=True)
class FederatedConfig:
    """Round-loop knobs shared by the client-level baselines and the
    sequential variants."""

    rounds: int = 100
    fraction: float = 0.2
    epochs_client: int = 1
    objective: str = PLAIN
    mu: float = 0.01
    alpha_dyn: float = 0.1
    aggregation: str = FEDAVG
    seed: int = 0
    hyper: SGDHyper = field(default_factory=SGDHyper)

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.epochs_client < 1:
            raise ValueError("rounds and epochs_client must be >= 1")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        if self.objective not in (PLAIN, PROX, DYN):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.aggregation not in (FEDAVG, FEDDYN):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


def sample_participants(num_total: int, fraction: float, seed: SeedKey, round_idx: int) -> np.ndarray:
    count = math.ceil(fraction * num_total)
    return stream(seed, PHASE_SAMPLE, round_idx).choice(num_total, size=count, replace=False)


def build_objective(
    config: FederatedConfig, anchor: ParamVector,
    grad_memories: dict[int, ParamVector], participant_id: int,
) -> LocalObjective:
    if config.objective == PLAIN:
        return LocalObjective(PLAIN)
    if config.objective == PROX:
        return LocalObjective(PROX, mu=config.mu, anchor=anchor)
    memory = grad_memories.get(participant_id)
    if memory is None:
        memory = anchor.zeros_like()
    return LocalObjective(DYN, alpha_dyn=config.alpha_dyn, anchor=anchor, grad_memory=memory)


def federated_run(
    config: FederatedConfig,
    dataset: LabeledDataset,
    partition: ClientPartition,
    theta0: ParamVector,
    spec: ModelSpec,
    test: LabeledDataset,
    eval_indices: np.ndarray | None = None,
    algorithm: str = "fedavg",
) -> TrainHistory:
    """Client-level rounds: sample, train locally, aggregate, evaluate."""
    history = TrainHistory(algorithm)
    state = ServerState.fresh(theta0, partition.num_clients, config.aggregation)
    grad_memories: dict[int, ParamVector] = {}
    theta = theta0
    for t in range(config.rounds):
        participants = sample_participants(
            partition.num_clients, config.fraction, config.seed, t
        )
        updates = []
        try:
            for k in sorted(int(p) for p in participants):
                objective = build_objective(config, theta, grad_memories, k)
                update = local_train(
                    theta,
                    spec,
                    dataset,
                    partition.indices[k],
                    config.epochs_client,
                    objective,
                    config.hyper,
                    seed=stream(config.seed, PHASE_LOCAL, t, k),
                    participant_id=k,
                )
                updates.append(update)
                if update.grad_memory is not None:
                    grad_memories[k] = update.grad_memory
            if config.aggregation == FEDDYN:
                theta = feddyn_aggregate(updates, state, theta)
            else:
                theta = fedavg_aggregate(updates)
            if not np.isfinite(theta.values).all():
                history.diverged = True
                break
            accuracy = evaluate(theta, spec, test, eval_indices)
        except NonFiniteError:
            history.diverged = True
            break
        state.params = theta
        state.round = t + 1
        history.add(t + 1, accuracy, aggregated=True)
    return history
