"""Sequential training inside superclients and the two round loops built
on top of it.

In the base variant every sampled superclient starts from the current
global model, passes it client-to-client (each client training a few
local epochs), and the final models are averaged every round. The
inter-superclient variant instead keeps a pool of models that travel
across superclients between rounds and are only averaged every
``num_superclients`` rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ClientPartition, LabeledDataset
from .flcore import (
    FEDAVG,
    FEDDYN,
    PLAIN,
    ClientUpdate,
    FederatedConfig,
    ServerState,
    build_objective,
    evaluate,
    fedavg_aggregate,
    feddyn_aggregate,
    local_train,
    sample_participants,
)
from .grouping import Superclient
from .history import TrainHistory
from .nn import ModelSpec, NonFiniteError, ParamVector
from .seeding import stream, PHASE_LOCAL, PHASE_SHUFFLE


@dataclass(frozen=True)
class FedSeqConfig(FederatedConfig):
    """FederatedConfig plus the number of passes around the superclient
    ring per round."""

    epochs_superclient: int = 1

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.epochs_superclient < 1:
            raise ValueError("epochs_superclient must be >= 1")


@dataclass
class InterState:
    """Model pool for the inter-superclient variant."""

    slots: list[ParamVector]
    weights: np.ndarray
    rounds_since_aggregation: int = 0

    def __post_init__(self) -> None:
        if len(self.slots) != len(self.weights):
            raise ValueError("one weight per slot")
        if np.any(self.weights < 0):
            raise ValueError("slot weights cannot be negative")

    @staticmethod
    def fresh(theta0: ParamVector, num_slots: int) -> "InterState":
        return InterState(
            [theta0.copy() for _ in range(num_slots)],
            np.zeros(num_slots, dtype=np.float64),
        )

    def weighted_average(self) -> ParamVector:
        total = self.weights.sum()
        if total == 0:
            return self.slots[0].copy()
        acc = np.zeros_like(self.slots[0].values)
        for w, slot in zip(self.weights, self.slots):
            acc += (w / total) * slot.values
        return ParamVector(acc, self.slots[0].layout)

    def reset(self, theta: ParamVector) -> None:
        self.slots = [theta.copy() for _ in range(len(self.slots))]
        self.weights[:] = 0.0
        self.rounds_since_aggregation = 0


def sequential_train_superclient(
    theta_in: ParamVector,
    superclient: Superclient,
    spec: ModelSpec,
    dataset: LabeledDataset,
    partition: ClientPartition,
    config: FedSeqConfig,
    round_idx: int,
    grad_memories: dict[int, ParamVector] | None = None,
) -> ClientUpdate:
    """One round of ring training through a superclient.

    Member order is reshuffled once per round. Under prox/dyn chains each
    client anchors to the model it receives, i.e. the previous client's
    output (the first client anchors to ``theta_in``); dyn gradient
    memories are per client and persist across rounds via the caller's
    dict.
    """
    order = list(superclient.members)
    shuffle_rng = stream(config.seed, PHASE_SHUFFLE, round_idx, superclient.id)
    shuffle_rng.shuffle(order)
    if grad_memories is None:
        grad_memories = {}
    batch_rngs = {
        k: stream(config.seed, PHASE_LOCAL, round_idx, k) for k in order
    }
    theta = theta_in
    for _ in range(config.epochs_superclient):
        for k in order:
            objective = build_objective(config, theta, grad_memories, k)
            update = local_train(
                theta,
                spec,
                dataset,
                partition.indices[k],
                config.epochs_client,
                objective,
                config.hyper,
                seed=batch_rngs[k],
                participant_id=k,
            )
            theta = update.params
            if update.grad_memory is not None:
                grad_memories[k] = update.grad_memory
    return ClientUpdate(theta, superclient.num_samples, superclient.id)


def fedseq_run(
    config: FedSeqConfig,
    superclients: list[Superclient],
    dataset: LabeledDataset,
    partition: ClientPartition,
    theta0: ParamVector,
    spec: ModelSpec,
    test: LabeledDataset,
    eval_indices: np.ndarray | None = None,
    algorithm: str = "fedseq",
) -> TrainHistory:
    """Superclient-level rounds aggregated every round."""
    history = TrainHistory(algorithm)
    num_sc = len(superclients)
    state = ServerState.fresh(theta0, num_sc, config.aggregation)
    grad_memories: dict[int, ParamVector] = {}
    theta = theta0
    for t in range(config.rounds):
        sampled = sample_participants(num_sc, config.fraction, config.seed, t)
        updates = []
        try:
            for idx in sorted(int(i) for i in sampled):
                updates.append(
                    sequential_train_superclient(
                        theta, superclients[idx], spec, dataset, partition,
                        config, t, grad_memories,
                    )
                )
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
        history.add(
            t + 1,
            accuracy,
            aggregated=True,
            superclient_epochs=config.epochs_superclient,
        )
    return history


def fedseqinter_run(
    config: FedSeqConfig,
    superclients: list[Superclient],
    dataset: LabeledDataset,
    partition: ClientPartition,
    theta0: ParamVector,
    spec: ModelSpec,
    test: LabeledDataset,
    eval_indices: np.ndarray | None = None,
    algorithm: str = "fedseqinter",
    state: InterState | None = None,
) -> TrainHistory:
    """Models travel across superclients; averaging happens every
    ``len(superclients)`` rounds.

    Slot i of the pool continues with the i-th superclient of the round's
    sampled list. Accuracy is measured every round on the would-be
    weighted average, which only replaces the pool on aggregation rounds.
    """
    history = TrainHistory(algorithm)
    num_sc = len(superclients)
    num_slots = math.ceil(config.fraction * num_sc)
    inter = state if state is not None else InterState.fresh(theta0, num_slots)
    if len(inter.slots) != num_slots:
        raise ValueError("provided state has the wrong slot count")
    grad_memories: dict[int, ParamVector] = {}
    for t in range(config.rounds):
        sampled = sample_participants(num_sc, config.fraction, config.seed, t)
        try:
            for slot, idx in enumerate(int(i) for i in sampled):
                update = sequential_train_superclient(
                    inter.slots[slot], superclients[idx], spec, dataset, partition,
                    config, t, grad_memories,
                )
                inter.slots[slot] = update.params
                inter.weights[slot] += update.num_samples
            snapshot = inter.weighted_average()
            if not np.isfinite(snapshot.values).all():
                history.diverged = True
                break
            accuracy = evaluate(snapshot, spec, test, eval_indices)
        except NonFiniteError:
            history.diverged = True
            break
        inter.rounds_since_aggregation += 1
        aggregated = t % num_sc == 0
        if aggregated:
            inter.reset(snapshot)
        history.add(
            t + 1,
            accuracy,
            aggregated=aggregated,
            superclient_epochs=config.epochs_superclient,
        )
    return history
