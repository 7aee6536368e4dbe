import numpy as np
import pytest

from fedseq.data import ClientPartition, LabeledDataset, synth_dataset
from fedseq.flcore import (
    DYN,
    PLAIN,
    PROX,
    FederatedConfig,
    LocalObjective,
    SGDHyper,
    evaluate,
    federated_run,
    local_train,
    sample_participants,
)
from fedseq.grouping import Superclient
from fedseq.nn import ModelSpec, init_params
from fedseq.sequential import (
    FedSeqConfig,
    InterState,
    fedseq_run,
    fedseqinter_run,
    sequential_train_superclient,
)
from fedseq.seeding import stream, PHASE_LOCAL

SPEC = ModelSpec(input_dim=6, hidden=(5,), num_classes=3)


@pytest.fixture(scope="module")
def toy():
    ds = synth_dataset(num_classes=3, n_per_class=40, dim=6, separation=4.0, seed=0)
    part = ClientPartition(
        tuple(np.arange(i * 24, (i + 1) * 24, dtype=np.int64) for i in range(5))
    )
    singletons = [Superclient(k, (k,), 24) for k in range(5)]
    return ds, part, singletons


def make_config(**kw):
    defaults = dict(rounds=3, fraction=1.0, seed=0,
                    hyper=SGDHyper(lr=0.05, batch_size=8, weight_decay=0.0))
    defaults.update(kw)
    return FedSeqConfig(**defaults)


class TestSequentialTrainSuperclient:
    def test_singleton_chain_equals_local_train(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 0)
        config = make_config()
        chained = sequential_train_superclient(
            theta0, singletons[2], SPEC, ds, part, config, round_idx=4
        )
        direct = local_train(
            theta0, SPEC, ds, part.indices[2], 1, LocalObjective(PLAIN),
            config.hyper, seed=stream(config.seed, PHASE_LOCAL, 4, 2),
            participant_id=2,
        )
        assert np.array_equal(chained.params.values, direct.params.values)
        assert chained.num_samples == 24
        assert chained.participant_id == 2

    def test_identical_clients_chain_like_double_epochs(self):
        # same samples behind two clients, full-batch steps
        base = synth_dataset(num_classes=3, n_per_class=10, dim=5, separation=4.0, seed=1)
        doubled = LabeledDataset(
            np.vstack([base.inputs, base.inputs]),
            np.concatenate([base.labels, base.labels]),
            3,
        )
        n = len(base)
        part = ClientPartition((np.arange(n), np.arange(n, 2 * n)))
        spec = ModelSpec(input_dim=5, hidden=(4,), num_classes=3)
        theta0 = init_params(spec, 1)
        hyper = SGDHyper(lr=0.05, batch_size=n, weight_decay=0.0)
        config = FedSeqConfig(rounds=1, fraction=1.0, seed=2, hyper=hyper)
        pair = Superclient(0, (0, 1), 2 * n)
        chained = sequential_train_superclient(
            theta0, pair, spec, doubled, part, config, round_idx=0
        )
        solo = local_train(
            theta0, spec, doubled, part.indices[0], 2, LocalObjective(PLAIN),
            hyper, seed=0,
        )
        assert np.max(np.abs(chained.params.values - solo.params.values)) < 1e-12

    def test_prox_chain_with_zero_mu_equals_plain(self, toy):
        ds, part, _ = toy
        theta0 = init_params(SPEC, 2)
        sc = Superclient(0, (0, 3, 1), 72)
        plain = sequential_train_superclient(
            theta0, sc, SPEC, ds, part, make_config(objective=PLAIN), 0
        )
        prox = sequential_train_superclient(
            theta0, sc, SPEC, ds, part, make_config(objective=PROX, mu=0.0), 0
        )
        assert np.array_equal(plain.params.values, prox.params.values)

    def test_dyn_chain_keeps_per_client_memories(self, toy):
        ds, part, _ = toy
        theta0 = init_params(SPEC, 3)
        sc = Superclient(0, (0, 1), 48)
        memories = {}
        config = make_config(objective=DYN, alpha_dyn=0.1)
        sequential_train_superclient(theta0, sc, SPEC, ds, part, config, 0, memories)
        assert set(memories) == {0, 1}
        before = {k: v.values.copy() for k, v in memories.items()}
        sequential_train_superclient(theta0, sc, SPEC, ds, part, config, 1, memories)
        assert any(not np.array_equal(before[k], memories[k].values) for k in memories)

    def test_member_order_reshuffled_across_rounds(self, toy):
        ds, part, _ = toy
        theta0 = init_params(SPEC, 4)
        sc = Superclient(0, (0, 1, 2, 3, 4), 120)
        config = make_config()
        a = sequential_train_superclient(theta0, sc, SPEC, ds, part, config, 0)
        b = sequential_train_superclient(theta0, sc, SPEC, ds, part, config, 1)
        # different visit order leads to a different chain result
        assert not np.array_equal(a.params.values, b.params.values)


class TestFedSeqRun:
    def test_reduces_to_fedavg_with_singletons(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 5)
        config = make_config(rounds=6, fraction=0.6, seed=7,
                             hyper=SGDHyper(lr=0.05, batch_size=8))
        seq = fedseq_run(config, singletons, ds, part, theta0, SPEC, ds)
        avg = federated_run(config, ds, part, theta0, SPEC, ds)
        assert seq.accuracies() == avg.accuracies()

    def test_single_superclient_full_fraction(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 6)
        config = make_config(rounds=2)
        one = [Superclient(0, (0,), 24)]
        single_part = ClientPartition((part.indices[0],))
        history = fedseq_run(config, one, ds, single_part, theta0, SPEC, ds)
        direct = federated_run(config, ds, single_part, theta0, SPEC, ds)
        assert history.accuracies() == direct.accuracies()

    def test_zero_lr_keeps_model_constant(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 7)
        config = make_config(rounds=4, hyper=SGDHyper(lr=0.0, batch_size=8))
        history = fedseq_run(config, singletons, ds, part, theta0, SPEC, ds)
        assert len(set(history.accuracies())) == 1

    def test_bit_identical_reruns(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 8)
        config = make_config(rounds=5, fraction=0.6, seed=9)
        a = fedseq_run(config, singletons, ds, part, theta0, SPEC, ds)
        b = fedseq_run(config, singletons, ds, part, theta0, SPEC, ds)
        assert a.accuracies() == b.accuracies()
        assert [r.equivalent_round for r in a.records] == [
            r.equivalent_round for r in b.records
        ]

    def test_equivalent_rounds_scale_by_superclient_epochs(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 10)
        config = make_config(rounds=4, epochs_superclient=2)
        history = fedseq_run(config, singletons, ds, part, theta0, SPEC, ds)
        for record in history.records:
            assert record.equivalent_round == record.round / 2


class TestFedSeqInterRun:
    def test_single_superclient_equals_fedseq(self, toy):
        ds, part, _ = toy
        theta0 = init_params(SPEC, 11)
        one = [Superclient(0, (0, 1, 2, 3, 4), 120)]
        config = make_config(rounds=5)
        inter = fedseqinter_run(config, one, ds, part, theta0, SPEC, ds)
        seq = fedseq_run(config, one, ds, part, theta0, SPEC, ds)
        assert inter.accuracies() == seq.accuracies()

    def test_reset_makes_slots_identical(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 12)
        state = InterState.fresh(theta0, 5)
        config = make_config(rounds=1, fraction=1.0)
        fedseqinter_run(config, singletons, ds, part, theta0, SPEC, ds, state=state)
        # round t=0 aggregates, so the pool was just reset
        for slot in state.slots[1:]:
            assert np.array_equal(slot.values, state.slots[0].values)
        assert np.all(state.weights == 0.0)

    def test_slot_weight_bookkeeping_against_hand_trace(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 13)
        config = make_config(rounds=3, fraction=0.6, seed=14)
        state = InterState.fresh(theta0, 3)
        fedseqinter_run(config, singletons, ds, part, theta0, SPEC, ds, state=state)

        # replay: t=0 aggregates and resets; t=1 and t=2 accumulate
        expected = np.zeros(3)
        for t in (1, 2):
            sampled = sample_participants(5, 0.6, 14, t)
            for slot, idx in enumerate(int(i) for i in sampled):
                expected[slot] += singletons[idx].num_samples
        assert np.array_equal(state.weights, expected)

    def test_accuracy_measured_without_resetting_slots(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 15)
        config = make_config(rounds=2, fraction=0.6, seed=16)
        state = InterState.fresh(theta0, 3)
        history = fedseqinter_run(config, singletons, ds, part, theta0, SPEC, ds, state=state)
        assert [r.aggregated for r in history.records] == [True, False]
        assert np.any(state.weights > 0.0)  # round 2 did not reset

    def test_aggregation_cadence_is_superclient_count(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 17)
        config = make_config(rounds=11, fraction=0.6, seed=18)
        history = fedseqinter_run(config, singletons, ds, part, theta0, SPEC, ds)
        flags = [r.aggregated for r in history.records]
        assert [i for i, f in enumerate(flags) if f] == [0, 5, 10]

    def test_deterministic(self, toy):
        ds, part, singletons = toy
        theta0 = init_params(SPEC, 19)
        config = make_config(rounds=4, fraction=0.6, seed=20)
        a = fedseqinter_run(config, singletons, ds, part, theta0, SPEC, ds)
        b = fedseqinter_run(config, singletons, ds, part, theta0, SPEC, ds)
        assert a.accuracies() == b.accuracies()


class TestInterState:
    def test_weighted_average(self, toy):
        theta0 = init_params(SPEC, 21)
        state = InterState.fresh(theta0, 2)
        state.slots[0] = theta0.copy()
        state.slots[1] = theta0.zeros_like()
        state.weights[:] = [1.0, 3.0]
        avg = state.weighted_average()
        assert np.allclose(avg.values, 0.25 * theta0.values)

    def test_reset_semantics(self):
        theta0 = init_params(SPEC, 22)
        state = InterState.fresh(theta0, 3)
        state.weights[:] = [1.0, 2.0, 3.0]
        fresh = init_params(SPEC, 23)
        state.reset(fresh)
        assert all(np.array_equal(s.values, fresh.values) for s in state.slots)
        assert np.all(state.weights == 0.0)

    def test_mismatched_lengths_rejected(self):
        theta0 = init_params(SPEC, 24)
        with pytest.raises(ValueError):
            InterState([theta0], np.zeros(2))
