import math

import numpy as np
import pytest

from fedseq.approximator import CONFIDENCE, EMBEDDING, DistributionEstimate, oracle_estimate
from fedseq.data import ClientPartition, dirichlet_partition, synth_dataset
from fedseq.grouping import (
    GroupingConfig,
    Superclient,
    balance_ratio,
    build_superclients,
    covered_classes,
    grouping_report,
    kmeans,
    phi_greedy,
    phi_kmeans,
    phi_random,
    tau,
)


def one_hot(i, n):
    v = np.zeros(n)
    v[i] = 1.0
    return v


class TestTau:
    def test_identical_distributions_are_at_distance_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert tau(p, p, "kl") == pytest.approx(0.0, abs=1e-12)
        assert tau(p, p, "wasserstein") == 0.0
        assert tau(p, p, "euclidean") == 0.0
        assert tau(p, p, "cosine") == pytest.approx(0.0, abs=1e-12)

    def test_gini_of_uniform_mixture(self):
        p = np.array([0.5, 0.5, 0.0, 0.0])
        q = np.array([0.0, 0.0, 0.5, 0.5])
        assert tau(p, q, "gini") == pytest.approx(1.0 - 1.0 / 4)

    def test_disjoint_one_hots_hand_computed(self):
        a, b = one_hot(0, 2), one_hot(1, 2)
        assert tau(a, b, "wasserstein") == pytest.approx(1.0)
        assert tau(a, b, "euclidean") == pytest.approx(math.sqrt(2))
        assert tau(a, b, "cosine") == pytest.approx(1.0)

    def test_cosine_rejects_zero_norm(self):
        with pytest.raises(ValueError):
            tau(np.zeros(3), np.ones(3), "cosine", kind=EMBEDDING)

    def test_kl_and_gini_need_confidence_kind(self):
        a, b = np.array([1.0, 2.0]), np.array([2.0, 1.0])
        with pytest.raises(ValueError):
            tau(a, b, "kl", kind=EMBEDDING)
        with pytest.raises(ValueError):
            tau(a, b, "gini", kind=EMBEDDING)

    def test_wasserstein_on_embeddings_sorts_components(self):
        a = np.array([3.0, 1.0, 2.0])
        b = np.array([2.0, 3.0, 1.0])
        assert tau(a, b, "wasserstein", kind=EMBEDDING) == 0.0
        c = np.array([2.0, 4.0, 1.0])
        assert tau(a, c, "wasserstein", kind=EMBEDDING) == pytest.approx(1.0 / 3)

    def test_metric_axioms_on_random_simplex_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a = rng.dirichlet(np.ones(5))
            b = rng.dirichlet(np.ones(5))
            for metric in ("cosine", "euclidean", "wasserstein", "gini"):
                assert tau(a, b, metric) == pytest.approx(tau(b, a, metric), abs=1e-12)
            assert tau(a, b, "kl") >= 0.0
            assert tau(a, a, "kl") == pytest.approx(0.0, abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            tau(np.ones(3) / 3, np.ones(4) / 4, "euclidean")


class TestPhiRandom:
    def test_equal_clients_pack_in_threes(self):
        counts = np.full(10, 100)
        config = GroupingConfig(min_samples=300, max_clients=11, method="random", seed=0)
        groups = phi_random(counts, config)
        assert [len(g.members) for g in groups[:-1]] == [3, 3, 3]
        assert len(groups[-1].members) == 1

    def test_max_clients_one_gives_singletons(self):
        counts = np.full(7, 50)
        config = GroupingConfig(min_samples=1000, max_clients=1, method="random", seed=1)
        groups = phi_random(counts, config)
        assert len(groups) == 7
        assert all(len(g.members) == 1 for g in groups)

    def test_partition_property(self):
        counts = np.random.default_rng(2).integers(10, 200, size=23)
        config = GroupingConfig(min_samples=400, max_clients=4, method="random", seed=2)
        groups = phi_random(counts, config)
        members = [m for g in groups for m in g.members]
        assert sorted(members) == list(range(23))
        for g in groups:
            assert g.num_samples == counts[list(g.members)].sum()


class TestKmeans:
    def test_k_equals_n_assigns_singletons(self):
        points = np.random.default_rng(0).normal(size=(6, 3))
        labels = kmeans(points, 6, seed=0)
        assert len(set(labels.tolist())) == 6

    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(40, 2)) + [10, 0]
        b = rng.normal(size=(40, 2)) - [10, 0]
        points = np.vstack([a, b])
        labels = kmeans(points, 2, seed=1)
        first, second = labels[:40], labels[40:]
        assert len(set(first.tolist())) == 1
        assert len(set(second.tolist())) == 1
        assert first[0] != second[0]

    def test_sse_non_increasing(self):
        points = np.random.default_rng(2).normal(size=(60, 4))
        trace: list[float] = []
        kmeans(points, 5, seed=2, sse_trace=trace)
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_deterministic(self):
        points = np.random.default_rng(3).normal(size=(30, 3))
        assert np.array_equal(kmeans(points, 4, seed=7), kmeans(points, 4, seed=7))

    def test_k_above_n_rejected(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4, seed=0)


@pytest.fixture(scope="module")
def alpha0_instance():
    ds = synth_dataset(num_classes=4, n_per_class=200, dim=6, separation=4.0, seed=0)
    part = dirichlet_partition(ds, num_clients=40, alpha=0.0, seed=0)
    estimates = oracle_estimate(part, ds)
    return ds, part, estimates


class TestPhiKmeans:
    def test_one_hot_estimates_cover_every_class(self, alpha0_instance):
        ds, part, estimates = alpha0_instance
        counts = part.sizes()
        config = GroupingConfig(min_samples=4 * counts[0], max_clients=5,
                                method="kmeans", seed=3)
        groups = phi_kmeans(estimates, counts, config, num_classes=4)
        for g in groups:
            assert covered_classes(g, part, ds) == 1.0

    def test_identical_estimates_degenerate_to_one_cluster(self):
        vectors = np.tile(np.array([0.25, 0.25, 0.25, 0.25]), (12, 1))
        estimates = DistributionEstimate(vectors, CONFIDENCE)
        counts = np.full(12, 10)
        config = GroupingConfig(min_samples=30, max_clients=11, method="kmeans", seed=4)
        groups = phi_kmeans(estimates, counts, config, num_classes=4)
        members = sorted(m for g in groups for m in g.members)
        assert members == list(range(12))

    def test_partition_property(self, alpha0_instance):
        ds, part, estimates = alpha0_instance
        config = GroupingConfig(min_samples=120, max_clients=6, method="kmeans", seed=5)
        groups = phi_kmeans(estimates, part.sizes(), config, num_classes=4)
        members = sorted(m for g in groups for m in g.members)
        assert members == list(range(40))


class TestPhiGreedy:
    def test_two_opposite_clients_share_a_superclient(self):
        vectors = np.stack([one_hot(0, 2), one_hot(1, 2)])
        estimates = DistributionEstimate(vectors, CONFIDENCE)
        config = GroupingConfig(min_samples=100, max_clients=2, method="greedy",
                                metric="kl", seed=6)
        groups = phi_greedy(estimates, np.array([10, 10]), config)
        assert len(groups) == 1
        assert sorted(groups[0].members) == [0, 1]

    def test_matches_hand_simulated_trace(self):
        # 4 clients, cosine metric; replay the documented algorithm by hand
        vectors = np.stack([one_hot(0, 3), one_hot(0, 3), one_hot(1, 3), one_hot(2, 3)])
        estimates = DistributionEstimate(vectors, CONFIDENCE)
        counts = np.array([5, 5, 5, 5])
        config = GroupingConfig(min_samples=15, max_clients=3, method="greedy",
                                metric="cosine", seed=7)
        groups = phi_greedy(estimates, counts, config)

        from fedseq.seeding import stream, PHASE_GROUP

        rng = stream(7, PHASE_GROUP, 2)
        remaining = [0, 1, 2, 3]
        first = remaining.pop(int(rng.integers(4)))
        running = vectors[first].copy()
        members = [first]
        while (
            sum(counts[m] for m in members) < 15 and len(members) < 3 and remaining
        ):
            best_j, best_v = remaining[0], -np.inf
            for j in remaining:
                v = tau(vectors[j], running, "cosine")
                if v > best_v:
                    best_j, best_v = j, v
            running = 0.5 * running + 0.5 * vectors[best_j]
            members.append(best_j)
            remaining.remove(best_j)
        assert list(groups[0].members) == members

    def test_greedy_beats_random_on_balance(self, alpha0_instance):
        ds, part, estimates = alpha0_instance
        counts = part.sizes()
        wins = 0
        for seed in range(10):
            greedy_cfg = GroupingConfig(min_samples=4 * counts[0], max_clients=5,
                                        method="greedy", metric="cosine", seed=seed)
            random_cfg = GroupingConfig(min_samples=4 * counts[0], max_clients=5,
                                        method="random", seed=seed)
            greedy_groups = phi_greedy(estimates, counts, greedy_cfg)
            random_groups = phi_random(counts, random_cfg)
            g = np.mean([balance_ratio(x, part, ds) for x in greedy_groups])
            r = np.mean([balance_ratio(x, part, ds) for x in random_groups])
            wins += g > r
        assert wins >= 8

    def test_methods_order_greedy_kmeans_random(self, alpha0_instance):
        ds, part, estimates = alpha0_instance
        counts = part.sizes()
        wins = 0
        for seed in range(10):
            scores = {}
            for method, metric in (("greedy", "kl"), ("kmeans", "euclidean"),
                                   ("random", "kl")):
                cfg = GroupingConfig(min_samples=4 * counts[0], max_clients=5,
                                     method=method, metric=metric, seed=seed)
                groups = build_superclients(estimates, counts, cfg, num_classes=4)
                scores[method] = np.mean([balance_ratio(x, part, ds) for x in groups])
            wins += scores["greedy"] >= scores["kmeans"] >= scores["random"]
        assert wins >= 8


class TestQualityMeasures:
    def make_partition(self, class_sizes):
        # one client per class with the requested sample count
        total = sum(class_sizes)
        inputs = np.zeros((total, 2))
        labels = np.concatenate(
            [np.full(n, c, dtype=np.int64) for c, n in enumerate(class_sizes)]
        )
        from fedseq.data import LabeledDataset

        ds = LabeledDataset(inputs, labels, len(class_sizes))
        bounds = np.cumsum([0] + list(class_sizes))
        part = ClientPartition(
            tuple(np.arange(bounds[i], bounds[i + 1]) for i in range(len(class_sizes)))
        )
        return ds, part

    def test_uniform_pool_scores_one(self):
        ds, part = self.make_partition([10, 10, 10])
        sc = Superclient(0, (0, 1, 2), 30)
        assert balance_ratio(sc, part, ds) == 1.0
        assert covered_classes(sc, part, ds) == 1.0

    def test_missing_class_zeroes_balance(self):
        ds, part = self.make_partition([10, 10, 10])
        sc = Superclient(0, (0, 1), 20)
        assert balance_ratio(sc, part, ds) == 0.0
        assert covered_classes(sc, part, ds) == pytest.approx(2 / 3)

    def test_balance_arithmetic(self):
        ds, part = self.make_partition([10, 20, 40])
        sc = Superclient(0, (0, 1, 2), 70)
        assert balance_ratio(sc, part, ds) == pytest.approx(0.25)

    def test_single_class_coverage(self):
        ds, part = self.make_partition([10] * 10)
        sc = Superclient(0, (3,), 10)
        assert covered_classes(sc, part, ds) == pytest.approx(0.1)


class TestClosingCriterion:
    @pytest.mark.parametrize("method,metric", [("random", "kl"), ("kmeans", "euclidean"),
                                               ("greedy", "cosine")])
    def test_all_but_last_superclient_closed_properly(self, alpha0_instance, method, metric):
        ds, part, estimates = alpha0_instance
        counts = part.sizes()
        cfg = GroupingConfig(min_samples=130, max_clients=3, method=method,
                             metric=metric, seed=11)
        groups = build_superclients(estimates, counts, cfg, num_classes=4)
        for g in groups[:-1]:
            assert g.num_samples >= 130 or len(g.members) == 3


class TestReport:
    def test_report_csv_contents(self, alpha0_instance, tmp_path):
        ds, part, estimates = alpha0_instance
        counts = part.sizes()
        cfg = GroupingConfig(min_samples=4 * counts[0], max_clients=5,
                             method="greedy", metric="kl", seed=12)
        groups = phi_greedy(estimates, counts, cfg)
        out = tmp_path / "grouping.csv"
        grouping_report(groups, part, ds, cfg, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("superclient_id,members,num_samples")
        assert len(lines) == len(groups) + 2  # header + rows + summary
        assert lines[-1].startswith("mean,")
        mean_balance = float(lines[-1].split(",")[3])
        assert mean_balance == pytest.approx(
            np.mean([balance_ratio(g, part, ds) for g in groups])
        )
