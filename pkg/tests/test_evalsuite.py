"""Metric identities, the brute-force PR oracle, sweep bookkeeping, the
centroid baseline, and the latency harness."""

from __future__ import annotations

import numpy as np
import pytest

from camp.camphead import build_model
from camp.evalsuite import (
    MetricError,
    PrecisionRecallSummary,
    auprc,
    benchmark_latency,
    centroid_scores,
    delta_auprc,
    evaluate_sweep,
    positive_fraction,
    write_latency_csv,
    write_sweep_csv,
)
from camp.moldata import make_synthetic_tasks, sample_support
from conftest import TINY, tiny_config


def brute_force_auprc(scores, labels) -> float:
    """Oracle: walk the full precision-recall curve over every threshold (in
    ranked order with stable ties) and accumulate precision * delta-recall."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    order = np.argsort(-scores, kind="stable")
    n_pos = labels.sum()
    tp = 0
    area = 0.0
    prev_recall = 0.0
    for rank, idx in enumerate(order, start=1):
        tp += labels[idx]
        recall = tp / n_pos
        precision = tp / rank
        area += precision * (recall - prev_recall)
        prev_recall = recall
    return float(area)


class TestAuprc:
    def test_perfect_ranking(self):
        assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_worked_example_five_sixths(self):
        value = auprc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0])
        assert value == pytest.approx(5 / 6, abs=1e-15)
        assert value == pytest.approx(
            brute_force_auprc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]), abs=1e-12
        )

    def test_all_positive_is_one(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            scores = rng.normal(size=6)
            assert auprc(scores, np.ones(6, dtype=int)) == 1.0

    def test_matches_brute_force_on_random_inputs(self):
        rng = np.random.default_rng(1)
        for trial in range(50):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[int(rng.integers(n))] = 1
            scores = rng.normal(size=n)
            if trial % 3 == 0:  # exercise tie handling
                scores = np.round(scores, 1)
            assert auprc(scores, labels) == pytest.approx(
                brute_force_auprc(scores, labels), abs=1e-12
            )

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=20)
        labels = rng.integers(0, 2, size=20)
        labels[0] = 1
        base = auprc(scores, labels)
        assert auprc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)
        assert auprc(np.tanh(scores), labels) == pytest.approx(base, abs=1e-12)

    def test_no_positives_rejected(self):
        with pytest.raises(MetricError):
            auprc([0.5, 0.4], [0, 0])

    def test_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            labels = rng.integers(0, 2, size=12)
            labels[0] = 1
            value = auprc(rng.normal(size=12), labels)
            assert 0.0 <= value <= 1.0


class TestDeltaAuprc:
    def test_perfect_classifier_half_positives(self):
        scores = [0.9, 0.8, 0.1, 0.2]
        labels = [1, 1, 0, 0]
        assert delta_auprc(scores, labels) == pytest.approx(0.5, abs=1e-15)

    def test_perfect_classifier_ten_percent_positives(self):
        labels = [1] + [0] * 9
        scores = [0.99] + list(np.linspace(0.5, 0.1, 9))
        assert delta_auprc(scores, labels) == pytest.approx(0.9, abs=1e-15)

    def test_true_label_scorer_hits_upper_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            labels = rng.integers(0, 2, size=15)
            labels[0] = 1
            assert delta_auprc(labels.astype(float), labels) == pytest.approx(
                1.0 - positive_fraction(labels), abs=1e-15
            )

    def test_random_scores_center_near_zero(self):
        rng = np.random.default_rng(5)
        values = []
        for _ in range(200):
            labels = rng.integers(0, 2, size=200)
            if labels.sum() == 0:
                labels[0] = 1
            values.append(delta_auprc(rng.normal(size=200), labels))
        assert abs(float(np.mean(values))) < 0.05

    def test_range_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            labels = rng.integers(0, 2, size=10)
            labels[0] = 1
            frac = positive_fraction(labels)
            d = delta_auprc(rng.normal(size=10), labels)
            assert -frac - 1e-12 <= d <= 1 - frac + 1e-12


class TestSweep:
    @pytest.fixture
    def setup(self):
        tasks = make_synthetic_tasks(
            2, 14, TINY["atom_feature_dim"], np.random.default_rng(7), split="test"
        )
        model = build_model(tiny_config(), seed=0)
        return model, tasks

    def test_bookkeeping(self, setup):
        model, tasks = setup
        report = evaluate_sweep(model, tasks, support_sizes=[4], n_seeds=3)
        assert len(report.rows) == 2 * 3  # tasks x seeds
        assert len(report.aggregates) == 1
        agg = report.aggregate_for(4)
        assert agg.n_seeds == 3

    def test_aggregate_matches_independent_recomputation(self, setup):
        model, tasks = setup
        report = evaluate_sweep(model, tasks, support_sizes=[4, 6], n_seeds=2)
        for agg in report.aggregates:
            per_seed = []
            for seed in range(2):
                deltas = [
                    r.summary.delta_auprc
                    for r in report.rows
                    if r.support_size == agg.support_size and r.seed == seed
                ]
                per_seed.append(np.mean(deltas))
            assert agg.mean_delta_auprc == pytest.approx(
                float(np.mean(per_seed)), abs=1e-12
            )
            expected_se = float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed)))
            assert agg.stderr_delta_auprc == pytest.approx(expected_se, abs=1e-12)

    def test_deterministic(self, setup):
        model, tasks = setup
        a = evaluate_sweep(model, tasks, [4], 2, base_seed=3)
        b = evaluate_sweep(model, tasks, [4], 2, base_seed=3)
        assert [r.summary.auprc for r in a.rows] == [r.summary.auprc for r in b.rows]

    def test_infeasible_size_skipped_with_warning(self, setup):
        model, tasks = setup
        report = evaluate_sweep(model, tasks, support_sizes=[100], n_seeds=1)
        assert not report.rows
        assert report.skipped

    def test_csv_export(self, setup, tmp_path):
        model, tasks = setup
        report = evaluate_sweep(model, tasks, [4], 2)
        path = tmp_path / "sweep.csv"
        write_sweep_csv(report, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("record,task_id")
        assert sum(1 for l in lines if l.startswith("task,")) == len(report.rows)


class TestCentroidBaseline:
    def test_query_at_positive_centroid(self, tiny_tasks):
        support, remainder = sample_support(
            tiny_tasks.tasks[0], 8, np.random.default_rng(0)
        )
        positives = [q for q in remainder if q.label == 1]
        scores = centroid_scores(support, positives)
        assert scores.mean() > 0.5

    def test_symmetric_supports_give_half(self):
        from camp.moldata import AtomGraph, LabeledMolecule, mirror_edges

        def mol(value, label):
            atoms = np.full((2, 3), value, dtype=float)
            atoms[1] = -value
            return LabeledMolecule(AtomGraph(atoms, mirror_edges([(0, 1, 0)])), label)

        # Mirror-image class centroids; a query at the origin is equidistant.
        support = [mol(1.0, 1), mol(-1.0, 0)]
        query = mol(0.0, 1)
        assert centroid_scores(support, [query])[0] == pytest.approx(0.5, abs=1e-9)

    def test_single_class_support_rejected(self, tiny_tasks):
        support = [m for m in tiny_tasks.tasks[0].molecules if m.label == 1][:4]
        with pytest.raises(MetricError):
            centroid_scores(support, support[:1])

    def test_high_auprc_on_motif_tasks(self):
        tasks = make_synthetic_tasks(5, 30, 8, np.random.default_rng(8))
        aps = []
        for task in tasks.tasks:
            support, remainder = sample_support(task, 10, np.random.default_rng(9))
            scores = centroid_scores(support, remainder)
            labels = [m.label for m in remainder]
            aps.append(auprc(scores, labels))
        assert float(np.mean(aps)) > 0.9


class TestLatency:
    def test_bookkeeping_and_csv(self, tmp_path):
        tasks = make_synthetic_tasks(
            1, 8, TINY["atom_feature_dim"], np.random.default_rng(10), split="test"
        )
        model = build_model(tiny_config(), seed=0)
        report = benchmark_latency(model, tasks, support_sizes=[2, 4], repeats=3)
        assert len(report.rows) == 6
        by_size = {s: [r for r in report.rows if r.support_size == s] for s in (2, 4)}
        assert all(len(v) == 3 for v in by_size.values())
        assert report.total_seconds() == pytest.approx(
            sum(r.seconds for r in report.rows), abs=1e-9
        )
        path = tmp_path / "latency.csv"
        write_latency_csv(report, path)
        assert len(path.read_text().splitlines()) == 7

    def test_episode_counts_match_query_sets(self):
        tasks = make_synthetic_tasks(
            2, 9, TINY["atom_feature_dim"], np.random.default_rng(11), split="test"
        )
        model = build_model(tiny_config(), seed=0)
        report = benchmark_latency(model, tasks, support_sizes=[3], repeats=1)
        assert report.rows[0].n_episodes == 2 * (9 - 3)


class TestSummary:
    def test_summary_identity(self):
        rng = np.random.default_rng(12)
        labels = rng.integers(0, 2, size=30)
        labels[0] = 1
        scores = rng.normal(size=30)
        s = PrecisionRecallSummary.from_scores(scores, labels)
        assert s.delta_auprc == pytest.approx(s.auprc - s.positive_fraction, abs=1e-15)
        assert s.n_query == 30
