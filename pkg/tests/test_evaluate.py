"""Tests for top-K metrics and the evaluation protocols."""

import json
import logging
import math

import numpy as np
import pandas as pd
import pytest

from edge_rec.errors import NoEvaluableUsersError
from edge_rec.evaluate import (
    EvalConfig,
    EvalReport,
    TopKMetrics,
    UserResult,
    bootstrap_lift,
    compare_tiled,
    evaluate_model,
    evaluate_region,
    score_block,
    topk_metrics,
)
from edge_rec.ingest import build_matrix, featurize, time_split
from edge_rec.sample import DiffusionSampler
from edge_rec.sample_data import make_rank_one_dataset
from edge_rec.xform import RatingScaler
from tests.helpers import short_schedule, small_model


def _oracle_metrics(ranked, relevant, k):
    top = ranked[:k]
    hits = [item in relevant for item in top]
    dcg = sum(1.0 / math.log2(i + 2) for i, h in enumerate(hits) if h)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    first = next((i for i, h in enumerate(hits) if h), None)
    return (
        sum(hits) / k,
        sum(hits) / len(relevant),
        dcg / idcg,
        0.0 if first is None else 1.0 / (first + 1),
        1.0 if any(hits) else 0.0,
    )


class TestTopKMetrics:
    def test_worked_example(self):
        m = topk_metrics([1, 2, 3], {1, 3}, 2)
        assert m.precision == 0.5
        assert m.recall == 0.5
        assert m.ndcg == pytest.approx(0.613147, abs=1e-6)
        assert m.mrr == 1.0
        assert m.hitrate == 1.0

    def test_all_hits(self):
        m = topk_metrics([4, 5, 6], {4, 5, 6}, 3)
        assert m == TopKMetrics(1.0, 1.0, 1.0, 1.0, 1.0)

    def test_no_hits(self):
        assert topk_metrics([1, 2], {3}, 2) == TopKMetrics(0.0, 0.0, 0.0, 0.0, 0.0)

    def test_k_beyond_ranking(self):
        m = topk_metrics([1, 2], {2}, 5)
        assert m.precision == pytest.approx(0.2)
        assert m.mrr == 0.5

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="nonempty"):
            topk_metrics([1, 2], set(), 1)
        with pytest.raises(ValueError, match="k must be at least 1"):
            topk_metrics([1, 2], {1}, 0)
        with pytest.raises(ValueError, match="duplicate-free"):
            topk_metrics([1, 1], {1}, 1)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            size = int(rng.integers(1, 30))
            ranked = rng.permutation(100)[:size].tolist()
            relevant = set(rng.choice(100, size=int(rng.integers(1, 15)), replace=False).tolist())
            k = int(rng.integers(1, 40))
            got = topk_metrics(ranked, relevant, k)
            for value, expected in zip(got, _oracle_metrics(ranked, relevant, k)):
                assert value == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            ranked = rng.permutation(40).tolist()
            relevant = set(rng.choice(40, size=5, replace=False).tolist())
            previous = topk_metrics(ranked, relevant, 1)
            for k in range(2, 41):
                current = topk_metrics(ranked, relevant, k)
                assert current.recall >= previous.recall
                assert current.hitrate >= previous.hitrate
                assert current.mrr >= previous.mrr
                previous = current


class TestEvalConfig:
    def test_k_values_sorted_and_unique(self):
        assert EvalConfig(k_values=(10, 1, 10, 5)).k_values == (1, 5, 10)

    def test_invalid(self):
        with pytest.raises(ValueError, match="at least 1"):
            EvalConfig(k_values=(0, 5))
        with pytest.raises(ValueError, match="num_patches"):
            EvalConfig(num_patches=0)


class TestScoreBlock:
    def test_ranking_and_candidates(self):
        prediction = np.array([[0.9, 0.1, 0.5, 0.5]])
        train_known = np.array([[True, False, False, False]])
        test = {(7, 11): 5.0, (7, 13): 2.0}
        config = EvalConfig(k_values=(1, 2))
        results = score_block(0, prediction, train_known, np.array([7]), np.array([10, 11, 12, 13]), test, config, np.random.default_rng(0))
        assert len(results) == 1
        result = results[0]
        assert result.n_candidates == 3
        assert result.n_relevant == 1
        # candidates 11 (0.1), 12 (0.5), 13 (0.5): ties keep item order, so 12 then 13 then 11
        assert result.metrics[1].hitrate == 0.0
        assert result.metrics[2].hitrate == 0.0

    def test_users_without_relevant_items_skipped(self):
        config = EvalConfig(k_values=(1,))
        results = score_block(
            0, np.zeros((2, 2)), np.zeros((2, 2), dtype=bool), np.array([0, 1]), np.array([0, 1]),
            {(0, 1): 4.0, (1, 1): 3.5}, config, np.random.default_rng(0),
        )
        assert [r.user for r in results] == [0]

    def test_constant_prediction_ranks_by_item_index(self):
        rng = np.random.default_rng(3)
        items = np.array([9, 2, 7, 4, 5])
        test = {(0, 4): 5.0, (0, 9): 4.0}
        config = EvalConfig(k_values=(1, 3, 5))
        result = score_block(0, np.zeros((1, 5)), np.zeros((1, 5), dtype=bool), np.array([0]), items, test, config, rng)[0]
        ranked = sorted(items.tolist())
        for k in config.k_values:
            assert tuple(result.metrics[k]) == pytest.approx(_oracle_metrics(ranked, {4, 9}, k))


class _ConstantCompleter:
    def inpaint_patch(self, values, known, users, items, seed=None):
        return np.zeros_like(values)

    def tiled_sample(self, values, known, users, items, tile_n, tile_m, seed=None):
        return np.zeros_like(values)


class TestEvaluateModel:
    def setup_method(self):
        self.dataset = make_rank_one_dataset(20, 20, seed=0)
        self.train, self.test = time_split(self.dataset, 0.2)
        self.scaler = RatingScaler(1.0, 5.0)
        self.matrix = build_matrix(self.train, self.scaler)
        self.full = build_matrix(self.dataset, self.scaler)
        self.features = featurize(self.dataset)
        self.config = EvalConfig(k_values=(1, 5, 10), num_patches=3, patch_n=10, patch_m=10, seed=0, bootstrap_samples=200)

    def _oracle(self):
        full = self.full

        class Oracle:
            def inpaint_patch(self, values, known, users, items, seed=None):
                # rank-one features identify rows and columns uniquely
                rows = [int(np.flatnonzero(features.user_features[:, 0] == u)[0]) for u in users[:, 0]]
                cols = [int(np.flatnonzero(features.item_features[:, 0] == i)[0]) for i in items[:, 0]]
                return np.where(known, values, full.values[np.ix_(rows, cols)])

        features = self.features
        return Oracle()

    def test_oracle_completer_is_perfect(self):
        report = evaluate_model(self._oracle(), self.matrix, self.test, self.features, self.config)
        assert report.n_users > 0
        for k in self.config.k_values:
            assert report.means[k].ndcg == pytest.approx(1.0)
        assert report.means[1].precision == 1.0
        assert report.method == "patch"
        assert len(report.blocks) == 3

    def test_oracle_beats_random_baseline(self):
        report = evaluate_model(self._oracle(), self.matrix, self.test, self.features, self.config)
        assert report.means[5].ndcg >= report.baseline[5].ndcg
        low, high = report.lift_interval[1]
        assert low <= high

    def test_constant_completer_scores_no_better_than_oracle(self):
        constant = evaluate_model(_ConstantCompleter(), self.matrix, self.test, self.features, self.config)
        oracle = evaluate_model(self._oracle(), self.matrix, self.test, self.features, self.config)
        assert constant.n_users == oracle.n_users
        assert constant.means[10].ndcg <= oracle.means[10].ndcg

    def test_no_evaluable_users(self):
        config = EvalConfig(k_values=(1,), num_patches=2, patch_n=5, patch_m=5, relevance_threshold=6.0)
        with pytest.raises(NoEvaluableUsersError, match="No user has a relevant test item"):
            evaluate_model(_ConstantCompleter(), self.matrix, self.test, self.features, config)

    def test_deterministic_with_a_real_sampler(self):
        sampler = DiffusionSampler(small_model(self.features), short_schedule(5))
        config = EvalConfig(k_values=(1, 5), num_patches=2, patch_n=8, patch_m=8, seed=4, bootstrap_samples=50)
        a = evaluate_model(sampler, self.matrix, self.test, self.features, config)
        b = evaluate_model(sampler, self.matrix, self.test, self.features, config)
        assert a.to_dict() == b.to_dict()

    def test_report_outputs(self, tmp_path):
        report = evaluate_model(self._oracle(), self.matrix, self.test, self.features, self.config)
        csv_path = report.write(tmp_path, prefix="patch_")
        frame = pd.read_csv(csv_path)
        assert list(frame.columns) == ["k", "precision", "recall", "ndcg", "mrr", "hitrate", "n_users"]
        assert frame["k"].tolist() == [1, 5, 10]
        data = json.loads((tmp_path / "patch_report.json").read_text())
        assert data["method"] == "patch"
        assert set(data["metrics"]) == {"1", "5", "10"}
        assert data["config"]["k_values"] == [1, 5, 10]


class TestEvaluateRegion:
    def setup_method(self):
        dataset = make_rank_one_dataset(12, 12, seed=2)
        self.train, self.test = time_split(dataset, 0.25)
        self.matrix = build_matrix(self.train, RatingScaler(1.0, 5.0))
        self.features = featurize(dataset)
        self.config = EvalConfig(k_values=(1, 5), seed=1, bootstrap_samples=50)

    def test_tiled_region_with_constant_completer(self):
        report = evaluate_region(_ConstantCompleter(), self.matrix, self.test, self.features, self.config, (4, 4))
        assert report.method == "tiled"
        assert report.blocks[0]["rows"] == 12
        assert report.n_users > 0

    def test_dense_corner(self):
        report = evaluate_region(
            _ConstantCompleter(), self.matrix, self.test, self.features, self.config, (4, 4), label_density=0.7,
        )
        rows = report.blocks[0]["rows"]
        assert rows <= 12
        assert report.blocks[0]["density"] >= 0.7

    def test_real_sampler(self):
        sampler = DiffusionSampler(small_model(self.features), short_schedule(4))
        report = evaluate_region(sampler, self.matrix, self.test, self.features, self.config, (6, 6))
        assert all(0.0 <= m.ndcg <= 1.0 for m in report.means.values())


class TestCompareAndBootstrap:
    def _report(self, ndcg):
        metrics = {10: TopKMetrics(0.1, 0.2, ndcg, 0.3, 1.0)}
        result = UserResult(0, 0, 20, 2, metrics, metrics)
        return EvalReport(EvalConfig(k_values=(10,)), "patch", [result])

    def test_gap_within_tolerance(self, caplog):
        with caplog.at_level(logging.WARNING, logger="edge_rec.evaluate"):
            gap = compare_tiled(self._report(0.5), self._report(0.55))
        assert gap == pytest.approx(0.05)
        assert not caplog.records

    def test_gap_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="edge_rec.evaluate"):
            gap = compare_tiled(self._report(0.2), self._report(0.6))
        assert gap == pytest.approx(0.4)
        assert "differs from patch" in caplog.text

    def test_bootstrap_interval(self):
        metrics = {1: TopKMetrics(1.0, 1.0, 1.0, 1.0, 1.0)}
        baseline = {1: TopKMetrics(0.0, 0.0, 0.0, 0.0, 0.0)}
        results = [UserResult(0, u, 5, 1, metrics, baseline) for u in range(10)]
        assert bootstrap_lift(results, 1, 100, np.random.default_rng(0)) == (1.0, 1.0)
