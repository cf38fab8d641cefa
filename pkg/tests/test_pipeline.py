"""A small end-to-end run, its report, and stage failure handling."""

import json

import numpy as np
import pytest

from hsemis.config import RunConfig
from hsemis.errors import StageError, StratificationError
from hsemis.pipeline import carve_validation, dumps_report, node_seed, run_pipeline, stage_seeds

SMALL = {"data.counts": (20, 12, 14, 10, 6), "mirec.steps": 10, "node.steps": 10, "baseline.steps": 10,
         "node.eval_every": 5, "sirl.k": 5}


@pytest.fixture(scope="module")
def small_run():
    timings = {}
    result = run_pipeline(RunConfig(SMALL), timings)
    return result, timings


class TestHelpers:
    def test_stage_seeds(self):
        a, b = stage_seeds(42), stage_seeds(42)
        assert a == b
        assert len(set(a.values())) == len(a)
        assert stage_seeds(43) != a

    def test_node_seed_depends_on_id(self):
        assert node_seed(1, "2L") != node_seed(1, "2R")
        assert node_seed(1, "3") == node_seed(1, "3")

    def test_carve_validation(self):
        grades = np.repeat(np.arange(3), [10, 5, 1])
        labeled = np.arange(16)
        train, val = carve_validation(grades, labeled, 0.2, 0)
        assert sorted(np.concatenate([train, val])) == list(labeled)
        np.testing.assert_array_equal(np.bincount(grades[val], minlength=3), [2, 1, 0])
        assert 15 in train


class TestRun:
    def test_report_keys(self, small_run):
        report = small_run[0].report
        for key in ("node_accuracies", "agg_accuracy", "flat_metrics", "discarded_proxy_count", "seeds"):
            assert key in report
        assert set(report["node_accuracies"]) == {"root", "2L", "2R", "3"}
        assert set(report["flat_metrics"]) == {"acc", "pre", "rec", "f1"}
        assert report["seeds"]["run"] == 42

    def test_timings_cover_stages(self, small_run):
        assert set(small_run[1]) == {"data", "baseline", "mirec", "sirl", "nodes", "eval"}

    def test_aggregate_is_within_node_range(self, small_run):
        report = small_run[0].report
        acc = list(report["node_accuracies"].values())
        assert min(acc) - 1e-12 <= report["agg_accuracy"] <= max(acc) + 1e-12

    def test_proxy_accounting(self, small_run):
        report = small_run[0].report
        assert report["proxy_count"] + report["discarded_proxy_count"] == report["sizes"]["unlabeled"]

    def test_deterministic(self, small_run):
        again = run_pipeline(RunConfig(SMALL))
        assert dumps_report(again.report) == small_run[0].report_json()

    def test_json_is_valid(self, small_run):
        parsed = json.loads(small_run[0].report_json())
        assert parsed["config"]["sirl.tau"] == 0.8

    def test_unreachable_tau_keeps_originals_only(self):
        result = run_pipeline(RunConfig({**SMALL, "sirl.tau": 1e6}))
        report = result.report
        assert report["proxy_count"] == 0
        assert report["discarded_proxy_count"] == report["sizes"]["unlabeled"]
        assert 0.0 <= report["flat_metrics"]["acc"] <= 1.0

    def test_stage_error_names_stage(self):
        with pytest.raises(StageError) as info:
            run_pipeline(RunConfig({**SMALL, "split.label_fraction": 0.01}))
        assert info.value.stage == "data"
        assert isinstance(info.value.cause, StratificationError)
