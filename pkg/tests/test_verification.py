"""Tests for the finite-difference verification suite."""
import pytest

from core.verification import LAYER_CHECKS, SuiteSettings, raise_on_failure, run_suite, summary_table
from utilities.exceptions import GradCheckError


class TestLayerChecks:

    @pytest.mark.parametrize("component", sorted(LAYER_CHECKS))
    def test_component_within_tolerance(self, component):
        (row,) = run_suite(SuiteSettings(), components=[component])
        assert row.component == component
        assert row.passed, f"{component}: {row.max_error:.3e}"
        assert row.checked > 0

    def test_max_entries_limits_work(self):
        (full,) = run_suite(SuiteSettings(), components=["conv2d"])
        (sampled,) = run_suite(SuiteSettings(max_entries=4), components=["conv2d"])
        # x, kernel, bias: 100, 54 and 3 entries
        assert full.checked == 100 + 54 + 3
        assert sampled.checked == 4 + 4 + 3
        assert sampled.passed

    def test_moe_counts_skipped_entries(self):
        (row,) = run_suite(SuiteSettings(), components=["moe"])
        assert row.skipped >= 0
        assert row.checked + row.skipped == 3 * 6 + 4 * (6 * 6 + 6) + 6 * 6 + 6 + 6 * 4 + 4

    def test_unknown_component(self):
        with pytest.raises(ValueError):
            run_suite(SuiteSettings(), components=["conv3d"])


class TestModelCheck:

    def test_model_within_tolerance(self):
        (row,) = run_suite(SuiteSettings(max_entries=3), components=["model"])
        assert row.component == "model"
        assert row.tolerance == 1e-3
        assert row.passed, f"model: {row.max_error:.3e}"


class TestCorruptedRule:

    def test_corrupted_conv2d_is_caught(self):
        rows = run_suite(SuiteSettings(corrupt_op="conv2d"), components=["add", "conv2d"])
        assert [row.passed for row in rows] == [True, False]
        with pytest.raises(GradCheckError, match="conv2d") as excinfo:
            raise_on_failure(rows)
        assert excinfo.value.failed == ["conv2d"]
        assert excinfo.value.exit_code == 6

    def test_corruption_does_not_leak(self):
        run_suite(SuiteSettings(corrupt_op="conv2d"), components=["conv2d"])
        (row,) = run_suite(SuiteSettings(), components=["conv2d"])
        assert row.passed

    def test_clean_rows_do_not_raise(self):
        raise_on_failure(run_suite(SuiteSettings(), components=["add", "softmax"]))


class TestSummaryTable:

    def test_tuples(self):
        rows = run_suite(SuiteSettings(), components=["relu", "flatten"])
        table = summary_table(rows)
        assert [entry[0] for entry in table] == ["relu", "flatten"]
        for component, error, tolerance, checked, skipped, passed in table:
            assert tolerance == 1e-4
            assert checked == {"relu": 24, "flatten": 36}[component]
            assert skipped == 0
            assert passed
