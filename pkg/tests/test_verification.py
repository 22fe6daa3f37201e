import pytest

from app.services.verification import SUITES, gradcheck_suite, invariants_suite, oracle_suite, run_suites


def failures(results):
    return [(r.name, r.detail) for r in results if not r.passed]


def test_invariants_suite_passes():
    results = invariants_suite(0)
    assert len(results) == 6
    assert failures(results) == []


@pytest.mark.slow
def test_oracle_suite_passes():
    assert failures(oracle_suite(0)) == []


@pytest.mark.slow
def test_gradcheck_suite_passes_and_catches_corrupted_vjp():
    results = gradcheck_suite(0)
    assert failures(results) == []
    control = next(r for r in results if r.name == "negative-control")
    assert "应当失败" in control.detail


def test_run_suites_tags_results_with_suite_name():
    results = run_suites(["invariants"], seed=1)
    assert {r.suite for r in results} == {"invariants"}
    assert all(type(r.passed) is bool for r in results)
    assert set(SUITES) == {"gradcheck", "oracle", "invariants"}
