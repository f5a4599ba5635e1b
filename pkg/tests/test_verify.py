import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import best_partition_inertia, isolated, pair_auc
from pagmil_lab.verify import (ALL_CHECKS, GRADIENT_CHECKS, check_gradients, exhaustive_two_means, format_checks,
                               isolated_by_scan, pair_count_auc, run_checks)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1)), min_size=2, max_size=30))
def test_pair_count_auc_matches_independent_oracle(pairs):
    s, y = zip(*pairs)
    if len(set(y)) < 2:
        return
    assert pair_count_auc(s, y) == pytest.approx(pair_auc(s, y), abs=1e-15)


@given(st.integers(0, 10_000), st.integers(2, 7))
def test_exhaustive_two_means_matches_product_oracle(seed, n):
    X = np.random.default_rng(seed).normal(size=(n, 2))
    assert exhaustive_two_means(X) == pytest.approx(best_partition_inertia(X, 2), rel=1e-12)


@given(st.sets(st.integers(0, 99), max_size=30))
def test_isolation_scan_matches_oracle(cands):
    coords = np.array([(r, c) for r in range(10) for c in range(10)])
    assert isolated_by_scan(sorted(cands), coords) == isolated(sorted(cands), coords)


def test_full_suite_passes_quickly():
    results = run_checks(n_points=100)
    assert [r.name for r in results] == list(ALL_CHECKS)
    assert all(r.passed for r in results), format_checks(results)
    assert sum(r.seconds for r in results if r.name in GRADIENT_CHECKS) < 30


@pytest.mark.parametrize("name", ALL_CHECKS)
def test_each_check_catches_a_perturbation(name):
    r = run_checks(n_points=5, perturb={name})
    bad = [x for x in r if x.name == name][0]
    assert not bad.passed
    assert all(x.passed for x in r if x.name != name)


def test_unknown_check_name():
    with pytest.raises(KeyError):
        run_checks(perturb={"nope"})
    with pytest.raises(KeyError):
        check_gradients("nope")


def test_table_reports_max_error_per_check():
    results = run_checks(n_points=3)
    text = format_checks(results)
    assert "max_error" in text.splitlines()[0]
    assert text.rstrip().endswith(f"{len(ALL_CHECKS)}/{len(ALL_CHECKS)} checks passed")
