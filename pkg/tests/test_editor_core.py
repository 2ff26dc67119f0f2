import numpy as np
import pytest

from domain.editor_core import (
    accumulate_keys,
    apply_update,
    array_checksum,
    edit_dropout,
    merge_statistics,
    oracle_constrained_lstsq,
    solve_edit,
    update_summary,
)
from domain.errors import (
    DimensionError,
    InputError,
    NonFiniteError,
    RangeError,
    SingularCovarianceError,
)
from domain.models import AssociativeMemory, InsertionPair, KeyStatistics


def random_instance(rng, d_in=None, d_out=None, n=None):
    d_in = d_in or int(rng.integers(4, 17))
    d_out = d_out or int(rng.integers(3, 9))
    n = n or int(rng.integers(d_in, 4 * d_in + 1))
    mem = AssociativeMemory(rng.standard_normal((d_out, d_in)))
    keys = rng.standard_normal((n, d_in))
    pair = InsertionPair(rng.standard_normal(d_in), rng.standard_normal(d_out))
    stats = accumulate_keys(KeyStatistics.empty(d_in, ridge=0.0), keys)
    return mem, keys, pair, stats


def objective(w, w0, keys):
    return float(np.sum(((w - w0) @ keys.T) ** 2))


def test_accumulate_keys_is_sum_of_outer_products():
    rng = np.random.default_rng(0)
    keys = rng.standard_normal((7, 5))
    stats = accumulate_keys(KeyStatistics.empty(5), keys[:3])
    stats = accumulate_keys(stats, keys[3:])
    assert stats.count == 7
    np.testing.assert_allclose(stats.c, keys.T @ keys, atol=1e-12)
    np.testing.assert_array_equal(stats.c, stats.c.T)


def test_accumulate_empty_is_noop_and_input_checked():
    stats = KeyStatistics.empty(3)
    assert accumulate_keys(stats, []) is stats
    with pytest.raises(DimensionError):
        accumulate_keys(stats, np.ones((2, 4)))
    with pytest.raises(NonFiniteError):
        accumulate_keys(stats, [[1.0, np.nan, 0.0]])


def test_merge_statistics_matches_single_pass():
    rng = np.random.default_rng(1)
    keys = rng.standard_normal((20, 6))
    parts = [accumulate_keys(KeyStatistics.empty(6), chunk) for chunk in np.array_split(keys, 3)]
    merged = merge_statistics(parts)
    whole = accumulate_keys(KeyStatistics.empty(6), keys)
    assert merged.count == whole.count
    np.testing.assert_allclose(merged.c, whole.c, atol=1e-12)
    with pytest.raises(DimensionError):
        merge_statistics([KeyStatistics.empty(2), KeyStatistics.empty(3)])


def test_closed_form_matches_kkt_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        mem, keys, pair, stats = random_instance(rng)
        closed = apply_update(mem, solve_edit(mem, stats, pair)).weights
        oracle = oracle_constrained_lstsq(mem, keys.T, pair)
        assert np.max(np.abs(closed - oracle)) <= 1e-8


def test_constraint_is_satisfied_exactly():
    rng = np.random.default_rng(7)
    for _ in range(100):
        mem, _, pair, stats = random_instance(rng)
        edited = apply_update(mem, solve_edit(mem, stats, pair))
        residual = np.max(np.abs(edited.weights @ pair.k_star - pair.v_star))
        assert residual <= 1e-9 * max(1.0, np.max(np.abs(pair.v_star)))


@pytest.mark.parametrize("ridge", [None, 1e-3, 10.0])
def test_constraint_holds_for_any_ridge(ridge):
    rng = np.random.default_rng(8)
    mem, keys, pair, _ = random_instance(rng, d_in=6, d_out=4, n=3)
    stats = accumulate_keys(KeyStatistics.empty(6, ridge=ridge), keys)
    edited = apply_update(mem, solve_edit(mem, stats, pair))
    np.testing.assert_allclose(edited.weights @ pair.k_star, pair.v_star, atol=1e-9)


def test_dense_update_is_rank_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mem, _, pair, stats = random_instance(rng)
        u = solve_edit(mem, stats, pair).u
        s = np.linalg.svd(u, compute_uv=False)
        assert s[1] / s[0] <= 1e-12


def test_no_feasible_competitor_does_better():
    rng = np.random.default_rng(4)
    for _ in range(20):
        mem, keys, pair, stats = random_instance(rng)
        best = apply_update(mem, solve_edit(mem, stats, pair)).weights
        best_obj = objective(best, mem.weights, keys)
        k = pair.k_star
        null = np.eye(k.size) - np.outer(k, k) / (k @ k)
        for _ in range(50):
            competitor = oracle_constrained_lstsq(mem, keys.T, pair) + 0.1 * rng.standard_normal(best.shape) @ null
            assert objective(competitor, mem.weights, keys) >= best_obj - 1e-10 * max(1.0, best_obj)


def test_solve_edit_rejects_bad_inputs():
    mem = AssociativeMemory(np.ones((2, 3)))
    pair = InsertionPair(np.ones(3), np.zeros(2))
    with pytest.raises(InputError):
        solve_edit(mem, KeyStatistics.empty(3), pair)
    with pytest.raises(DimensionError):
        solve_edit(mem, KeyStatistics.empty(4, ridge=1.0), InsertionPair(np.ones(4), np.zeros(2)))
    with pytest.raises(DimensionError):
        solve_edit(mem, KeyStatistics.empty(3, ridge=1.0), InsertionPair(np.ones(3), np.zeros(5)))


def test_rank_deficient_covariance_without_ridge_is_singular():
    rng = np.random.default_rng(5)
    mem, keys, pair, _ = random_instance(rng, d_in=8, d_out=3, n=8)
    stats = accumulate_keys(KeyStatistics.empty(8, ridge=0.0), keys[:2])
    with pytest.raises(SingularCovarianceError):
        solve_edit(mem, stats, pair)


def test_statistics_over_no_keys_must_be_zero():
    with pytest.raises(RangeError):
        KeyStatistics(np.eye(4), 0)
    assert KeyStatistics.empty(4).count == 0
    assert KeyStatistics(np.eye(4), 1).count == 1


def test_zero_key_is_rejected():
    with pytest.raises(RangeError):
        InsertionPair(np.zeros(3), np.ones(2))


@pytest.mark.parametrize("p", [0.25, 0.5, 0.75])
def test_edit_dropout_zeroes_binomial_fraction(p):
    rng = np.random.default_rng(6)
    update = solve_edit(
        AssociativeMemory(rng.standard_normal((64, 64))),
        accumulate_keys(KeyStatistics.empty(64), rng.standard_normal((256, 64))),
        InsertionPair(rng.standard_normal(64), rng.standard_normal(64)),
    )
    sparse = edit_dropout(update, p, seed=99)
    zeroed = 1.0 - sparse.mask.mean()
    sigma = np.sqrt(p * (1 - p) / 4096)
    assert abs(zeroed - p) <= 3 * sigma
    np.testing.assert_array_equal(sparse.u[sparse.mask], update.u[sparse.mask])
    assert np.all(sparse.u[~sparse.mask] == 0.0)
    again = edit_dropout(update, p, seed=99)
    np.testing.assert_array_equal(again.mask, sparse.mask)
    assert sparse.density() == pytest.approx(1.0 - zeroed)


def test_edit_dropout_limits_and_errors():
    rng = np.random.default_rng(9)
    mem, _, pair, stats = random_instance(rng, d_in=5, d_out=4, n=10)
    update = solve_edit(mem, stats, pair)
    assert update.is_dense
    np.testing.assert_array_equal(edit_dropout(update, 0.0, 1).u, update.u)
    assert not edit_dropout(update, 1.0, 1).u.any()
    with pytest.raises(RangeError):
        edit_dropout(update, 1.5, 1)
    with pytest.raises(InputError):
        edit_dropout(edit_dropout(update, 0.5, 1), 0.5, 2)


def test_apply_update_shape_and_summary():
    rng = np.random.default_rng(10)
    mem, _, pair, stats = random_instance(rng, d_in=5, d_out=4, n=10)
    update = solve_edit(mem, stats, pair)
    with pytest.raises(DimensionError):
        apply_update(AssociativeMemory(np.ones((3, 5))), update)
    summary = update_summary(update, stats.effective_ridge())
    assert summary["u_frobenius"] == pytest.approx(np.linalg.norm(update.u))
    assert summary["denom"] == pytest.approx(update.direction @ pair.k_star)


def test_checksum_is_stable_and_sensitive():
    a = np.arange(6.0).reshape(2, 3)
    assert array_checksum(a) == array_checksum(a.copy())
    assert array_checksum(a) != array_checksum(a.reshape(3, 2))
    assert array_checksum(a) != array_checksum(a + 1e-12)
