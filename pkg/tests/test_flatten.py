import numpy as np
import pytest

from serq._validation import ValidationError
from serq.flatten import (
    FlatteningPlan,
    apply_inverse_to_activation,
    compute_smoothing_scales,
    fold_scales,
)
from serq.tensorio import CalibStats, SyntheticSpec, gen_synthetic_activations, collect_calib_stats


def stats_of(max_abs):
    arr = np.asarray(max_abs, dtype=float)
    return CalibStats(arr.size, arr, 1)


def test_balanced_scales_are_one():
    w = np.array([[3.0, -1.0], [0.5, 2.0]])
    act = stats_of(np.abs(w).max(axis=1))
    plan = compute_smoothing_scales(act, w, alpha=0.5)
    assert np.allclose(plan.s, 1.0)


def test_alpha_one_full_migration():
    w = np.array([[3.0, -1.0], [0.5, 2.0]])
    act = stats_of([4.0, 9.0])
    plan = compute_smoothing_scales(act, w, alpha=1.0)
    assert np.allclose(plan.s, [4.0, 9.0])


def test_hand_case():
    act = stats_of([8.0, 2.0])
    w = np.array([[2.0, 1.0], [8.0, -3.0]])
    plan = compute_smoothing_scales(act, w, alpha=0.5)
    assert np.allclose(plan.s, [2.0, 0.5])


def test_dead_channel_gets_unit_scale():
    act = stats_of([0.0, 5.0])
    w = np.array([[1.0, 1.0], [1.0, 1.0]])
    plan = compute_smoothing_scales(act, w, alpha=0.5)
    assert plan.s[0] == 1.0


def test_zero_weight_row_gets_unit_scale():
    act = stats_of([2.0, 5.0])
    w = np.array([[0.0, 0.0], [1.0, 1.0]])
    plan = compute_smoothing_scales(act, w, alpha=0.5)
    assert plan.s[0] == 1.0


def test_channel_mismatch_rejected():
    with pytest.raises(ValidationError):
        compute_smoothing_scales(stats_of([1.0, 2.0, 3.0]), np.ones((2, 2)), 0.5)


def test_fold_identity():
    w = np.random.default_rng(0).standard_normal((4, 3))
    plan = FlatteningPlan(np.ones(4), 0.5)
    assert np.array_equal(fold_scales(w, plan), w)


def test_fold_inverse_pair():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((8, 5))
    s = np.abs(rng.standard_normal(8)) + 0.2
    folded = fold_scales(w, FlatteningPlan(s, 0.5))
    back = fold_scales(folded, FlatteningPlan(1.0 / s, 0.5))
    assert np.abs(back - w).max() <= 1e-12 * np.abs(w).max()


def test_eq_exactness_many_seeds():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((12, 16))
        w = rng.standard_normal((16, 8))
        s = np.abs(rng.standard_normal(16)) + 0.1
        plan = FlatteningPlan(s, 0.5)
        lhs = x @ w
        rhs = apply_inverse_to_activation(x, plan) @ fold_scales(w, plan)
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)


def test_inverse_activation_mirror():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 4))
    s = np.array([2.0, 4.0, 0.5, 1.0])
    plan = FlatteningPlan(s, 0.5)
    out = apply_inverse_to_activation(x, plan)
    assert np.allclose(out, x / s)
    back = apply_inverse_to_activation(out, FlatteningPlan(1.0 / s, 0.5))
    assert np.abs(back - x).max() <= 1e-12


def test_flattening_shrinks_outlier_ratio():
    # seeded property: max/median column magnitude ratio strictly drops
    for seed in range(10):
        spec = SyntheticSpec(rows=128, cols=32, n_outlier_channels=4,
                             outlier_magnitude=30, seed=seed)
        x = gen_synthetic_activations(spec)
        w = np.random.default_rng(seed + 100).standard_normal((32, 32))
        stats = collect_calib_stats(x)
        plan = compute_smoothing_scales(stats, w, alpha=0.5)
        xt = apply_inverse_to_activation(x, plan)

        def ratio(m):
            col = np.abs(m).max(axis=0)
            return col.max() / np.median(col)

        assert ratio(xt) < ratio(x)


def test_plan_validation():
    with pytest.raises(ValidationError):
        FlatteningPlan(np.array([1.0, 0.0]), 0.5)
    with pytest.raises(ValidationError):
        FlatteningPlan(np.array([1.0, 1.0]), 1.5)
