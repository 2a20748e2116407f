"""Neighborhoods, AR surrogate fitting, and deviation measurement."""

import numpy as np
import pytest

from seqgame.explainer import (
    ARCoefficients,
    ExplainerError,
    ar_predict,
    fit_ar_explainer,
    fit_constant_explainer,
    fit_global_ar,
    lag_vector,
    local_deviation,
    make_neighborhood,
    read_explainer_rows,
    write_explainer_rows,
)


# ---------------------------------------------------------------------------
# neighborhoods


def test_neighborhood_interior():
    nb = make_neighborhood(center=5, radius=2, lo=0, hi=10)
    assert list(nb.members) == [3, 4, 5, 6, 7]
    assert len(nb) == 5


def test_neighborhood_clipped_at_boundary():
    nb = make_neighborhood(center=1, radius=2, lo=0, hi=2)
    assert list(nb.members) == [0, 1, 2]


def test_neighborhood_radius_covers_everything():
    nb = make_neighborhood(center=4, radius=100, lo=2, hi=9)
    assert list(nb.members) == list(range(2, 10))


def test_neighborhood_radius_zero_is_singleton():
    assert list(make_neighborhood(3, 0, 0, 5).members) == [3]


def test_neighborhood_validation():
    with pytest.raises(ExplainerError):
        make_neighborhood(3, -1, 0, 5)
    with pytest.raises(ExplainerError):
        make_neighborhood(7, 1, 0, 5)  # center above hi
    with pytest.raises(ExplainerError):
        make_neighborhood(0, 1, 4, 2)  # lo > hi


# ---------------------------------------------------------------------------
# AR evaluation


def test_lag_vector_concatenates_recent_first():
    traj = np.arange(10.0).reshape(5, 2)
    np.testing.assert_allclose(lag_vector(traj, 3, 2), [6.0, 7.0, 4.0, 5.0])
    with pytest.raises(ExplainerError):
        lag_vector(traj, 0, 2)


def test_ar_predict_matches_loop_oracle():
    gen = np.random.default_rng(0)
    theta = gen.normal(size=(3, 2, 2))
    theta0 = gen.normal(size=2)
    coeffs = ARCoefficients(theta=theta, theta0=theta0)
    lags = [gen.normal(size=2) for _ in range(3)]
    expected = theta0.copy()
    for k in range(3):
        expected = expected + theta[k] @ lags[k]
    np.testing.assert_allclose(ar_predict(coeffs, lags), expected, atol=1e-14)
    with pytest.raises(ExplainerError):
        ar_predict(coeffs, lags[:2])


def test_ar_coefficients_validation_and_flatten():
    with pytest.raises(ExplainerError):
        ARCoefficients(theta=np.ones((2, 2, 3)), theta0=np.zeros(2))
    with pytest.raises(ExplainerError):
        ARCoefficients(theta=np.ones((2, 2, 2)), theta0=np.zeros(3))
    c = ARCoefficients(theta=np.arange(8.0).reshape(2, 2, 2), theta0=np.array([9.0, 10.0]))
    np.testing.assert_allclose(c.flatten(), [9, 10, 0, 1, 2, 3, 4, 5, 6, 7])
    assert c.order == 2 and c.channels == 2


# ---------------------------------------------------------------------------
# fitting


AR2 = (
    np.array([[0.5, 0.1], [-0.2, 0.3]]),
    np.array([[0.2, 0.0], [0.05, -0.1]]),
    np.array([0.3, -0.1]),
)


def _exact_ar2_targets(seed=1, length=40):
    # targets follow the AR map of a well-excited random trajectory exactly,
    # so the fit is a zero-residual regression with a unique solution
    gen = np.random.default_rng(seed)
    a1, a2, b = AR2
    x = gen.normal(size=(length, 2))
    targets = np.stack([a1 @ x[m] + a2 @ x[m - 1] + b for m in range(1, length)])
    return x, targets  # targets[m - 1] belongs to member m


def test_fit_recovers_generating_ar2():
    x, all_targets = _exact_ar2_targets()
    a1, a2, b = AR2
    members = range(5, 30)
    targets = np.stack([all_targets[m - 1] for m in members])
    fit = fit_ar_explainer(x, members, targets, order=2, alpha=1e-10)
    np.testing.assert_allclose(fit.theta[0], a1, atol=1e-6)
    np.testing.assert_allclose(fit.theta[1], a2, atol=1e-6)
    np.testing.assert_allclose(fit.theta0, b, atol=1e-6)


def test_fit_drops_members_without_lags():
    x, all_targets = _exact_ar2_targets()
    members = [0, 5, 6, 7, 8, 9, 10]  # index 0 lacks a second lag
    targets = np.stack([all_targets[max(m - 1, 0)] for m in members])
    fit = fit_ar_explainer(x, members, targets, order=2, alpha=1e-10)
    np.testing.assert_allclose(fit.theta[0], AR2[0], atol=1e-6)
    with pytest.raises(ExplainerError, match="lags"):
        fit_ar_explainer(x, [0, 1], targets[:2], order=3, alpha=1.0)


def test_fit_target_shape_checked():
    x = np.zeros((10, 2))
    with pytest.raises(ExplainerError):
        fit_ar_explainer(x, [3, 4], np.zeros((3, 2)), order=2, alpha=1.0)


def test_huge_alpha_collapses_to_neighborhood_mean():
    gen = np.random.default_rng(2)
    x = gen.normal(size=(20, 2))
    members = range(4, 12)
    targets = gen.normal(size=(len(members), 2))
    fit = fit_ar_explainer(x, members, targets, order=2, alpha=1e12)
    assert np.abs(fit.theta).max() < 1e-8
    np.testing.assert_allclose(fit.theta0, targets.mean(axis=0), atol=1e-8)


def test_constant_trajectory_fit_equals_constant_explainer():
    # a constant trajectory centers to a zero design, so the AR part is
    # exactly zero and the intercept is exactly the target mean
    x = np.full((15, 2), 3.0)
    members = range(3, 9)
    gen = np.random.default_rng(3)
    targets = gen.normal(size=(len(members), 2))
    fit = fit_ar_explainer(x, members, targets, order=2, alpha=1.0)
    const = fit_constant_explainer(targets)
    assert np.all(fit.theta == 0.0)
    np.testing.assert_allclose(fit.theta0, const.value, atol=1e-12)


def test_single_member_fit_exists_with_ridge():
    x = np.random.default_rng(4).normal(size=(10, 1))
    fit = fit_ar_explainer(x, [5], np.array([[2.0]]), order=2, alpha=1.0)
    # one row centers to zero design: intercept carries the whole prediction
    np.testing.assert_allclose(fit.theta0, [2.0], atol=1e-12)
    assert np.all(fit.theta == 0.0)


def test_fit_without_bias_goes_through_origin():
    gen = np.random.default_rng(5)
    x = gen.normal(size=(30, 1))
    members = range(3, 20)
    targets = np.stack([2.0 * x[m] - 0.5 * x[m - 1] for m in members])
    fit = fit_ar_explainer(x, members, targets, order=2, alpha=1e-10, include_bias=False)
    assert np.all(fit.theta0 == 0.0)
    np.testing.assert_allclose(fit.theta[0], [[2.0]], atol=1e-6)
    np.testing.assert_allclose(fit.theta[1], [[-0.5]], atol=1e-6)


def test_fitted_explainer_is_coordinatewise_optimal():
    # the ridge objective must not decrease under any +-1e-3 coordinate bump
    gen = np.random.default_rng(6)
    x = gen.normal(size=(25, 2))
    members = list(range(4, 16))
    targets = gen.normal(size=(len(members), 2))
    alpha = 0.7
    fit = fit_ar_explainer(x, members, targets, order=2, alpha=alpha)

    def objective(coeffs):
        preds = np.stack(
            [ar_predict(coeffs, [x[m], x[m - 1]]) for m in members]
        )
        return float(np.sum((preds - targets) ** 2) + alpha * np.sum(coeffs.theta**2))

    base = objective(fit)
    for arr_name in ("theta", "theta0"):
        arr = getattr(fit, arr_name)
        for idx in np.ndindex(arr.shape):
            for sign in (1.0, -1.0):
                theta = fit.theta.copy()
                theta0 = fit.theta0.copy()
                target_arr = theta if arr_name == "theta" else theta0
                target_arr[idx] += sign * 1e-3
                bumped = ARCoefficients(theta=theta, theta0=theta0)
                assert objective(bumped) > base


def test_constant_explainer_is_mean():
    vals = np.array([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_allclose(fit_constant_explainer(vals).value, [2.0, 4.0])
    with pytest.raises(ExplainerError):
        fit_constant_explainer(np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# deviation


def test_local_deviation_single_row_example():
    assert local_deviation([[1.0, 2.0]], [[0.0, 0.0]]) == pytest.approx(5.0)


def test_local_deviation_averages_over_rows():
    f = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = np.zeros((2, 2))
    assert local_deviation(f, g) == pytest.approx((1.0 + 4.0) / 2.0)


def test_local_deviation_zero_for_identical():
    f = np.random.default_rng(7).normal(size=(4, 3))
    assert local_deviation(f, f.copy()) == 0.0


def test_local_deviation_shape_checks():
    with pytest.raises(ExplainerError):
        local_deviation(np.ones((2, 2)), np.ones((3, 2)))
    nb = make_neighborhood(2, 1, 0, 10)
    with pytest.raises(ExplainerError):
        local_deviation(np.ones((2, 2)), np.ones((2, 2)), nb)  # 3 members expected
    assert local_deviation(np.ones((3, 2)), np.ones((3, 2)), nb) == 0.0


# ---------------------------------------------------------------------------
# pooled baseline


def test_global_ar_recovers_generator_across_windows():
    # short noiseless windows from fresh random starts keep the pooled
    # design well excited, so the generating map is the unique zero-residual
    # fit of the pooled next-row regression
    gen = np.random.default_rng(8)
    a1, a2, b = AR2
    windows = []
    for _ in range(6):
        w = np.zeros((8, 2))
        w[0], w[1] = gen.normal(size=2), gen.normal(size=2)
        for t in range(2, 8):
            w[t] = a1 @ w[t - 1] + a2 @ w[t - 2] + b
        windows.append(w)
    fit = fit_global_ar(windows, order=2, alpha=1e-10)
    np.testing.assert_allclose(fit.theta[0], a1, atol=1e-5)
    np.testing.assert_allclose(fit.theta[1], a2, atol=1e-5)
    np.testing.assert_allclose(fit.theta0, b, atol=1e-5)


def test_global_ar_needs_usable_windows():
    with pytest.raises(ExplainerError):
        fit_global_ar([np.zeros((2, 1))], order=3, alpha=1.0)


# ---------------------------------------------------------------------------
# row dump round trip


def test_explainer_rows_round_trip(tmp_path):
    gen = np.random.default_rng(9)
    records = [
        (5, ARCoefficients(theta=gen.normal(size=(2, 2, 2)), theta0=gen.normal(size=2)), 0.25),
        (6, ARCoefficients(theta=gen.normal(size=(2, 2, 2)), theta0=gen.normal(size=2)), 0.125),
    ]
    path = str(tmp_path / "fits.csv")
    write_explainer_rows(path, records, comments=["demo"])
    back = read_explainer_rows(path)
    assert [r[0] for r in back] == [5, 6]
    for (c0, f0, d0), (c1, f1, d1) in zip(records, back):
        assert d0 == d1
        np.testing.assert_array_equal(f0.theta, f1.theta)
        np.testing.assert_array_equal(f0.theta0, f1.theta0)
    with pytest.raises(ExplainerError):
        write_explainer_rows(path, [])
