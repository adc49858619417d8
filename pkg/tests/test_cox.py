import math

import numpy as np
import pytest
from scipy import optimize

from medsurv.engines.cox import (
    BaselineHazard,
    SurvivalData,
    breslow_baseline,
    censoring_survival,
    cox_log_partial_likelihood,
    cox_score,
    fit_weighted_cox,
    interval_log_survival,
)
from medsurv.errors import InvalidConfigValue, MonotoneLikelihood, NoEventsForCause, NonConvergence


def _data(stop, status, x=None, weights=None, start=None) -> SurvivalData:
    n = len(stop)
    return SurvivalData(
        start=np.zeros(n) if start is None else start,
        stop=stop,
        status=status,
        last=np.ones(n, dtype=bool),
        X=np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1),
        weights=np.ones(n) if weights is None else weights,
    )


def _simulated(seed: int, n: int = 120):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    beta = np.array([0.7, -0.4])
    event = rng.exponential(1.0 / np.exp(X @ beta))
    censor = rng.exponential(1.5, size=n)
    stop = np.round(np.minimum(event, censor), 2) + 0.01
    status = np.where(event <= censor, 1, 0)
    status[rng.random(n) < 0.2] *= 2
    weights = rng.uniform(0.5, 2.0, size=n)
    return _data(stop, status, X, weights)


def test_closed_form_example() -> None:
    data = _data([1.0, 2.0, 3.0], [1, 1, 1], [0.0, 1.0, 0.0])
    fit = fit_weighted_cox(data, 1)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(math.log(math.sqrt(2)), abs=1e-8)

    baseline = breslow_baseline(fit, data)
    np.testing.assert_allclose(baseline.jump_times, [1.0, 2.0, 3.0])
    r2 = math.sqrt(2)
    np.testing.assert_allclose(baseline.increments, [1 / (2 + r2), 1 / (1 + r2), 1.0], rtol=1e-8)
    assert baseline.cumulative(2.5) == pytest.approx(1 / (2 + r2) + 1 / (1 + r2))


def test_monotone_likelihood() -> None:
    data = _data([1.0, 2.0, 3.0], [1, 1, 1], [1.0, 0.0, 0.0])
    with pytest.raises(MonotoneLikelihood):
        fit_weighted_cox(data, 1)


def test_symmetric_design_gives_zero() -> None:
    data = _data([1.0, 1.0, 2.0, 2.0], [1, 1, 1, 1], [0.0, 1.0, 1.0, 0.0])
    fit = fit_weighted_cox(data, 1)
    assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-10)


def test_duplicated_rows_at_half_weight() -> None:
    data = _simulated(1)
    doubled = _data(
        np.concatenate([data.stop, data.stop]),
        np.concatenate([data.status, data.status]),
        np.vstack([data.X, data.X]),
        np.concatenate([data.weights, data.weights]) / 2,
    )
    base, twin = fit_weighted_cox(data, 1), fit_weighted_cox(doubled, 1)
    np.testing.assert_allclose(base.coefficients, twin.coefficients, atol=1e-8)
    np.testing.assert_allclose(breslow_baseline(base, data).increments,
                               breslow_baseline(twin, doubled).increments, rtol=1e-8)


def test_weight_scaling_invariance() -> None:
    data = _simulated(2)
    scaled = _data(data.stop, data.status, data.X, 5.0 * data.weights)
    base, other = fit_weighted_cox(data, 1), fit_weighted_cox(scaled, 1)
    np.testing.assert_allclose(base.coefficients, other.coefficients, atol=1e-8)
    np.testing.assert_allclose(breslow_baseline(base, data).increments,
                               breslow_baseline(other, scaled).increments, rtol=1e-8)


def test_score_vanishes_and_matches_finite_differences() -> None:
    data = _simulated(3)
    fit = fit_weighted_cox(data, 1)
    np.testing.assert_allclose(cox_score(fit.coefficients, data, 1), 0.0, atol=1e-6)

    beta = np.array([0.3, 0.2])
    h = 1e-6
    numeric = [
        (cox_log_partial_likelihood(beta + h * e, data, 1) - cox_log_partial_likelihood(beta - h * e, data, 1)) / (2 * h)
        for e in np.eye(2)
    ]
    np.testing.assert_allclose(cox_score(beta, data, 1), numeric, rtol=1e-5, atol=1e-6)


def test_other_causes_are_censorings() -> None:
    data = _simulated(4)
    relabeled = _data(data.stop, np.where(data.status == 1, 1, 0), data.X, data.weights)
    np.testing.assert_allclose(fit_weighted_cox(data, 1).coefficients,
                               fit_weighted_cox(relabeled, 1).coefficients, atol=1e-10)
    competing = fit_weighted_cox(data, 2)
    assert competing.n_events == int(np.sum(data.status == 2))


def test_no_events_for_cause() -> None:
    data = _data([1.0, 2.0], [1, 0], [0.0, 1.0])
    with pytest.raises(NoEventsForCause):
        fit_weighted_cox(data, 2)


def _independent_negative_partial_likelihood(beta, stop, status, X, w):
    """Breslow 结的加权负偏似然，逐个不同事件时刻按定义求和"""
    eta = X @ beta
    total = 0.0
    for t in np.unique(stop[status == 1]):
        events = (stop == t) & (status == 1)
        at_risk = stop >= t
        denominator = np.sum(w[at_risk] * np.exp(eta[at_risk]))
        total += np.sum(w[events] * eta[events]) - np.sum(w[events]) * np.log(denominator)
    return -total


def test_agrees_with_independent_partial_likelihood() -> None:
    successes = 0
    for seed in range(30):
        rng = np.random.default_rng(700 + seed)
        X = rng.normal(size=(40, 3))
        event = rng.exponential(1.0 / np.exp(X @ np.array([0.6, -0.4, 0.3])))
        censor = rng.exponential(1.5, size=40)
        stop = np.round(np.minimum(event, censor), 1) + 0.1
        status = np.where(event <= censor, 1, 0)
        status[rng.random(40) < 0.15] *= 2
        w = rng.uniform(0.5, 2.0, size=40)
        try:
            fit = fit_weighted_cox(_data(stop, status, X, w), 1)
        except MonotoneLikelihood:
            continue
        reference = optimize.minimize(_independent_negative_partial_likelihood, np.zeros(3),
                                      args=(stop, status, X, w), method="Nelder-Mead",
                                      options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000, "maxfev": 40000})
        np.testing.assert_allclose(fit.coefficients, reference.x, atol=1e-4)
        successes += 1
    assert successes >= 20


def test_iteration_limit_raises_non_convergence(monkeypatch) -> None:
    monkeypatch.setattr("medsurv.engines.newton.MAX_ITERATIONS", 1)
    with pytest.raises(NonConvergence):
        fit_weighted_cox(_simulated(5), 1)


def test_counting_process_rows_match_single_rows() -> None:
    split = SurvivalData(
        start=[0.0, 1.0, 0.0, 0.0],
        stop=[1.0, 2.5, 2.0, 3.0],
        status=[0, 1, 1, 1],
        last=[False, True, True, True],
        X=[[1.0], [1.0], [0.0], [0.5]],
        weights=[1.0, 1.0, 1.0, 1.0],
    )
    whole = _data([2.5, 2.0, 3.0], [1, 1, 1], [1.0, 0.0, 0.5])
    fit_split, fit_whole = fit_weighted_cox(split, 1), fit_weighted_cox(whole, 1)
    assert fit_split.coefficients[0] == pytest.approx(fit_whole.coefficients[0], abs=1e-8)
    np.testing.assert_allclose(breslow_baseline(fit_split, split).increments,
                               breslow_baseline(fit_whole, whole).increments, rtol=1e-8)


def test_nelson_aalen_without_covariates() -> None:
    data = _data([1.0, 2.0, 2.0, 4.0], [1, 1, 0, 1])
    fit = fit_weighted_cox(data, 1)
    assert fit.coefficients.size == 0
    baseline = breslow_baseline(fit, data)
    np.testing.assert_allclose(baseline.jump_times, [1.0, 2.0, 4.0])
    np.testing.assert_allclose(baseline.increments, [1 / 4, 1 / 3, 1.0])


def test_other_terminations_leave_first() -> None:
    data = _data([2.0, 2.0, 3.0], [1, 0, 0])
    plain = breslow_baseline(fit_weighted_cox(data, 1), data)
    first = breslow_baseline(fit_weighted_cox(data, 1, events_first=True), data)
    assert plain.increments[0] == pytest.approx(1 / 3)
    assert first.increments[0] == pytest.approx(1 / 2)


def test_censoring_survival_product_limit() -> None:
    data = _data([1.0, 2.0, 3.0, 4.0], [0, 1, 1, 1])
    fit = fit_weighted_cox(data, 0)
    baseline = breslow_baseline(fit, data)
    path = _data([4.0], [1])
    assert censoring_survival(fit, baseline, path, 0.5) == 1.0
    assert censoring_survival(fit, baseline, path, 1.5) == pytest.approx(0.75)
    assert censoring_survival(fit, baseline, path, 1.0, left_limit=True) == 1.0
    assert censoring_survival(fit, baseline, path, 1.0) == pytest.approx(0.75)


def test_interval_log_survival_splits_jumps() -> None:
    data = _data([1.0, 2.0, 3.0, 4.0], [0, 1, 1, 1])
    fit = fit_weighted_cox(data, 0)
    baseline = breslow_baseline(fit, data)
    rows = SurvivalData(start=[0.0, 1.0], stop=[1.0, 2.0], status=[0, 0], last=[False, True],
                        X=np.zeros((2, 0)), weights=[1.0, 1.0])
    closed, open_, clipped = interval_log_survival(fit, baseline, rows)
    np.testing.assert_allclose(closed, [math.log(0.75), 0.0])
    np.testing.assert_allclose(open_, [0.0, 0.0])
    assert clipped == 0


def test_baseline_round_trip_and_validation() -> None:
    baseline = BaselineHazard(1, [1.0, 2.0], [0.1, 0.2])
    again = BaselineHazard.from_dict(baseline.to_dict())
    np.testing.assert_allclose(again.increments, [0.1, 0.2])
    with pytest.raises(InvalidConfigValue):
        BaselineHazard(1, [2.0, 1.0], [0.1, 0.2])
    with pytest.raises(InvalidConfigValue):
        _data([1.0, 0.0], [1, 1])
