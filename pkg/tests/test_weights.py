from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from medsurv.config import CensoringMode
from medsurv.dataset import EventStatus, subjects_frame
from medsurv.engines.cox import CoxFit, breslow_baseline
from medsurv.engines.design import ModelFormula
from medsurv.engines.glm import FittedGlm
from medsurv.errors import DegeneratePropensity
from medsurv.reshape import expand_counterfactual, to_counting_process
from medsurv.simulate import generate, load_dgp
from medsurv.weights import (
    CensoringHazard,
    CensoringModel,
    MediatorModel,
    NuisanceModels,
    TreatmentModel,
    assign_weights,
    censoring_weight,
    fit_censoring_model,
    fit_mediator_model,
    fit_treatment_model,
    mediator_weight,
    survival_data,
    treatment_weight,
    truncate,
    write_weights,
)

INTERCEPT = ModelFormula()
SAMPLE = Path(__file__).resolve().parent.parent / "sample"


@pytest.fixture
def toy_models(toy_dataset):
    subjects = subjects_frame(toy_dataset)
    long = to_counting_process(toy_dataset)
    models = NuisanceModels(
        treatment=fit_treatment_model(subjects, INTERCEPT, 2),
        mediator=fit_mediator_model(long, INTERCEPT, 4),
        censoring=CensoringModel(CensoringMode.NONE),
    )
    return subjects, long, models


def _glm(coefficients, names) -> FittedGlm:
    return FittedGlm(np.atleast_2d(coefficients), (0, 1), 2, tuple(names), True, 0.0, 0)


def _two_visit_path() -> pd.DataFrame:
    return pd.DataFrame({
        "id": ["x", "x", "x"],
        "Start": [0.0, 1.0, 2.0],
        "_visit": [0, 1, 2],
        "A": [1, 1, 1],
        "M_t": [0.0, 1.0, 0.0],
    })


def test_toy_treatment_weights(toy_models) -> None:
    subjects, _, models = toy_models
    np.testing.assert_allclose(treatment_weight(subjects, models.treatment), [1.5, 3.0, 1.5])


def test_degenerate_propensity() -> None:
    subjects = pd.DataFrame({"id": ["1", "2"], "A": [0, 1]})
    model = TreatmentModel(INTERCEPT, _glm([[-20.0]], ["(Intercept)"]))
    with pytest.raises(DegeneratePropensity):
        treatment_weight(subjects, model)


def test_mediator_weight_is_one_when_exposures_agree(toy_models) -> None:
    _, long, models = toy_models
    np.testing.assert_allclose(mediator_weight(long, models.mediator, long["A"].to_numpy()), 1.0)


def test_mediator_weight_hand_computation() -> None:
    long = _two_visit_path()
    model = MediatorModel(ModelFormula(terms=("A",)), True, {None: _glm([[0.2, 0.8]], ["(Intercept)", "A"])})
    first = expit(0.2) / expit(1.0)
    second = (1 - expit(0.2)) / (1 - expit(1.0))
    np.testing.assert_allclose(mediator_weight(long, model, 0), [1.0, first, first * second], rtol=1e-12)
    np.testing.assert_allclose(mediator_weight(long, model, 1), 1.0)


def test_rows_before_first_visit_have_unit_mediator_weight() -> None:
    long = _two_visit_path()
    model = MediatorModel(ModelFormula(terms=("A",)), True, {None: _glm([[0.2, 0.8]], ["(Intercept)", "A"])})
    assert mediator_weight(long, model, 0)[0] == 1.0


def test_no_censoring_mode(toy_models) -> None:
    _, long, _ = toy_models
    weights, clipped = censoring_weight(long, CensoringModel(CensoringMode.NONE))
    np.testing.assert_allclose(weights, 1.0)
    assert clipped == 0


def test_administrative_censoring_only(toy_models) -> None:
    _, long, _ = toy_models
    formula = ModelFormula(terms=("A",))
    model = fit_censoring_model(long, CensoringMode.HISTORY_STABILIZED, formula, formula)
    assert model.history is None and model.exposure is None
    weights, _ = censoring_weight(long, model)
    np.testing.assert_allclose(weights, 1.0)


def test_total_weight_is_product(toy_dataset, toy_models, tmp_path) -> None:
    subjects, long, models = toy_models
    expanded = expand_counterfactual(long, 2)
    weighted, bundle = assign_weights(expanded, long, subjects, models)
    np.testing.assert_allclose(weighted["case_weight"],
                               weighted["w_treatment"] * weighted["w_mediator"] * weighted["w_censoring"])
    # intercept-only models: every weight is 1 / Pr(A = a_obs)
    expected = np.where(weighted["A"] == 1, 1.5, 3.0)
    np.testing.assert_allclose(weighted["case_weight"], expected)
    assert bundle.diagnostics.truncated_rows == 0
    assert bundle.diagnostics.max == pytest.approx(3.0)

    path = tmp_path / "weights.csv"
    write_weights(weighted, str(path))
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "id,Start,Stop,A,Astar,w_treatment,w_mediator,w_censoring,weight"


def test_truncate() -> None:
    weights = np.arange(1.0, 101.0)
    capped, count = truncate(weights, 10)
    assert count == 20
    assert capped.min() == pytest.approx(10.9)
    assert capped.max() == pytest.approx(90.1)
    same, none = truncate(weights, None)
    assert none == 0 and same is weights


@pytest.fixture(scope="module")
def censored_cohort():
    dataset = generate(load_dgp(str(SAMPLE / "dgp_censoring.json")), 4000, 1)
    return dataset, to_counting_process(dataset)


def test_treatment_weights_balance(censored_cohort) -> None:
    dataset, _ = censored_cohort
    subjects = subjects_frame(dataset)
    model = fit_treatment_model(subjects, ModelFormula(terms=("L_0",)), 2)
    assert treatment_weight(subjects, model).mean() == pytest.approx(2.0, abs=0.1)


def test_history_censoring_weights(censored_cohort) -> None:
    _, long = censored_cohort
    formula = ModelFormula(terms=("A", "L_t", "M_t"))
    model = fit_censoring_model(long, CensoringMode.HISTORY_UNSTABILIZED, formula, ModelFormula(terms=("A",)))
    coefficients = model.history.fit.to_dict()["coefficients"]
    assert coefficients["L_t"] > 0
    assert coefficients["M_t"] > 0
    np.testing.assert_allclose(model.history.baseline.jump_times, [2.0])

    weights, _ = censoring_weight(long, model)
    stop = long["Stop"].to_numpy()
    np.testing.assert_allclose(weights[stop <= 2.0], 1.0)
    assert np.all(weights[stop > 2.0] > 1.0)


def test_stabilized_censoring_weights_average_near_one(censored_cohort) -> None:
    _, long = censored_cohort
    model = fit_censoring_model(long, CensoringMode.HISTORY_STABILIZED,
                                ModelFormula(terms=("A", "L_t", "M_t")), ModelFormula(terms=("A",)))
    weights, _ = censoring_weight(long, model)
    late = long["Stop"].to_numpy() > 2.0
    assert weights[late].mean() == pytest.approx(1.0, abs=0.1)


@pytest.fixture
def five_subjects() -> pd.DataFrame:
    return pd.DataFrame({
        "id": ["1", "2", "3", "4", "5"],
        "A": [0, 1, 1, 0, 1],
        "L_0": [0.0, 1.0, 2.0, 1.0, 0.0],
    })


def test_treatment_weights_match_hand_softmax(five_subjects) -> None:
    model = fit_treatment_model(five_subjects, ModelFormula(terms=("L_0",)), 2)
    intercept, slope = model.fit.coefficients[0]
    eta = intercept + slope * five_subjects["L_0"].to_numpy()
    numerators = np.exp(np.column_stack([np.zeros(5), eta]))
    probs = numerators / numerators.sum(axis=1, keepdims=True)
    a = five_subjects["A"].to_numpy()
    expected = 1.0 / probs[np.arange(5), a]
    np.testing.assert_allclose(treatment_weight(five_subjects, model), expected, rtol=1e-12)
    # 拟合系数满足得分方程
    residual = a - probs[:, 1]
    assert residual.sum() == pytest.approx(0.0, abs=1e-8)
    assert (residual * five_subjects["L_0"]).sum() == pytest.approx(0.0, abs=1e-8)

    uniform = fit_treatment_model(five_subjects, INTERCEPT, 2)
    np.testing.assert_allclose(treatment_weight(five_subjects, uniform), [2.5, 5 / 3, 5 / 3, 2.5, 5 / 3], rtol=1e-10)


def _single_censoring_path() -> pd.DataFrame:
    """受试者 2 在 t=1 删失，其余在 t=3 发生病因 1 事件"""
    return pd.DataFrame({
        "id": ["1", "1", "2", "3", "3", "4", "4"],
        "Start": [0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        "Stop": [1.0, 3.0, 1.0, 1.0, 3.0, 1.0, 3.0],
        "Status": [0, 1, 0, 0, 1, 0, 1],
        "_last": [False, True, True, False, True, False, True],
        "A": [1, 1, 0, 1, 1, 0, 0],
        "L_t": [0.5, 0.5, 1.0, 0.0, 0.0, 2.0, 2.0],
    })


def _fixed_censoring_hazard(long: pd.DataFrame, formula: ModelFormula, coefficients) -> CensoringHazard:
    fit = CoxFit(int(EventStatus.CENSORED), np.asarray(coefficients, dtype=float), formula.column_names,
                 True, 0.0, 0, 1, events_first=True)
    return CensoringHazard(formula, fit, breslow_baseline(fit, survival_data(long, formula)))


def test_stabilized_weight_is_ratio_of_product_limits() -> None:
    long = _single_censoring_path()
    history = _fixed_censoring_hazard(long, ModelFormula(terms=("A", "L_t")), [0.4, 0.3])
    exposure = _fixed_censoring_hazard(long, ModelFormula(terms=("A",)), [0.2])
    np.testing.assert_allclose(history.baseline.jump_times, [1.0])

    a = np.array([1.0, 0.0, 1.0, 0.0])
    l = np.array([0.5, 1.0, 0.0, 2.0])
    risk_history = np.exp(0.4 * a + 0.3 * l)
    risk_exposure = np.exp(0.2 * a)
    g_history = 1 - risk_history / risk_history.sum()
    g_exposure = 1 - risk_exposure / risk_exposure.sum()

    # 每个受试者第二行 (1, 3] 跨过 t=1 的删失跳跃；第一行在左极限处尚未跳跃
    after = [None, 0, None, None, 2, None, 3]
    expected = [1.0 if i is None else g_exposure[i] / g_history[i] for i in after]
    weights, clipped = censoring_weight(long, CensoringModel(CensoringMode.HISTORY_STABILIZED, history, exposure))
    np.testing.assert_allclose(weights, expected, rtol=1e-12)
    assert clipped == 0

    unstabilized, _ = censoring_weight(long, CensoringModel(CensoringMode.HISTORY_UNSTABILIZED, history))
    np.testing.assert_allclose(unstabilized, [1.0 if i is None else 1 / g_history[i] for i in after], rtol=1e-12)
