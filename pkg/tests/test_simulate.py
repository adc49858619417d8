import copy
import itertools
import json

import numpy as np
import pytest
from scipy.special import expit

from medsurv.dataset import EventStatus, validate
from medsurv.errors import InvalidConfigValue, MissingConfigKey, NonProportionalTruth, StateSpaceTooLarge
from medsurv.simulate import (
    generate,
    oracle_counterfactual_hazards,
    oracle_true_hrs,
    parse_dgp,
    path_count,
)


@pytest.fixture
def dgp_dict(sample_dir):
    return json.loads((sample_dir / "dgp_proportional.json").read_text(encoding="utf-8"))


def _variant(data, **sections):
    changed = copy.deepcopy(data)
    changed.update(sections)
    return parse_dgp(changed)


def _bernoulli(p: float, value: int) -> float:
    return p if value == 1 else 1.0 - p


def _brute_force_hazard(a: int, a_star: int) -> float:
    """sample/dgp_proportional.json 中病因 1 在最后一个区间的反事实风险"""
    total = 0.0
    for l0, l1, m1, l2, m2 in itertools.product((0, 1), repeat=5):
        p = 0.5
        p *= _bernoulli(expit(-0.5 + 0.5 * a + 0.3 * l0), l1)
        p *= _bernoulli(expit(-0.5 + 1.0 * a_star + 0.5 * l1 + 0.3 * l0), m1)
        p *= _bernoulli(expit(-0.5 + 0.5 * a + 0.5 * l1 + 0.4 * m1 + 0.3 * l0), l2)
        p *= _bernoulli(expit(-0.5 + 1.0 * a_star + 0.8 * m1 + 0.5 * l2 + 0.3 * l0), m2)
        total += p * 0.25 * np.exp(0.4 * a + 0.3 * m2 + 0.2 * l2 + 0.2 * l0)
    return total


def test_zero_hazards_censor_everyone_at_study_end(dgp_dict) -> None:
    hazards = {"1": {"base": [0, 0, 0]}, "2": {"base": [0, 0, 0]}}
    config = _variant(dgp_dict, hazards=hazards)
    dataset = generate(config, 200, 1)
    assert all(s.status is EventStatus.CENSORED for s in dataset.subjects)
    assert all(s.followup_time == 3.0 for s in dataset.subjects)
    assert all(None not in s.mediator_by_visit for s in dataset.subjects)
    assert oracle_true_hrs(config, [(0, 1)]) == []


def test_fixed_exposure_table(dgp_dict) -> None:
    config = _variant(dgp_dict, exposure={"probs": [0.0, 1.0]})
    dataset = generate(config, 100, 2)
    assert {s.exposure for s in dataset.subjects} == {1}


def test_generation_is_deterministic(dgp_proportional) -> None:
    first = generate(dgp_proportional, 300, 9)
    again = generate(dgp_proportional, 300, 9)
    other = generate(dgp_proportional, 300, 10)
    assert first.subjects == again.subjects
    assert first.subjects != other.subjects


def test_subjects_do_not_depend_on_cohort_size(dgp_censoring) -> None:
    small = generate(dgp_censoring, 50, 17)
    large = generate(dgp_censoring, 100, 17)
    assert large.subjects[:50] == small.subjects


def test_generated_data_is_valid(dgp_proportional, dgp_censoring) -> None:
    for config in (dgp_proportional, dgp_censoring):
        dataset = generate(config, 1000, 3)
        assert validate(dataset) == []
        times = {s.followup_time for s in dataset.subjects}
        assert times <= {1.0, 2.0, 3.0}


def test_censoring_happens_at_visits(dgp_censoring) -> None:
    dataset = generate(dgp_censoring, 2000, 4)
    censored = [s for s in dataset.subjects if s.status is EventStatus.CENSORED and s.followup_time < 3.0]
    assert censored
    assert all(s.followup_time == 2.0 for s in censored)
    assert all(s.mediator_by_visit[1] is None for s in censored)


def test_oracle_matches_brute_force(dgp_proportional) -> None:
    for a, a_star in itertools.product((0, 1), repeat=2):
        oracle = oracle_counterfactual_hazards(dgp_proportional, a, a_star)
        np.testing.assert_allclose(oracle.hazards[1][:2], 0.0)
        assert oracle.hazards[1][2] == pytest.approx(_brute_force_hazard(a, a_star), rel=1e-12)
        np.testing.assert_allclose(oracle.at_risk, 1.0)


def test_true_hazard_ratios(dgp_proportional) -> None:
    truth = {t.cause: t for t in oracle_true_hrs(dgp_proportional, [(0, 1)])}
    assert set(truth) == {1, 2}
    one = truth[1]
    assert one.hr_ie == pytest.approx(_brute_force_hazard(0, 1) / _brute_force_hazard(0, 0), rel=1e-12)
    assert one.hr_de == pytest.approx(_brute_force_hazard(1, 1) / _brute_force_hazard(0, 1), rel=1e-12)
    assert one.hr_te == pytest.approx(one.hr_de * one.hr_ie, rel=1e-12)
    assert one.hr_ie > 1


def test_exposure_free_mediator_has_no_indirect_effect(dgp_dict) -> None:
    mediator = {"intercepts": [-0.5], "coefficients": {"m_prev": 0.8, "l": 0.5, "l0": 0.3}}
    for truth in oracle_true_hrs(_variant(dgp_dict, mediator=mediator), [(0, 1), (1, 0)]):
        assert truth.hr_ie == pytest.approx(1.0, abs=1e-12)


def test_null_configuration(dgp_dict) -> None:
    mediator = {"intercepts": [-0.5], "coefficients": {"m_prev": 0.8, "l": 0.5, "l0": 0.3}}
    confounder = {"intercepts": [-0.5], "coefficients": {"l_prev": 0.5, "m_prev": 0.4, "l0": 0.3}}
    hazards = {"1": {"base": [0, 0, 0.05], "coefficients": {"m": 0.3, "l": 0.2}},
               "2": {"base": [0, 0, 0.03], "coefficients": {"l0": 0.1}}}
    config = _variant(dgp_dict, mediator=mediator, confounder=confounder, hazards=hazards)
    for truth in oracle_true_hrs(config, [(0, 1)]):
        assert truth.hr_te == pytest.approx(1.0, abs=1e-12)
        assert truth.hr_de == pytest.approx(1.0, abs=1e-12)
        assert truth.hr_ie == pytest.approx(1.0, abs=1e-12)


def test_state_space_limit(dgp_proportional) -> None:
    assert path_count(dgp_proportional) == 32
    with pytest.raises(StateSpaceTooLarge):
        oracle_counterfactual_hazards(dgp_proportional, 0, 1, max_states=10)


def test_latent_variables_double_the_paths(dgp_dict) -> None:
    config = _variant(dgp_dict, latent={"u_l": 0.3, "u_m": 0.0})
    assert path_count(config) == 64


def test_non_proportional_truth_is_rejected(dgp_dict) -> None:
    hazards = {"1": {"base": [0, 0.05, 0.05], "coefficients": {"m": 1.0}}}
    with pytest.raises(NonProportionalTruth):
        oracle_true_hrs(_variant(dgp_dict, hazards=hazards), [(0, 1)])


def test_parse_errors(dgp_dict) -> None:
    missing = dict(dgp_dict)
    del missing["study_end"]
    with pytest.raises(MissingConfigKey, match="study_end"):
        parse_dgp(missing)
    with pytest.raises(InvalidConfigValue):
        _variant(dgp_dict, exposure={"probs": [0.3, 0.3]})
    with pytest.raises(InvalidConfigValue):
        _variant(dgp_dict, exposure={"intercepts": [0.0], "coefficients": {"m": 1.0}})
    with pytest.raises(InvalidConfigValue):
        _variant(dgp_dict, hazards={"1": {"base": [0, 0.05]}})
    with pytest.raises(InvalidConfigValue):
        _variant(dgp_dict, hazards={"3": {"base": [0, 0, 0.05]}})
    with pytest.raises(InvalidConfigValue):
        _variant(dgp_dict, study_end=2)
    with pytest.raises(InvalidConfigValue):
        generate(parse_dgp(dgp_dict), 0, 1)


@pytest.mark.slow
def test_sampler_matches_oracle_under_randomization(dgp_dict) -> None:
    config = _variant(dgp_dict, exposure={"probs": [0.5, 0.5]})
    dataset = generate(config, 100000, 12)
    for a in (0, 1):
        group = [s for s in dataset.subjects if s.exposure == a]
        observed = np.mean([s.status is EventStatus.MAIN_EVENT for s in group])
        expected = oracle_counterfactual_hazards(config, a, a).hazards[1][2]
        assert observed == pytest.approx(expected, abs=0.01)
