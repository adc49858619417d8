from dataclasses import replace

import pytest

from medsurv.dataset import (
    EventStatus,
    Finding,
    VisitSchedule,
    data_checksum,
    read_dataset,
    resample,
    validate,
    write_dataset,
)
from medsurv.errors import DataFormatError, InvalidConfigValue


def _with_subject(dataset, index, **changes):
    subjects = list(dataset.subjects)
    subjects[index] = replace(subjects[index], **changes)
    return replace(dataset, subjects=tuple(subjects))


def test_toy_dataset_is_valid(toy_dataset) -> None:
    assert len(toy_dataset) == 3
    assert validate(toy_dataset) == []


def test_toy_dataset_parsed_values(toy_dataset) -> None:
    first, second, third = toy_dataset.subjects
    assert first.id == "1"
    assert first.status is EventStatus.MAIN_EVENT
    assert first.mediator_by_visit == (1, None)
    assert first.confounders_by_visit[0] == {"L": 1.1}
    assert first.confounders_by_visit[1] is None
    assert second.status is EventStatus.COMPETING_EVENT
    assert second.mediator_by_visit == (None, None)
    assert third.baseline_covariates == {"L_0": 0.3}
    assert third.followup_time == 3.0


def test_empty_dataset_has_no_findings(toy_dataset) -> None:
    assert validate(replace(toy_dataset, subjects=())) == []


def test_measurement_after_event(toy_dataset) -> None:
    dataset = _with_subject(toy_dataset, 0, mediator_by_visit=(1, 2))
    assert validate(dataset) == [Finding("1", "m2", "measurement after event")]


def test_missing_measurement_while_at_risk(toy_dataset) -> None:
    dataset = _with_subject(toy_dataset, 2, mediator_by_visit=(2, None))
    assert validate(dataset) == [Finding("3", "m2", "missing measurement while at risk")]


def test_measurement_at_event_time_is_after_event(toy_dataset) -> None:
    # t = t_1 exactly: the visit-1 measurement is not taken
    dataset = _with_subject(toy_dataset, 1, followup_time=1.0, mediator_by_visit=(1, None))
    findings = validate(dataset)
    assert Finding("2", "m1", "measurement after event") in findings


def test_duplicate_id(toy_dataset) -> None:
    dataset = _with_subject(toy_dataset, 2, id="1")
    assert Finding("1", "id", "duplicate id") in validate(dataset)


def test_exposure_out_of_range(toy_dataset) -> None:
    dataset = _with_subject(toy_dataset, 1, exposure=2)
    assert validate(dataset) == [Finding("2", "a", "exposure out of range")]


def test_mediator_out_of_range(toy_dataset) -> None:
    dataset = _with_subject(toy_dataset, 0, mediator_by_visit=(4, None))
    assert validate(dataset) == [Finding("1", "m1", "mediator out of range")]


def test_negative_time_and_non_finite_baseline(toy_dataset) -> None:
    dataset = _with_subject(toy_dataset, 1, followup_time=-0.5)
    dataset = _with_subject(dataset, 0, baseline_covariates={"L_0": float("nan")})
    findings = validate(dataset)
    assert Finding("2", "time", "negative follow-up time") in findings
    assert Finding("1", "L_0", "non-finite value") in findings


def test_schedule_must_increase() -> None:
    with pytest.raises(InvalidConfigValue):
        VisitSchedule((1.0, 1.0))
    with pytest.raises(InvalidConfigValue):
        VisitSchedule((0.0, 1.0))
    assert VisitSchedule((1, 2)).time_of(0) == 0.0


def test_round_trip(toy_dataset, toy_config, tmp_path) -> None:
    path = tmp_path / "round_trip.csv"
    write_dataset(toy_dataset, str(path))
    again = read_dataset(str(path), toy_config.schedule, toy_config.variables)
    assert again == toy_dataset
    assert data_checksum(again) == data_checksum(toy_dataset)


def test_missing_column(toy_config, tmp_path) -> None:
    path = tmp_path / "broken.csv"
    path.write_text("id,time,status,a\n1,1.0,0,1\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="m1"):
        read_dataset(str(path), toy_config.schedule, toy_config.variables)


def test_invalid_status(toy_config, tmp_path) -> None:
    path = tmp_path / "status.csv"
    path.write_text("id,time,status,a,m1,m2,L_0,L_1,L_2\n1,0.5,7,1,,,0.1,,\n", encoding="utf-8")
    with pytest.raises(DataFormatError):
        read_dataset(str(path), toy_config.schedule, toy_config.variables)


def test_resample_gives_unique_ids(toy_dataset) -> None:
    boot = resample(toy_dataset, [0, 0, 2])
    assert [s.id for s in boot.subjects] == ["1#0", "1#1", "3#2"]
    assert validate(boot) == []


def test_checksum_is_stable(toy_dataset) -> None:
    assert data_checksum(toy_dataset) == data_checksum(replace(toy_dataset))
    changed = _with_subject(toy_dataset, 0, followup_time=1.6)
    assert data_checksum(changed) != data_checksum(toy_dataset)
