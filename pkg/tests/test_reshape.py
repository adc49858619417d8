from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from medsurv.dataset import VisitSchedule
from medsurv.errors import DataFormatError, InvalidConfigValue
from medsurv.reshape import (
    HYPOTHETICAL,
    expand_counterfactual,
    floor_time,
    public_columns,
    to_counting_process,
    write_table,
)

SCHEDULE = VisitSchedule((1.0, 2.0))

TOY_LONG = pd.DataFrame(
    [
        ["1", 0.0, 1.0, 0, 1, 0.0, 0.0, 0.0, 0.0, 0.1],
        ["1", 1.0, 1.5, 1, 1, 1.0, 0.0, 1.1, 0.0, 0.1],
        ["2", 0.0, 0.9, 2, 0, 0.0, 0.0, 0.0, 0.0, 0.2],
        ["3", 0.0, 1.0, 0, 1, 0.0, 0.0, 0.0, 0.0, 0.3],
        ["3", 1.0, 2.0, 0, 1, 2.0, 0.0, 1.3, 0.0, 0.3],
        ["3", 2.0, 3.0, 0, 1, 3.0, 2.0, 2.3, 1.3, 0.3],
    ],
    columns=["id", "Start", "Stop", "Status", "A", "M_t", "M_t-1", "L_t", "L_t-1", "L_0"],
)


@pytest.mark.parametrize("t, expected", [(2.0, 1.0), (1.5, 1.0), (0.5, 0.0), (1.0, 0.0), (3.0, 2.0)])
def test_floor_time(t, expected) -> None:
    assert floor_time(t, SCHEDULE) == expected


def test_floor_time_grid() -> None:
    for t in np.linspace(0.01, 4.0, 400):
        floor = floor_time(t, SCHEDULE)
        assert floor < t
        assert floor in (0.0, 1.0, 2.0)
        later = [v for v in SCHEDULE.visit_times if v > floor]
        assert not later or later[0] >= t - 1e-9


def test_floor_time_rejects_negative() -> None:
    with pytest.raises(InvalidConfigValue):
        floor_time(-1.0, SCHEDULE)


def test_counting_process_matches_toy_table(toy_dataset) -> None:
    long = to_counting_process(toy_dataset)
    assert public_columns(long) == list(TOY_LONG.columns)
    pd.testing.assert_frame_equal(
        long[public_columns(long)].reset_index(drop=True), TOY_LONG, check_dtype=False)
    assert long["_visit"].tolist() == [0, 1, 0, 0, 1, 2]
    assert long["_last"].tolist() == [False, True, True, False, False, True]


def test_expanded_table(toy_dataset) -> None:
    expanded = expand_counterfactual(to_counting_process(toy_dataset), 2)
    assert len(expanded) == 12
    assert list(expanded.columns[:6]) == ["id", "Start", "Stop", "Status", "A", HYPOTHETICAL]
    first, second = expanded.iloc[:6], expanded.iloc[6:]
    assert (first[HYPOTHETICAL] == first["A"]).all()
    assert second[HYPOTHETICAL].tolist() == [0, 0, 1, 0, 0, 0]
    assert (expanded["case_weight"] == 1.0).all()
    pd.testing.assert_frame_equal(
        first.drop(columns=[HYPOTHETICAL]).reset_index(drop=True),
        second.drop(columns=[HYPOTHETICAL]).reset_index(drop=True),
    )


def test_expanded_cardinality_for_three_levels(toy_dataset) -> None:
    long = to_counting_process(toy_dataset)
    expanded = expand_counterfactual(long, 3)
    assert len(expanded) == 3 * len(long)
    for _, block in expanded.groupby("_row"):
        assert sorted(block[HYPOTHETICAL].tolist()) == [0, 1, 2]
        assert block[HYPOTHETICAL].iloc[0] == block["A"].iloc[0]


def test_expand_rejects_single_level(toy_dataset) -> None:
    with pytest.raises(InvalidConfigValue):
        expand_counterfactual(to_counting_process(toy_dataset), 1)


def test_zero_followup_is_rejected(toy_dataset) -> None:
    subjects = list(toy_dataset.subjects)
    subjects[1] = replace(subjects[1], followup_time=0.0)
    with pytest.raises(DataFormatError):
        to_counting_process(replace(toy_dataset, subjects=tuple(subjects)))


def test_event_exactly_at_visit(toy_dataset) -> None:
    subjects = list(toy_dataset.subjects)
    subjects[0] = replace(subjects[0], followup_time=2.0)
    long = to_counting_process(replace(toy_dataset, subjects=tuple(subjects)))
    rows = long[long["id"] == "1"]
    assert rows["Start"].tolist() == [0.0, 1.0]
    assert rows["Stop"].tolist() == [1.0, 2.0]
    assert rows["Status"].tolist() == [0, 1]


def test_history_depth_one(toy_dataset) -> None:
    long = to_counting_process(toy_dataset, history_depth=1)
    assert public_columns(long) == ["id", "Start", "Stop", "Status", "A", "M_t", "L_t", "L_0"]


def test_rows_partition_followup(toy_dataset) -> None:
    long = to_counting_process(toy_dataset)
    for subject in toy_dataset.subjects:
        rows = long[long["id"] == subject.id]
        assert rows["Start"].iloc[0] == 0.0
        assert rows["Stop"].iloc[-1] == subject.followup_time
        assert (rows["Start"].to_numpy()[1:] == rows["Stop"].to_numpy()[:-1]).all()
        assert (rows["Status"].iloc[:-1] == 0).all()


def test_write_table_drops_internal_columns(toy_dataset, tmp_path) -> None:
    path = tmp_path / "long.csv"
    write_table(expand_counterfactual(to_counting_process(toy_dataset), 2), str(path))
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "id,Start,Stop,Status,A,Astar,M_t,M_t-1,L_t,L_t-1,L_0"
