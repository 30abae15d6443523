import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickgraph.core import (
    ACTIONS, CHANNEL, PROBLEM_ACTIONS, VIDEO_ACTIONS, ClickstreamError, CourseSchedule, DatasetSplit,
    Interaction, StudentTimeSeries, fold_sizes, load_clickstream, split_students, write_events, write_labels,
)
from helpers import make_schedule, problem, video


def test_vocabulary_is_fixed():
    assert VIDEO_ACTIONS == ("Download", "Error", "Load", "Pause", "Play", "Seek", "SpeedChange", "Stalled")
    assert set(PROBLEM_ACTIONS) == {"IsAssignment", "IsQuiz"}
    assert sorted(CHANNEL.values()) == list(range(10))
    assert [CHANNEL[a] for a in ACTIONS] == list(range(10))


@pytest.mark.parametrize("kwargs", [
    dict(t=1.0, action="Play", object_id="v0"),                                   # no video id
    dict(t=1.0, action="Play", object_id="v0", video_id=0, problem_id=1),         # both ids
    dict(t=1.0, action="Play", object_id="v0", video_id=0, submission_num=1),     # stray submission
    dict(t=1.0, action="IsQuiz", object_id="p0", problem_id=0),                   # missing submission
    dict(t=-1.0, action="Play", object_id="v0", video_id=0),
    dict(t=1.0, action="Rewind", object_id="v0", video_id=0),
])
def test_interaction_rejects_bad_records(kwargs):
    with pytest.raises(ClickstreamError):
        Interaction(**kwargs)


def _write(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def _row(sid, t, action="Play", **kw):
    base = {"student_id": sid, "t": t, "action": action, "object_id": "v0",
            "video_id": 0, "problem_id": None, "submission_num": None}
    base.update(kw)
    return base


def test_load_three_events_one_student(tmp_path):
    sch = make_schedule()
    _write(tmp_path / "e.jsonl", [_row("a", 30.0), _row("a", 10.0, "Pause"), _row("a", 20.0)])
    out = load_clickstream(tmp_path / "e.jsonl", sch)
    assert len(out) == 1 and len(out[0]) == 3
    assert list(out[0].times()) == [10.0, 20.0, 30.0]


def test_load_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_clickstream(tmp_path / "e.jsonl", make_schedule()) == []


def test_unknown_action_names_line_and_token(tmp_path):
    _write(tmp_path / "e.jsonl", [_row("a", 1.0), _row("a", 2.0, "Rewind")])
    with pytest.raises(ClickstreamError, match=r"e\.jsonl:2:.*Rewind"):
        load_clickstream(tmp_path / "e.jsonl", make_schedule())


def test_timestamp_outside_course(tmp_path):
    sch = make_schedule(n_weeks=1, videos=(1,), problems=(1,), graded=(True,))
    _write(tmp_path / "e.jsonl", [_row("a", sch.duration_seconds + 1)])
    with pytest.raises(ClickstreamError, match=":1:.*outside"):
        load_clickstream(tmp_path / "e.jsonl", sch)


def test_malformed_json_line(tmp_path):
    (tmp_path / "e.jsonl").write_text(json.dumps(_row("a", 1.0)) + "\n{not json\n")
    with pytest.raises(ClickstreamError, match=":2:"):
        load_clickstream(tmp_path / "e.jsonl", make_schedule())


def test_missing_label_is_an_error(tmp_path):
    _write(tmp_path / "e.jsonl", [_row("a", 1.0)])
    (tmp_path / "l.csv").write_text("student_id,label\nb,1\n")
    with pytest.raises(ClickstreamError, match="no label"):
        load_clickstream(tmp_path / "e.jsonl", make_schedule(), tmp_path / "l.csv")


def test_round_trip(tmp_path):
    sch = make_schedule()
    students = [
        StudentTimeSeries("a", [video(5), problem(9, pid=1, sub=2), video(5, "Pause", vid=1)], 1),
        StudentTimeSeries("b", [problem(1, action="IsQuiz", sub=0)], 0),
    ]
    write_events(tmp_path / "e.jsonl", students)
    write_labels(tmp_path / "l.csv", students)
    sch.save(tmp_path / "s.json")
    back = load_clickstream(tmp_path / "e.jsonl", CourseSchedule.load(tmp_path / "s.json"), tmp_path / "l.csv")
    assert back == students
    assert CourseSchedule.load(tmp_path / "s.json") == sch


def test_sort_is_stable_for_equal_timestamps():
    a, b, c = video(5, "Play"), video(5, "Pause"), video(1, "Seek")
    s = StudentTimeSeries("x", [a, b, c])
    assert s.interactions == [c, a, b]


def test_schedule_validation():
    with pytest.raises(ClickstreamError):
        make_schedule(n_weeks=2, videos=(3,), problems=())


def _students(n):
    return [StudentTimeSeries(f"s{i:03d}", [], i % 2) for i in range(n)]


def test_split_100_students():
    sp = split_students(_students(100), seed=7)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == (80, 10, 10)


def test_split_23_students_rounding_rule():
    # floor gives 18/2/2; the one leftover student goes to train
    assert fold_sizes(23) == (19, 2, 2)
    sp = split_students(_students(23), seed=0)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == (19, 2, 2)


def test_split_deterministic_and_serialisable():
    a = split_students(_students(50), seed=3)
    assert a == split_students(_students(50), seed=3)
    assert DatasetSplit.from_dict(json.loads(json.dumps(a.to_dict()))) == a
    assert a != split_students(_students(50), seed=4)


def test_split_too_few():
    with pytest.raises(ClickstreamError):
        split_students(_students(9), seed=0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 400), seed=st.integers(0, 2**31 - 1))
def test_split_is_a_partition(n, seed):
    sp = split_students(_students(n), seed)
    folds = [set(sp.train), set(sp.validation), set(sp.test)]
    assert set().union(*folds) == {f"s{i:03d}" for i in range(n)}
    assert sum(len(f) for f in folds) == n
    for size, frac in zip(map(len, folds), (0.8, 0.1, 0.1)):
        assert abs(size - frac * n) <= 1
