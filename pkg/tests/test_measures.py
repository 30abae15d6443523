import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickgraph.core import SECONDS_PER_DAY, SECONDS_PER_WEEK, VIDEO_ACTIONS
from clickgraph.measures import (
    MEASURE_NAMES, UNIT_INTERVAL, compute_measures, periodicity, read_measures, session_ids, weekly_features,
    write_measures,
)
from clickgraph.preprocessing import EarlyLevel
from clickgraph.synthgen import GeneratorConfig, generate_course
from helpers import make_schedule, problem, series, video

H = 3600.0


def test_fifteen_measures():
    assert len(MEASURE_NAMES) == 15 == len(set(MEASURE_NAMES))


def test_empty_series_flagged_zero():
    m = compute_measures(series("a", []), make_schedule())
    assert m.empty
    assert all(m[k] == 0.0 for k in MEASURE_NAMES)


def test_session_gap_rule():
    t = np.array([0, 100, 100 + 1799, 100 + 1799 + 1800, 10**5])
    assert list(session_ids(t)) == [0, 0, 0, 1, 2]


def test_two_sessions_of_ten_and_twenty_minutes():
    # session 1 spans 600 s, session 2 spans 1200 s; they are 2 h apart
    ev = [video(0), video(300), video(600), video(3 * H), video(3 * H + 1200)]
    m = compute_measures(series("a", ev), make_schedule())
    assert m["mean_session_duration"] == pytest.approx(15.0)
    assert m["total_time_online"] == pytest.approx(0.5)


def test_single_weekday_slot_is_maximally_periodic():
    ev = [video(w * SECONDS_PER_WEEK + 9 * H + k) for w in range(3) for k in (0, 60)]
    m = compute_measures(series("a", ev), make_schedule())
    assert m["periodicity_week_day"] == pytest.approx(1.0)
    assert m["periodicity_week_hour"] == pytest.approx(1.0)
    assert m["periodicity_day_hour"] == pytest.approx(1.0)


def test_uniform_histogram_has_zero_periodicity():
    assert periodicity(np.arange(7), 7) == pytest.approx(0.0)
    assert periodicity(np.zeros(0, int), 7) == 0.0


def test_proactivity_signs():
    sch = make_schedule(videos=(2, 3), problems=(1,), graded=(True,))
    # video 0 released at day 7 viewed at day 5, video 1 released at day 14 viewed at day 17
    m = compute_measures(series("a", [video(5 * SECONDS_PER_DAY, vid=0), video(17 * SECONDS_PER_DAY, vid=1)]), sch)
    assert m["content_anticipation"] == pytest.approx((2 - 3) / 2)
    assert m["delay_lecture_view"] == pytest.approx(3 / 2)


def test_control_and_assessment_hand_values():
    sch = make_schedule(videos=(1, 1), problems=(1, 1), graded=(True, True), durations=(600.0, 600.0))
    ev = [video(0, "Play"), video(300, "Pause"), video(360, "SpeedChange"), video(600, "Play", vid=1),
          problem(700, pid=0, sub=1), problem(800, pid=1, sub=1), problem(900, pid=1, sub=2)]
    m = compute_measures(series("a", ev), sch)
    # watch: 300 + 60 on video 0 (the 240 s hop to video 1 is not same-video)
    assert m["frac_time_video"] == pytest.approx(360 / 1200)
    assert m["pause_frequency"] == pytest.approx(1 / (360 / H))
    assert m["avg_change_rate"] == pytest.approx(0.5)
    assert m["competency_strength"] == pytest.approx(0.5)
    assert m["student_shape"] == pytest.approx(1.0)


def test_watch_gap_capped():
    sch = make_schedule(durations=(100.0, 100.0))
    m = compute_measures(series("a", [video(0), video(1000)]), sch)
    assert m["frac_time_video"] == pytest.approx(100 / 200)  # capped gap 200, then capped at duration 100


def test_effort_cohorts_ordered():
    kw = dict(n_students=80, n_weeks=6, n_videos=12, n_problems=12, seed=9)
    sch, lo, _ = generate_course(GeneratorConfig(profile_overrides={"effort": 0.1}, **kw))
    _, hi, _ = generate_course(GeneratorConfig(profile_overrides={"effort": 0.9}, **kw))
    mean = lambda cohort: np.mean([compute_measures(s, sch)["total_video_clicks"] for s in cohort])  # noqa: E731
    assert mean(hi) > mean(lo)


def test_weekly_rows_at_forty_percent():
    sch = make_schedule(n_weeks=10)
    assert weekly_features(series("a", [video(1)]), sch, EarlyLevel(40)).shape == (4, 15)
    with pytest.raises(ValueError):
        weekly_features(series("a", []), make_schedule(n_weeks=2), EarlyLevel(40))


def test_week_one_only_gives_zero_later_rows():
    sch = make_schedule(n_weeks=10)
    f = weekly_features(series("a", [video(10), video(100), problem(200)]), sch, EarlyLevel(60))
    assert f[0].any()
    assert not f[1:].any()


def _random_student(rng, n_weeks=6, n_events=150):
    sch = make_schedule(n_weeks=n_weeks, videos=(1, 2, 3), problems=(1, 2), graded=(True, True),
                        durations=(300.0, 600.0, 900.0))
    t = np.sort(rng.uniform(0, sch.duration_seconds - 1, n_events))
    # bursts so that sessions contain several events
    t = np.sort(np.concatenate([t, t[: n_events // 2] + rng.uniform(1, 600, n_events // 2)]))
    t = t[t < sch.duration_seconds]
    ev = []
    for x in t:
        if rng.random() < 0.8:
            ev.append(video(x, VIDEO_ACTIONS[rng.integers(len(VIDEO_ACTIONS))], vid=int(rng.integers(3))))
        else:
            ev.append(problem(x, pid=int(rng.integers(2)), sub=int(rng.integers(0, 4)),
                              action=("IsAssignment", "IsQuiz")[rng.integers(2)]))
    return sch, series("a", ev)


@pytest.mark.parametrize("seed", range(5))
def test_weekly_additivity(seed):
    sch, s = _random_student(np.random.default_rng(seed))
    lvl = EarlyLevel(100)
    idx = {k: MEASURE_NAMES.index(k) for k in ("total_time_online", "total_video_clicks")}
    f = weekly_features(s, sch, lvl)
    full = compute_measures(s, sch)
    assert abs(f[:, idx["total_time_online"]].sum() - full["total_time_online"]) * H < 1.0
    assert f[:, idx["total_video_clicks"]].sum() == full["total_video_clicks"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 200))
def test_unit_interval_measures_bounded(seed, n):
    sch, s = _random_student(np.random.default_rng(seed), n_events=n)
    m = compute_measures(s, sch)
    for k in UNIT_INTERVAL:
        assert 0.0 <= m[k] <= 1.0, k
    assert np.isfinite(m.as_array()).all()
    assert m["delay_lecture_view"] >= 0


def test_measures_csv_round_trip(tmp_path):
    sch, s = _random_student(np.random.default_rng(1))
    rows = [compute_measures(s, sch), compute_measures(series("b", []), sch)]
    write_measures(tmp_path / "m.csv", rows)
    assert read_measures(tmp_path / "m.csv") == rows
