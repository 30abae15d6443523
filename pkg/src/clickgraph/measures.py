"""Per-student behavioural measures over six learning dimensions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    SECONDS_PER_DAY, SECONDS_PER_WEEK, VIDEO_ACTIONS, CourseSchedule, StudentTimeSeries,
)

SESSION_GAP = 30 * 60.0
WATCH_CAP_FACTOR = 2.0

MEASURES_BY_DIMENSION = {
    "effort": ("total_time_online", "total_video_clicks"),
    "consistency": ("mean_session_duration", "relative_time_online", "relative_video_clicks"),
    "regularity": ("periodicity_week_day", "periodicity_week_hour", "periodicity_day_hour"),
    "proactivity": ("content_anticipation", "delay_lecture_view"),
    "control": ("frac_time_video", "pause_frequency", "avg_change_rate"),
    "assessment": ("competency_strength", "student_shape"),
}
MEASURE_NAMES = tuple(m for ms in MEASURES_BY_DIMENSION.values() for m in ms)
UNIT_INTERVAL = (
    "relative_time_online", "relative_video_clicks", "periodicity_week_day", "periodicity_week_hour",
    "periodicity_day_hour", "frac_time_video", "competency_strength", "student_shape",
)

_VIDEO = frozenset(VIDEO_ACTIONS)


@dataclass
class MeasureVector:
    student_id: str
    values: dict = field(default_factory=dict)
    empty: bool = False

    def __getitem__(self, name):
        return self.values[name]

    def as_array(self) -> np.ndarray:
        return np.array([self.values[m] for m in MEASURE_NAMES])


def session_ids(times: np.ndarray, gap: float = SESSION_GAP) -> np.ndarray:
    """Session index per event: a new session starts after any gap >= ``gap``."""
    if len(times) == 0:
        return np.zeros(0, np.int64)
    return np.concatenate([[0], np.cumsum(np.diff(times) >= gap)])


def periodicity(bins: np.ndarray, n_bins: int) -> float:
    """1 - normalised entropy of the histogram of ``bins``."""
    if len(bins) == 0:
        return 0.0
    p = np.bincount(bins, minlength=n_bins) / len(bins)
    p = p[p > 0]
    return float(1.0 - (-(p * np.log(p)).sum()) / math.log(n_bins))


def _first_half_share(x: np.ndarray, t: np.ndarray, midpoint: float) -> float:
    total = x.sum()
    if total <= 0:
        return 0.5
    return float(x[t < midpoint].sum() / total)


def compute_measures(series: StudentTimeSeries, schedule: CourseSchedule, horizon: float | None = None,
                     sessions: np.ndarray | None = None) -> MeasureVector:
    """Measures over ``series``; ``horizon`` (seconds) bounds the observed course span.

    ``sessions`` may carry precomputed session ids so that slices of a longer
    stream keep the session structure of the full stream.
    """
    if horizon is None:
        horizon = schedule.duration_seconds
    inter = series.interactions
    n = len(inter)
    if n == 0:
        return MeasureVector(series.student_id, {m: 0.0 for m in MEASURE_NAMES}, empty=True)

    t = series.times()
    sid = session_ids(t) if sessions is None else np.asarray(sessions)
    same = np.diff(sid) == 0
    gaps = np.diff(t)
    # time online attributed to the earlier event of each within-session pair
    online = np.concatenate([np.where(same, gaps, 0.0), [0.0]])
    sess_dur = np.bincount(sid - sid[0], weights=online)
    sess_dur = sess_dur[np.bincount(sid - sid[0]) > 0]

    is_video = np.fromiter((i.action in _VIDEO for i in inter), bool, n)
    mid = horizon / 2.0

    v = {}
    v["total_time_online"] = online.sum() / 3600.0
    v["total_video_clicks"] = float(is_video.sum())
    v["mean_session_duration"] = float(sess_dur.mean() / 60.0)
    v["relative_time_online"] = _first_half_share(online, t, mid)
    v["relative_video_clicks"] = _first_half_share(is_video.astype(float), t, mid)

    hour_of_week = (t // 3600.0).astype(np.int64) % 168
    v["periodicity_week_day"] = periodicity(hour_of_week // 24, 7)
    v["periodicity_week_hour"] = periodicity(hour_of_week, 168)
    v["periodicity_day_hour"] = periodicity(hour_of_week % 24, 24)

    videos = schedule.videos
    first_view, watch, pauses, speed = {}, {}, 0, 0
    prev = None
    for k, i in enumerate(inter):
        if i.video_id is None:
            continue
        first_view.setdefault(i.video_id, i.t)
        if i.action == "Pause":
            pauses += 1
        elif i.action == "SpeedChange":
            speed += 1
        if prev is not None and inter[prev].video_id == i.video_id and sid[prev] == sid[k] and prev == k - 1:
            cap = WATCH_CAP_FACTOR * videos[i.video_id].duration_seconds
            watch[i.video_id] = watch.get(i.video_id, 0.0) + min(i.t - inter[prev].t, cap)
        prev = k

    if first_view:
        lead = np.array([((videos[vid].release_week - 1) * SECONDS_PER_WEEK - tv) / SECONDS_PER_DAY
                         for vid, tv in first_view.items()])
        v["content_anticipation"] = float(lead.mean())
        v["delay_lecture_view"] = float(np.maximum(-lead, 0.0).mean())
    else:
        v["content_anticipation"] = v["delay_lecture_view"] = 0.0

    released = [o for o in videos if (o.release_week - 1) * SECONDS_PER_WEEK < horizon]
    scheduled = sum(o.duration_seconds for o in released)
    capped = sum(min(w, videos[vid].duration_seconds) for vid, w in watch.items())
    v["frac_time_video"] = float(min(capped / scheduled, 1.0)) if scheduled > 0 else 0.0
    watched_hours = sum(watch.values()) / 3600.0
    v["pause_frequency"] = pauses / watched_hours if watched_hours > 0 else 0.0
    v["avg_change_rate"] = speed / len(first_view) if first_view else 0.0

    graded_ids = {j for j, o in enumerate(schedule.problems) if o.is_graded
                  and (o.release_week - 1) * SECONDS_PER_WEEK < horizon}
    max_sub: dict = {}
    for i in inter:
        if i.problem_id is not None and i.problem_id in graded_ids:
            max_sub[i.problem_id] = max(max_sub.get(i.problem_id, 0), i.submission_num)
    v["competency_strength"] = (sum(s == 1 for s in max_sub.values()) / len(max_sub)) if max_sub else 0.0
    v["student_shape"] = len(max_sub) / len(graded_ids) if graded_ids else 0.0

    return MeasureVector(series.student_id, {m: float(v[m]) for m in MEASURE_NAMES})


def weekly_features(series: StudentTimeSeries, schedule: CourseSchedule, level) -> np.ndarray:
    """[weeks x 15] matrix of measures restricted to each week up to the level horizon.

    Events are assigned to the week in which their session started, so
    additive measures sum exactly to their full-course values.
    """
    horizon = level.horizon_seconds(schedule)
    if horizon < SECONDS_PER_WEEK - 1e-6:
        raise ValueError("early level horizon shorter than one week")
    n_rows = int(math.ceil(horizon / SECONDS_PER_WEEK - 1e-9))
    out = np.zeros((n_rows, len(MEASURE_NAMES)))
    kept = [i for i in series.interactions if i.t <= horizon]
    if not kept:
        return out
    t = np.array([i.t for i in kept])
    sid = session_ids(t)
    starts = t[np.unique(sid, return_index=True)[1]]
    week_of = np.minimum((starts[sid] // SECONDS_PER_WEEK).astype(int), n_rows - 1)
    for w in range(n_rows):
        idx = np.flatnonzero(week_of == w)
        if idx.size == 0:
            continue
        sub = StudentTimeSeries(series.student_id, [kept[k] for k in idx], series.label)
        out[w] = compute_measures(sub, schedule, horizon, sessions=sid[idx]).as_array()
    return out


def measure_table(students, schedule: CourseSchedule, horizon: float | None = None) -> list[MeasureVector]:
    return [compute_measures(s, schedule, horizon) for s in students]


def write_measures(path, measures: list[MeasureVector]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", *MEASURE_NAMES, "empty"])
        for m in measures:
            w.writerow([m.student_id, *(repr(m.values[k]) for k in MEASURE_NAMES), int(m.empty)])


def read_measures(path) -> list[MeasureVector]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MeasureVector(row["student_id"], {k: float(row[k]) for k in MEASURE_NAMES},
                                     empty=bool(int(row["empty"]))))
    return out
