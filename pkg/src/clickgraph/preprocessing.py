"""Early-dropout filtering, early-level truncation and 13-channel encoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .core import (
    CHANNEL, FAIL, N_ACTIONS, SECONDS_PER_DAY, SECONDS_PER_WEEK,
    ClickstreamError, CourseSchedule, StudentTimeSeries,
)

log = logging.getLogger(__name__)

VIDEO_ID_CH, PROBLEM_ID_CH, SUBMISSION_CH = 10, 11, 12
N_CHANNELS = 13
CHANNEL_NAMES = (*CHANNEL, "VideoID", "ProblemID", "SubmissionNum")
SUBMISSION_CLAMP = 10


@dataclass(frozen=True)
class EarlyLevel:
    e: float

    def __post_init__(self):
        if not 0 < self.e <= 100:
            raise ValueError(f"early level must lie in (0, 100], got {self.e}")

    def horizon_seconds(self, schedule: CourseSchedule) -> float:
        return self.e / 100.0 * schedule.n_weeks * SECONDS_PER_WEEK


def truncate(series: StudentTimeSeries, schedule: CourseSchedule, level: EarlyLevel) -> StudentTimeSeries:
    h = level.horizon_seconds(schedule)
    kept = [i for i in series.interactions if i.t <= h]
    return StudentTimeSeries(series.student_id, kept, series.label)


# ---------------------------------------------------------------- encoding

@dataclass
class EncodedSeries:
    """Flat (time, channel, value) observations; ``event`` maps each back to its interaction."""

    times: np.ndarray
    channels: np.ndarray
    values: np.ndarray
    event: np.ndarray
    student_id: str = ""
    label: int = 0

    @property
    def length(self) -> int:
        return len(self.times)

    @property
    def timestamps(self) -> np.ndarray:
        return np.unique(self.times)

    @property
    def mask(self) -> np.ndarray:
        """Observed flag per (distinct timestamp, channel)."""
        ts = self.timestamps
        m = np.zeros((len(ts), N_CHANNELS), bool)
        m[np.searchsorted(ts, self.times), self.channels] = True
        return m

    @property
    def n_events(self) -> int:
        return int(self.event.max()) + 1 if self.length else 0


def encode(series: StudentTimeSeries, schedule: CourseSchedule) -> EncodedSeries:
    nv, np_ = max(schedule.n_videos, 1), max(schedule.n_problems, 1)
    times, chans, vals, ev = [], [], [], []
    for k, inter in enumerate(series.interactions):
        day = inter.t / SECONDS_PER_DAY
        times.append(day); chans.append(inter.channel); vals.append(1.0); ev.append(k)
        if inter.video_id is not None:
            if not 0 <= inter.video_id < schedule.n_videos:
                raise ClickstreamError(f"video index {inter.video_id} outside schedule")
            times.append(day); chans.append(VIDEO_ID_CH); vals.append((inter.video_id + 1) / nv); ev.append(k)
        if inter.problem_id is not None:
            if not 0 <= inter.problem_id < schedule.n_problems:
                raise ClickstreamError(f"problem index {inter.problem_id} outside schedule")
            times.append(day); chans.append(PROBLEM_ID_CH); vals.append((inter.problem_id + 1) / np_); ev.append(k)
            sub = min(inter.submission_num, SUBMISSION_CLAMP) / SUBMISSION_CLAMP
            times.append(day); chans.append(SUBMISSION_CH); vals.append(sub); ev.append(k)
    return EncodedSeries(
        times=np.asarray(times, float), channels=np.asarray(chans, np.int64),
        values=np.asarray(vals, float), event=np.asarray(ev, np.int64),
        student_id=series.student_id, label=series.label,
    )


# ---------------------------------------------------------------- early-dropout filter

@dataclass
class FilterReport:
    weeks: int
    threshold: float
    n_removed: int
    precision_on_removed: float | None
    cutoff: float | None = None
    heldout_precision: float | None = None
    grid: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"weeks": self.weeks, "threshold": self.threshold, "n_removed": self.n_removed,
                "precision_on_removed": self.precision_on_removed, "cutoff": self.cutoff,
                "heldout_precision": self.heldout_precision, "grid": self.grid}


def assignment_features(students, weeks: int) -> np.ndarray:
    """Counts from the first ``weeks`` weeks: IsAssignment events, IsQuiz events, graded problems touched."""
    h = weeks * SECONDS_PER_WEEK
    X = np.zeros((len(students), 3))
    for r, s in enumerate(students):
        graded = set()
        for i in s.interactions:
            if i.t > h:
                break
            if i.action == "IsAssignment":
                X[r, 0] += 1
                graded.add(i.problem_id)
            elif i.action == "IsQuiz":
                X[r, 1] += 1
        X[r, 2] = len(graded)
    return X


def _fit(X, y):
    # log1p keeps the heavy-tailed counts in a range where lbfgs converges quickly
    return LogisticRegression(C=1.0, max_iter=1000).fit(np.log1p(X), y)


def wilson_lower(successes: int, n: int, z: float = 1.0) -> float:
    """One-sided Wilson lower confidence bound for a binomial proportion."""
    if n == 0:
        return 0.0
    p = successes / n
    denom = 1 + z * z / n
    centre = p + z * z / (2 * n)
    spread = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return float((centre - spread) / denom)


def _calibrated_cutoff(p_fail: np.ndarray, y: np.ndarray, threshold: float, min_removed: int, z: float):
    """Lowest probability cutoff whose removed set {p >= cutoff} keeps fail precision >= threshold.

    Precision is judged by its Wilson lower bound so the operating point does
    not sit on the edge of the held-out estimate.
    """
    order = np.argsort(-p_fail, kind="stable")
    ps, ys = p_fail[order], y[order]
    best = None
    fails = 0
    for k in range(len(ps)):
        fails += ys[k]
        # only evaluate at the end of a block of tied probabilities
        if k + 1 < len(ps) and ps[k + 1] == ps[k]:
            continue
        n = k + 1
        if n >= min_removed and wilson_lower(fails, n, z) >= threshold:
            best = (float(ps[k]), fails / n)
    return best


def _filter_once(students, labels, weeks, threshold, seed, min_removed, z):
    """Out-of-fold fail probabilities and the calibrated cutoff (None when no cutoff qualifies)."""
    X = assignment_features(students, weeks)
    y = labels
    if X.sum() == 0:
        log.warning("no student has assignment activity in the first %d weeks; nothing removed", weeks)
        return None, None, None
    if len(np.unique(y)) < 2:
        return None, None, None
    n_splits = int(min(5, np.bincount(y).min()))
    if n_splits < 2:
        return None, None, None
    oof = np.zeros(len(y))
    for tr, te in StratifiedKFold(n_splits, shuffle=True, random_state=seed).split(X, y):
        oof[te] = _fit(X[tr], y[tr]).predict_proba(np.log1p(X[te]))[:, 1]
    found = _calibrated_cutoff(oof, y, threshold, min_removed, z)
    if found is None:
        return oof, None, None
    return oof, found[0], found[1]


def early_dropout_filter(students: list[StudentTimeSeries], weeks: int = 2, accuracy_threshold: float = 0.99,
                         seed: int = 0, min_removed: int = 10, z: float = 0.5):
    """Remove students confidently predicted to fail from early assignment activity.

    Each student is scored by a model that never saw them (5-fold cross-fitting)
    and the probability cutoff is calibrated on those same held-out scores, so
    the fail precision of the removed set is the held-out precision.
    Returns (kept, removed, FilterReport).
    """
    if weeks < 1:
        raise ValueError("weeks must be >= 1")
    if not 0.5 < accuracy_threshold <= 1.0:
        raise ValueError("accuracy_threshold must lie in (0.5, 1]")
    y = np.array([s.label for s in students], int)
    oof, cutoff, held = _filter_once(students, y, weeks, accuracy_threshold, seed, min_removed, z)
    if cutoff is None:
        return list(students), [], FilterReport(weeks, accuracy_threshold, 0, None)
    drop = oof >= cutoff
    kept = [s for s, d in zip(students, drop) if not d]
    removed = [s for s, d in zip(students, drop) if d]
    prec = float(np.mean([s.label == FAIL for s in removed]))
    return kept, removed, FilterReport(weeks, accuracy_threshold, len(removed), prec, cutoff, float(held))


def select_filter(students, weeks_grid=(1, 2, 3), threshold_grid=(0.97, 0.98, 0.99), precision_floor=0.99,
                  seed: int = 0):
    """Grid-search the filter operating point.

    Picks the point removing the most students whose held-out precision stays
    above ``precision_floor``; falls back to weeks=2, threshold=0.99.
    """
    y = np.array([s.label for s in students], int)
    grid, best = [], None
    for w in weeks_grid:
        for thr in threshold_grid:
            oof, cutoff, held = _filter_once(students, y, w, thr, seed, 10, 0.5)
            n = 0 if cutoff is None else int((oof >= cutoff).sum())
            grid.append({"weeks": w, "threshold": thr, "n_removed": n,
                         "heldout_precision": None if held is None else float(held)})
            if held is not None and held >= precision_floor:
                key = (n, -w, thr)
                if best is None or key > best[0]:
                    best = (key, w, thr)
    w, thr = (best[1], best[2]) if best else (2, 0.99)
    kept, removed, report = early_dropout_filter(students, w, thr, seed=seed)
    report.grid = grid
    return kept, removed, report


__all__ = [
    "EarlyLevel", "EncodedSeries", "FilterReport", "truncate", "encode", "early_dropout_filter",
    "select_filter", "assignment_features", "N_CHANNELS", "CHANNEL_NAMES", "N_ACTIONS",
]
