"""Seeded synthetic course generator with planted behavioural causes.

Every student is driven by a :class:`LearnerProfile`. Session starts follow an
inhomogeneous Poisson process (thinning) whose rate is the product of an
effort level, a weekly consistency envelope, and a weekday x hour-of-day
von Mises kernel whose concentration grows with regularity. Problem attempts
are scheduled per problem around its release, shifted by proactivity. Labels
come from a logistic model over the profile.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import i0

from .core import (
    FAIL, SECONDS_PER_DAY, SECONDS_PER_WEEK, ClickstreamError, CourseSchedule, Interaction,
    LearningObject, StudentTimeSeries,
)

DIMENSIONS = ("effort", "consistency", "regularity", "proactivity", "control", "assessment")
CONSISTENCY_SHAPES = ("uniform", "first_half", "second_half")


@dataclass
class LearnerProfile:
    effort: float
    consistency: tuple[float, float, float]
    regularity: float
    proactivity: float
    control: float
    assessment: float
    noise_level: float = 0.0
    early_dropout: bool = False

    def __post_init__(self):
        self.consistency = tuple(float(w) for w in self.consistency)
        for name in ("effort", "regularity", "proactivity", "control", "assessment", "noise_level"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if len(self.consistency) != 3 or min(self.consistency) < 0 or abs(sum(self.consistency) - 1) > 1e-9:
            raise ValueError("consistency mixture weights must be 3 non-negatives summing to 1")

    def as_vector(self) -> np.ndarray:
        """Label-model inputs; consistency enters through its second-half weight."""
        return np.array([self.effort, self.consistency[2], self.regularity,
                         self.proactivity, self.control, self.assessment])


@dataclass
class GeneratorConfig:
    n_students: int = 2000
    n_weeks: int = 10
    n_videos: int = 30
    n_problems: int = 30
    label_weights: tuple = (-4.0, 0.0, 0.0, 0.0, 0.0, -4.0)
    label_bias: float = 4.0
    early_dropout_fraction: float = 0.0
    seed: int = 0
    course_id: str = "SYN"
    iteration: int = 0
    # fixes chosen profile fields for every student (e.g. {"effort": 0.9})
    profile_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.label_weights = tuple(float(w) for w in self.label_weights)
        if self.n_students < 1:
            raise ClickstreamError("n_students must be >= 1")
        if self.n_weeks < 1:
            raise ClickstreamError("n_weeks must be >= 1")
        if len(self.label_weights) != 6:
            raise ClickstreamError("label_weights needs one coefficient per dimension (6)")
        if not 0.0 <= self.early_dropout_fraction <= 1.0:
            raise ClickstreamError("early_dropout_fraction must lie in [0, 1]")
        if self.n_videos < 0 or self.n_problems < 0:
            raise ClickstreamError("object counts must be non-negative")
        if self.n_videos == 0:
            effort = self.profile_overrides.get("effort")
            if effort is None or effort > 0:
                raise ClickstreamError("infeasible config: no videos to realise nonzero effort")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- schedule

def make_schedule(config: GeneratorConfig) -> CourseSchedule:
    rng = np.random.default_rng([config.seed, 0xC0])
    objects = []
    for i in range(config.n_videos):
        week = 1 + (i * config.n_weeks) // config.n_videos
        objects.append(LearningObject(f"v{i:03d}", "video", week,
                                      duration_seconds=float(rng.integers(300, 901))))
    for j in range(config.n_problems):
        week = 1 + (j * config.n_weeks) // config.n_problems
        objects.append(LearningObject(f"p{j:03d}", "problem", week,
                                      deadline_week=min(week + 1, config.n_weeks),
                                      is_graded=(j % 2 == 0)))
    return CourseSchedule(config.course_id, config.iteration, config.n_weeks, objects)


# ---------------------------------------------------------------- profiles

def sample_profile(config: GeneratorConfig, index: int) -> LearnerProfile:
    rng = np.random.default_rng([config.seed, index, 1])
    vals = rng.uniform(size=6)
    mix = rng.dirichlet(np.ones(3))
    p = dict(effort=vals[0], regularity=vals[1], proactivity=vals[2], control=vals[3],
             assessment=vals[4], noise_level=0.3 * vals[5], consistency=tuple(mix))
    for k, v in config.profile_overrides.items():
        if k not in p:
            raise ClickstreamError(f"unknown profile field {k!r}")
        p[k] = tuple(v) if k == "consistency" else float(v)
    return LearnerProfile(**p)


def dropout_indices(config: GeneratorConfig) -> set[int]:
    k = int(round(config.early_dropout_fraction * config.n_students))
    order = np.random.default_rng([config.seed, 0xD0]).permutation(config.n_students)
    return set(order[:k].tolist())


# ---------------------------------------------------------------- rate model

def weekly_envelope(weights, n_weeks: int) -> np.ndarray:
    """Mean-one per-week multiplier mixing uniform, front-loaded and back-loaded shapes."""
    pos = (np.arange(n_weeks) + 0.5) / n_weeks
    shapes = np.stack([np.ones(n_weeks), 2.0 * (1.0 - pos), 2.0 * pos])
    env = np.asarray(weights) @ shapes
    return env / env.mean()


class TimeKernel:
    """Weekday x hour-of-day von Mises bumps, mean close to one over a week."""

    def __init__(self, regularity: float, rng: np.random.Generator):
        self.kappa = 5.0 * regularity
        self.day_mu = float(rng.integers(0, 7))
        self.hour_mu = float(rng.uniform(8.0, 22.0))
        self.norm = float(i0(self.kappa) ** 2)
        self.peak = float(np.exp(2 * self.kappa) / self.norm)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        day = (t / SECONDS_PER_DAY) % 7.0
        hour = (t / 3600.0) % 24.0
        k = self.kappa
        return np.exp(k * np.cos(2 * np.pi * (day - self.day_mu) / 7.0)
                      + k * np.cos(2 * np.pi * (hour - self.hour_mu) / 24.0)) / self.norm


def thinned_arrivals(rng, rate_fn, rate_max: float, start: float, end: float) -> np.ndarray:
    """Arrival times on [start, end) of a Poisson process with intensity rate_fn (per second)."""
    span = end - start
    if span <= 0 or rate_max <= 0:
        return np.empty(0)
    n = rng.poisson(rate_max * span)
    cand = np.sort(rng.uniform(start, end, size=n))
    keep = rng.uniform(size=n) * rate_max < rate_fn(cand)
    return cand[keep]


def sample_in_window(rng, kernel: TimeKernel, start: float, end: float) -> float:
    """One time in [start, end) drawn with density proportional to the kernel."""
    peak = kernel.peak
    for _ in range(50):
        t = rng.uniform(start, end, size=64)
        hit = np.flatnonzero(rng.uniform(size=64) * peak < kernel(t))
        if hit.size:
            return float(t[hit[0]])
    return float(rng.uniform(start, end))


# ---------------------------------------------------------------- streams

def _watch_video(rng, t0: float, video_idx: int, video: LearningObject, profile: LearnerProfile):
    """Events for one viewing starting at t0; returns (events, end time)."""
    dur = video.duration_seconds
    oid = video.object_id
    jitter = rng.normal(0.0, 0.1 * (1 + profile.noise_level))
    frac = float(np.clip(0.25 + 0.7 * profile.control + jitter, 0.05, 1.0))
    watch = frac * dur
    ev = [(t0, "Load")]
    t_play = t0 + rng.uniform(2, 10)
    ev.append((t_play, "Play"))
    if rng.uniform() < 0.05 + 0.1 * profile.effort:
        ev.append((t0 + rng.uniform(0, 2), "Download"))
    pause_rate = 2.0 + 28.0 * profile.control  # per watched hour
    n_pause = rng.poisson(pause_rate * watch / 3600.0)
    offsets = np.sort(rng.uniform(0, watch, size=n_pause))
    n_seek = rng.poisson(0.2 + 2.0 * profile.control)
    n_speed = rng.poisson(0.1 + 2.0 * profile.control)
    n_stall = rng.poisson(0.1)
    n_err = rng.poisson(0.03)
    paused = 0.0
    for off in offsets:
        tp = t_play + off + paused
        ev.append((tp, "Pause"))
        gap = rng.uniform(5, 60)
        ev.append((tp + gap, "Play"))
        paused += gap
    span = watch + paused
    for name, n in (("Seek", n_seek), ("SpeedChange", n_speed), ("Stalled", n_stall), ("Error", n_err)):
        for off in rng.uniform(0, span, size=n):
            ev.append((t_play + off, name))
    t_end = t_play + span
    ev.append((t_end, "Pause"))
    events = [Interaction(t, a, oid, video_id=video_idx) for t, a in ev]
    return events, t_end


def _attempt_problem(rng, t0: float, prob_idx: int, problem: LearningObject, profile: LearnerProfile):
    action = "IsAssignment" if problem.is_graded else "IsQuiz"
    q = 0.15 + 0.8 * profile.assessment
    events = []
    t = t0
    for k in range(1, 6):
        events.append(Interaction(t, action, problem.object_id, problem_id=prob_idx, submission_num=k))
        if rng.uniform() < q:
            break
        t += rng.uniform(60, 600)
    return events


def _video_sessions(rng, schedule, profile, kernel, starts, t_limit):
    videos = schedule.videos
    if not videos:
        return []
    release = np.array([v.release_week for v in videos])
    watched = np.zeros(len(videos), bool)
    shift_weeks = (profile.proactivity - 0.5) * 4.0
    events = []
    for ts in starts:
        week = ts / SECONDS_PER_WEEK + 1.0
        target = week + shift_weeks + rng.normal(0, 0.3 + profile.noise_level)
        eligible = np.flatnonzero(release <= max(target, 1.0))
        t = ts
        for _ in range(1 + rng.poisson(0.6 * profile.effort)):
            fresh = eligible[~watched[eligible]]
            idx = int(fresh[0]) if fresh.size else int(rng.choice(eligible))
            watched[idx] = True
            ev, t = _watch_video(rng, t, idx, videos[idx], profile)
            events.extend(ev)
            t += rng.uniform(10, 120)
            if t >= t_limit:
                break
    return events


def generate_student(config: GeneratorConfig, schedule: CourseSchedule, index: int,
                     profile: LearnerProfile) -> list[Interaction]:
    """Pure function of (config, schedule, index, profile)."""
    t_end = schedule.duration_seconds
    rng_time = np.random.default_rng([config.seed, index, 2])
    rng_video = np.random.default_rng([config.seed, index, 3])
    rng_prob = np.random.default_rng([config.seed, index, 4])
    kernel = TimeKernel(profile.regularity, rng_time)
    noise_mult = float(np.exp(rng_time.normal(0.0, profile.noise_level)))

    if profile.early_dropout:
        horizon = min(2 * SECONDS_PER_WEEK, t_end)
        n = 1 + rng_time.poisson(2.0)
        starts = np.sort([sample_in_window(rng_time, kernel, 0.0, horizon) for _ in range(n)])
        events = _video_sessions(rng_video, schedule, profile, kernel, starts, horizon)
        return [e for e in events if e.t < horizon]

    env = weekly_envelope(profile.consistency, schedule.n_weeks)
    per_week = (0.5 + 4.5 * profile.effort) * noise_mult
    base = per_week / SECONDS_PER_WEEK

    def rate(t):
        w = np.minimum((t // SECONDS_PER_WEEK).astype(int), schedule.n_weeks - 1)
        return base * env[w] * kernel(t)

    starts = thinned_arrivals(rng_time, rate, base * env.max() * kernel.peak, 0.0, t_end)
    events = _video_sessions(rng_video, schedule, profile, kernel, starts, t_end)

    shift_days = (0.5 - profile.proactivity) * 6.0
    for j, prob in enumerate(schedule.problems):
        p_attempt = 0.9 + 0.1 * profile.assessment if prob.is_graded else 0.6 + 0.4 * profile.assessment
        if rng_prob.uniform() >= p_attempt:
            continue
        anchor = (prob.release_week - 1) * SECONDS_PER_WEEK
        centre = anchor + (rng_prob.uniform(0, 7) + shift_days) * SECONDS_PER_DAY
        lo = float(np.clip(centre - 0.5 * SECONDS_PER_DAY, 0.0, t_end - 3600.0))
        t0 = sample_in_window(rng_prob, kernel, lo, lo + SECONDS_PER_DAY)
        events.extend(_attempt_problem(rng_prob, t0, j, prob, profile))
    return [e for e in events if e.t < t_end]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def draw_label(config: GeneratorConfig, index: int, profile: LearnerProfile) -> int:
    if profile.early_dropout:
        return FAIL
    rng = np.random.default_rng([config.seed, index, 5])
    p_fail = _sigmoid(np.dot(config.label_weights, profile.as_vector()) + config.label_bias)
    return int(rng.uniform() < p_fail)


def generate_course(config: GeneratorConfig):
    """Return (schedule, students, profiles), students ordered by id."""
    schedule = make_schedule(config)
    dropouts = dropout_indices(config)
    width = max(4, len(str(config.n_students - 1)))
    students, profiles = [], []
    for i in range(config.n_students):
        profile = sample_profile(config, i)
        profile.early_dropout = i in dropouts
        events = generate_student(config, schedule, i, profile)
        students.append(StudentTimeSeries(f"s{i:0{width}d}", events, draw_label(config, i, profile)))
        profiles.append(profile)
    return schedule, students, profiles


def write_profiles(path, students, profiles) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "effort", "consistency_uniform", "consistency_first_half",
                    "consistency_second_half", "regularity", "proactivity", "control",
                    "assessment", "noise_level", "early_dropout"])
        for s, p in zip(students, profiles):
            w.writerow([s.student_id, p.effort, *p.consistency, p.regularity, p.proactivity,
                        p.control, p.assessment, p.noise_level, int(p.early_dropout)])
