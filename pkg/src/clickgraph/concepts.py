"""Concept cohorts: students matching a learning-dimension pattern, and random cohorts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .measures import MeasureVector

MIN_CONCEPT_SIZE = 100
START_THRESHOLD = 5
BAND = (40.0, 60.0)

TOP, BOTTOM, MIDDLE = "top", "bottom", "band"


@dataclass(frozen=True)
class PatternSpec:
    dimension: str
    pattern: str
    tails: tuple  # ((measure, TOP | BOTTOM | MIDDLE), ...)

    @property
    def name(self) -> str:
        return f"{self.dimension}/{self.pattern}"

    @property
    def measures(self) -> tuple:
        return tuple(m for m, _ in self.tails)


def _both(dimension, measures, high="higher", low="lower"):
    return [PatternSpec(dimension, high, tuple((m, TOP) for m in measures)),
            PatternSpec(dimension, low, tuple((m, BOTTOM) for m in measures))]


_SHARES = ("relative_time_online", "relative_video_clicks")

PATTERNS: tuple = tuple(
    _both("effort", ("total_time_online", "total_video_clicks"))
    + [PatternSpec("consistency", "uniform", tuple((m, MIDDLE) for m in _SHARES)),
       PatternSpec("consistency", "first_half", tuple((m, TOP) for m in _SHARES)),
       PatternSpec("consistency", "second_half", tuple((m, BOTTOM) for m in _SHARES))]
    + _both("regularity", ("periodicity_week_day", "periodicity_week_hour", "periodicity_day_hour"))
    + [PatternSpec("proactivity", "anticipated", (("content_anticipation", TOP), ("delay_lecture_view", BOTTOM))),
       PatternSpec("proactivity", "delayed", (("content_anticipation", BOTTOM), ("delay_lecture_view", TOP)))]
    + _both("control", ("frac_time_video", "pause_frequency", "avg_change_rate"))
    + _both("assessment", ("competency_strength", "student_shape"))
)
PATTERNS_BY_NAME = {p.name: p for p in PATTERNS}


@dataclass
class ConceptSubset:
    name: str
    student_ids: tuple
    t: float | None = None
    measures_used: tuple = ()
    insufficient: bool = False
    kind: str = "pattern"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.student_ids)

    def to_dict(self) -> dict:
        return {"name": self.name, "t": self.t, "student_ids": list(self.student_ids),
                "measures_used": list(self.measures_used), "insufficient": self.insufficient,
                "kind": self.kind, **({"meta": self.meta} if self.meta else {})}

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptSubset":
        return cls(d["name"], tuple(d["student_ids"]), d.get("t"), tuple(d.get("measures_used", ())),
                   bool(d.get("insufficient", False)), d.get("kind", "pattern"), d.get("meta", {}))


def tail_mask(x: np.ndarray, t: float, direction: str) -> np.ndarray:
    """Members of the t% tail of ``x``; ties on the boundary value are kept."""
    n = len(x)
    if direction == MIDDLE:
        widen = t - START_THRESHOLD
        lo, hi = max(BAND[0] - widen, 0.0), min(BAND[1] + widen, 100.0)
        a, b = np.percentile(x, [lo, hi], method="inverted_cdf")
        return (x >= a) & (x <= b)
    k = min(max(int(math.ceil(t * n / 100.0 - 1e-9)), 1), n)
    s = np.sort(x)
    if direction == TOP:
        return x >= s[n - k]
    if direction == BOTTOM:
        return x <= s[k - 1]
    raise ValueError(f"unknown tail direction {direction!r}")


def _matrix(measures: list[MeasureVector], spec: PatternSpec):
    usable = [m for m in measures if not m.empty]
    ids = np.array([m.student_id for m in usable], dtype=object)
    X = np.array([[m.values[name] for name in spec.measures] for m in usable], float).reshape(len(usable), len(spec.tails))
    return ids, X


def pattern_members(X: np.ndarray, spec: PatternSpec, t: float) -> np.ndarray:
    keep = np.ones(len(X), bool)
    for j, (_, direction) in enumerate(spec.tails):
        keep &= tail_mask(X[:, j], t, direction)
    return keep


def extract_pattern_subset(measures: list[MeasureVector], spec: PatternSpec,
                           min_size: int = MIN_CONCEPT_SIZE, start: int = START_THRESHOLD) -> ConceptSubset:
    """Grow t from ``start`` in steps of one percent until the tail
    intersection holds ``min_size`` students.  Students with empty series
    are not candidates."""
    ids, X = _matrix(measures, spec)
    if len(ids) == 0:
        return ConceptSubset(spec.name, (), None, spec.measures, insufficient=True)
    t = start
    while True:
        keep = pattern_members(X, spec, t)
        if keep.sum() >= min_size or t >= 100:
            break
        t += 1
    members = tuple(sorted(ids[keep]))
    return ConceptSubset(spec.name, members, float(t), spec.measures, insufficient=len(members) < min_size,
                         meta={"population": int(len(ids))})


def extract_all(measures: list[MeasureVector], specs=PATTERNS, **kw) -> list[ConceptSubset]:
    return [extract_pattern_subset(measures, s, **kw) for s in specs]


def build_random_subsets(population, k: int, size: int = MIN_CONCEPT_SIZE, seed: int = 0,
                         exclude=(), prefix: str = "random") -> list[ConceptSubset]:
    """``k`` cohorts of ``size`` students, each drawn without replacement."""
    banned = set(exclude)
    pool = np.array(sorted(s for s in set(population) if s not in banned), dtype=object)
    if len(pool) < size:
        raise ValueError(f"population of {len(pool)} is smaller than the requested cohort size {size}")
    rng = np.random.default_rng(seed)
    out = []
    for j in range(k):
        pick = rng.choice(len(pool), size=size, replace=False)
        out.append(ConceptSubset(f"{prefix}/{j}", tuple(sorted(pool[pick])), None, (), kind="random"))
    return out


def save_subsets(path, subsets: list[ConceptSubset]) -> None:
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in subsets], fh, indent=1)


def load_subsets(path) -> list[ConceptSubset]:
    with open(path) as fh:
        return [ConceptSubset.from_dict(d) for d in json.load(fh)]
