"""Course clickstream data model, file I/O and student-level splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

VIDEO_ACTIONS = ("Download", "Error", "Load", "Pause", "Play", "Seek", "SpeedChange", "Stalled")
PROBLEM_ACTIONS = ("IsAssignment", "IsQuiz")
ACTIONS = VIDEO_ACTIONS + PROBLEM_ACTIONS
CHANNEL = {a: i for i, a in enumerate(ACTIONS)}
N_ACTIONS = len(ACTIONS)

SECONDS_PER_DAY = 86400.0
SECONDS_PER_WEEK = 7 * SECONDS_PER_DAY

PASS, FAIL = 0, 1


class ClickstreamError(ValueError):
    pass


def vocabulary_hash() -> str:
    import hashlib

    return hashlib.sha1(",".join(ACTIONS).encode()).hexdigest()[:12]


def is_video_action(action: str) -> bool:
    return action in VIDEO_ACTIONS


@dataclass(frozen=True)
class Interaction:
    t: float
    action: str
    object_id: str
    video_id: Optional[int] = None
    problem_id: Optional[int] = None
    submission_num: Optional[int] = None

    def __post_init__(self):
        if self.action not in CHANNEL:
            raise ClickstreamError(f"unknown action {self.action!r}")
        if not (self.t >= 0 and math.isfinite(self.t)):
            raise ClickstreamError(f"invalid timestamp {self.t!r}")
        if self.action in VIDEO_ACTIONS:
            if self.video_id is None or self.problem_id is not None or self.submission_num is not None:
                raise ClickstreamError(f"video action {self.action} needs video_id only")
        else:
            if self.problem_id is None or self.video_id is not None:
                raise ClickstreamError(f"problem action {self.action} needs problem_id only")
            if self.submission_num is None or self.submission_num < 0:
                raise ClickstreamError(f"problem action {self.action} needs submission_num >= 0")

    @property
    def channel(self) -> int:
        return CHANNEL[self.action]


@dataclass
class StudentTimeSeries:
    student_id: str
    interactions: list[Interaction]
    label: int = PASS

    def __post_init__(self):
        if self.label not in (PASS, FAIL):
            raise ClickstreamError(f"label must be 0 or 1, got {self.label!r}")
        # sorted() is stable, so ties keep input order
        self.interactions = sorted(self.interactions, key=lambda i: i.t)

    def __len__(self):
        return len(self.interactions)

    def times(self) -> np.ndarray:
        return np.fromiter((i.t for i in self.interactions), float, len(self.interactions))


@dataclass(frozen=True)
class LearningObject:
    object_id: str
    kind: str
    release_week: int
    deadline_week: Optional[int] = None
    duration_seconds: Optional[float] = None
    is_graded: bool = False


@dataclass
class CourseSchedule:
    course_id: str
    iteration: int
    n_weeks: int
    objects: list[LearningObject] = field(default_factory=list)
    passing: str = "label file: 0 = pass, 1 = fail"

    def __post_init__(self):
        if self.n_weeks < 1:
            raise ClickstreamError("n_weeks must be positive")
        for o in self.objects:
            if o.kind not in ("video", "problem"):
                raise ClickstreamError(f"{o.object_id}: kind must be video or problem")
            if not 1 <= o.release_week <= self.n_weeks:
                raise ClickstreamError(f"{o.object_id}: release_week out of range")
            if o.kind == "problem" and o.deadline_week is not None and o.deadline_week < o.release_week:
                raise ClickstreamError(f"{o.object_id}: deadline before release")
            if o.kind == "video" and not (o.duration_seconds and o.duration_seconds > 0):
                raise ClickstreamError(f"{o.object_id}: video needs a positive duration")

    @property
    def videos(self) -> list[LearningObject]:
        return [o for o in self.objects if o.kind == "video"]

    @property
    def problems(self) -> list[LearningObject]:
        return [o for o in self.objects if o.kind == "problem"]

    @property
    def n_videos(self) -> int:
        return len(self.videos)

    @property
    def n_problems(self) -> int:
        return len(self.problems)

    @property
    def duration_seconds(self) -> float:
        return self.n_weeks * SECONDS_PER_WEEK

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CourseSchedule":
        objects = [LearningObject(**o) for o in d.get("objects", [])]
        return cls(
            course_id=d["course_id"],
            iteration=int(d["iteration"]),
            n_weeks=int(d["n_weeks"]),
            objects=objects,
            passing=d.get("passing", "label file: 0 = pass, 1 = fail"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "CourseSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def fold_of(self, student_id: str) -> str:
        for name in ("train", "validation", "test"):
            if student_id in getattr(self, name):
                return name
        raise KeyError(student_id)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train),
                "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]), int(d["seed"]))


# ---------------------------------------------------------------- JSONL I/O

_EVENT_KEYS = ("student_id", "t", "action", "object_id", "video_id", "problem_id", "submission_num")


def _optional_int(row: dict, key: str) -> Optional[int]:
    v = row.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ClickstreamError(f"{key} must be an integer or null")
    return int(v)


def parse_event(row: dict) -> tuple[str, Interaction]:
    missing = [k for k in ("student_id", "t", "action", "object_id") if k not in row]
    if missing:
        raise ClickstreamError(f"missing field(s) {', '.join(missing)}")
    action = row["action"]
    if action not in CHANNEL:
        raise ClickstreamError(f"unknown action {action!r}")
    t = row["t"]
    if isinstance(t, bool) or not isinstance(t, (int, float)):
        raise ClickstreamError("t must be a number")
    inter = Interaction(
        t=float(t),
        action=action,
        object_id=str(row["object_id"]),
        video_id=_optional_int(row, "video_id"),
        problem_id=_optional_int(row, "problem_id"),
        submission_num=_optional_int(row, "submission_num"),
    )
    return str(row["student_id"]), inter


def read_events(path, course_end: float) -> dict[str, list[Interaction]]:
    """Parse a JSONL event file into per-student interaction lists (file order kept)."""
    by_student: dict[str, list[Interaction]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ClickstreamError("row is not a JSON object")
                sid, inter = parse_event(row)
            except (json.JSONDecodeError, ClickstreamError) as exc:
                raise ClickstreamError(f"{path}:{lineno}: {exc}") from None
            if inter.t > course_end:
                raise ClickstreamError(
                    f"{path}:{lineno}: timestamp {inter.t} outside course [0, {course_end}]")
            by_student.setdefault(sid, []).append(inter)
    return by_student


def read_labels(path) -> dict[str, int]:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"student_id", "label"} <= set(reader.fieldnames):
            raise ClickstreamError(f"{path}: expected header student_id,label")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except ValueError:
                raise ClickstreamError(f"{path}:{lineno}: label {row['label']!r} is not 0/1") from None
            if label not in (PASS, FAIL):
                raise ClickstreamError(f"{path}:{lineno}: label {label} is not 0/1")
            labels[row["student_id"]] = label
    return labels


def load_clickstream(path, schedule: CourseSchedule, labels=None) -> list[StudentTimeSeries]:
    """Load one series per student from a JSONL event file.

    ``labels`` may be a mapping or a path to the labels CSV; students without a
    label entry default to pass only when no labels are supplied at all.
    """
    events = read_events(path, schedule.duration_seconds)
    if labels is not None and not isinstance(labels, dict):
        labels = read_labels(labels)
    out = []
    for sid in sorted(events):
        if labels is None:
            label = PASS
        elif sid in labels:
            label = labels[sid]
        else:
            raise ClickstreamError(f"no label for student {sid!r}")
        out.append(StudentTimeSeries(sid, events[sid], label))
    return out


def event_row(student_id: str, inter: Interaction) -> dict:
    return {
        "student_id": student_id,
        "t": inter.t,
        "action": inter.action,
        "object_id": inter.object_id,
        "video_id": inter.video_id,
        "problem_id": inter.problem_id,
        "submission_num": inter.submission_num,
    }


def write_events(path, students: Iterable[StudentTimeSeries]) -> None:
    with open(path, "w") as fh:
        for s in students:
            for inter in s.interactions:
                fh.write(json.dumps(event_row(s.student_id, inter)) + "\n")


def write_labels(path, students: Iterable[StudentTimeSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "label"])
        for s in students:
            w.writerow([s.student_id, s.label])


# ---------------------------------------------------------------- splitting

def fold_sizes(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Floor each fold, then hand out the remainder to train, validation, test in turn."""
    sizes = [math.floor(n * f) for f in fractions]
    rem = n - sum(sizes)
    i = 0
    while rem > 0:
        sizes[i % 3] += 1
        rem -= 1
        i += 1
    return tuple(sizes)


def split_students(students: list[StudentTimeSeries], seed: int) -> DatasetSplit:
    """Deterministic 80:10:10 student-level split."""
    ids = sorted({s.student_id for s in students})
    if len(ids) < 10:
        raise ClickstreamError(f"need at least 10 students to split, got {len(ids)}")
    n_train, n_val, _ = fold_sizes(len(ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=tuple(sorted(shuffled[:n_train])),
        validation=tuple(sorted(shuffled[n_train:n_train + n_val])),
        test=tuple(sorted(shuffled[n_train + n_val:])),
        seed=seed,
    )
