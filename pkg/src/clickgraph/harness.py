"""Experiment orchestration: config, staged pipeline, persisted artifacts.

Layout under ``config.out``::

    config.json                       config plus its hash
    results.json                      every CourseResult (test fold)
    <course>_<iteration>/
        data/ events.jsonl labels.csv schedule.json
        filter.json split.json
        level_<e>/ measures.csv concepts.json
            <model>/ checkpoint.pt checkpoint.json grid.json predictions.csv
            tcav/ store.npz results.json plot.csv
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


from . import baselines, concepts, raindrop, tcav
from .core import (
    ClickstreamError, CourseSchedule, DatasetSplit, StudentTimeSeries, load_clickstream, read_labels,
    split_students, write_events, write_labels,
)
from .measures import measure_table, read_measures, weekly_features, write_measures
from .metrics import balanced_accuracy
from .preprocessing import EarlyLevel, early_dropout_filter, encode, select_filter, truncate
from .synthgen import GeneratorConfig, generate_course, write_profiles
from .training import TrainConfig, set_deterministic

log = logging.getLogger(__name__)

MODELS = ("raindrop", "bilstm", "transformer")
STAGES = ("generate", "preprocess", "train", "evaluate", "concepts", "tcav", "report")
MAX_GRID = 12

DEFAULT_GRIDS = {
    "raindrop": {"d_h": [16, 32], "lr": [1e-3, 3e-3]},
    "bilstm": {"hidden": [16, 32], "lr": [1e-3, 3e-3]},
    "transformer": {"d_model": [16, 32], "lr": [1e-3, 3e-3]},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    courses: list = field(default_factory=lambda: [{"generator": {}}])
    levels: list = field(default_factory=lambda: [40, 60])
    models: list = field(default_factory=lambda: list(MODELS))
    grids: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_GRIDS)))
    train: dict = field(default_factory=dict)
    filter: dict = field(default_factory=lambda: {"enabled": True, "weeks": 2, "threshold": 0.99, "select": False})
    concepts: dict = field(default_factory=lambda: {"min_size": concepts.MIN_CONCEPT_SIZE})
    tcav: dict = field(default_factory=lambda: {"enabled": True, "k": tcav.N_RUNS, "size": concepts.MIN_CONCEPT_SIZE,
                                                "population": "all", "levels": None, "n_local": 2})
    seed: int = 0
    out: str = "runs/experiment"
    deterministic: bool = False

    def __post_init__(self):
        if not self.models:
            raise ConfigError("at least one model is required")
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise ConfigError(f"unknown models {sorted(unknown)}; choose from {MODELS}")
        for e in self.levels:
            if not 0 < float(e) <= 100:
                raise ConfigError(f"early level {e} outside (0, 100]")
        if not self.levels:
            raise ConfigError("at least one early level is required")
        if not self.courses:
            raise ConfigError("at least one course is required")
        for m in self.models:
            n = len(grid_points(self.grids.get(m, {})))
            if n > MAX_GRID:
                log.warning("grid for %s has %d points (default budget is %d)", m, n, MAX_GRID)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        base = cls()
        merged = {}
        for k, v in d.items():
            default = getattr(base, k)
            merged[k] = {**default, **v} if isinstance(default, dict) and k != "grids" else v
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def smoke_config(out="runs/smoke", seed: int = 0) -> ExperimentConfig:
    """Small end-to-end configuration: 200 students, one level, tiny grids."""
    return ExperimentConfig(
        courses=[{"generator": {"n_students": 200, "n_videos": 12, "n_problems": 12,
                                "early_dropout_fraction": 0.1}}],
        levels=[60],
        models=list(MODELS),
        grids={"raindrop": {"d_h": [8, 16]}, "bilstm": {"hidden": [8]}, "transformer": {"d_model": [16]}},
        train={"max_epochs": 15, "patience": 5},
        concepts={"min_size": 30},
        tcav={"enabled": True, "k": 10, "size": 30, "population": "all", "levels": None, "n_local": 2},
        seed=seed, out=str(out), deterministic=True,
    )


def grid_points(grid: dict) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))] or [{}]


@dataclass
class CourseResult:
    course_id: str
    iteration: int
    model: str
    level: float
    bac: float
    n_students: int
    predictions: list = field(default_factory=list)  # [{student_id, label, prediction, probability}]

    def recompute_bac(self) -> float:
        return balanced_accuracy([p["prediction"] for p in self.predictions], [p["label"] for p in self.predictions])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------- helpers

def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _read_json(path, stage):
    path = Path(path)
    if not path.exists():
        raise StageError(stage, f"missing artifact {path}")
    return json.loads(path.read_text())


def level_name(e) -> str:
    return f"level_{float(e):g}"


class Experiment:
    """Stage runner bound to one config; every stage reads and writes artifacts on disk."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = Path(config.out)
        self._cache: dict = {}

    # -- course bookkeeping

    def course_keys(self) -> list[str]:
        keys = []
        for i, spec in enumerate(self.config.courses):
            if "generator" in spec:
                g = self._generator_config(i)
                keys.append(f"{g.course_id}_{g.iteration}")
            else:
                keys.append(spec.get("name") or f"{spec.get('course_id', 'course')}_{spec.get('iteration', i)}")
        if len(set(keys)) != len(keys):
            raise ConfigError(f"course keys collide: {keys}")
        return keys

    def _generator_config(self, i: int) -> GeneratorConfig:
        d = dict(self.config.courses[i]["generator"])
        d.setdefault("seed", self.config.seed + i)
        d.setdefault("iteration", i)
        return GeneratorConfig.from_dict(d)

    def course_dir(self, key) -> Path:
        return self.root / key

    def levels(self, only=None) -> list[float]:
        lv = [float(e) for e in self.config.levels]
        if only is not None:
            if float(only) not in lv:
                raise ConfigError(f"level {only} is not among configured levels {lv}")
            lv = [float(only)]
        return lv

    def _train_config(self, **over) -> TrainConfig:
        d = {**self.config.train, **over, "seed": self.config.seed, "deterministic": self.config.deterministic}
        return TrainConfig(**d)

    def load_course(self, key, stage="preprocess"):
        if key in self._cache:
            return self._cache[key]
        data = self.course_dir(key) / "data"
        for name in ("schedule.json", "events.jsonl", "labels.csv"):
            if not (data / name).exists():
                raise StageError(stage, f"missing {name} for course {key}")
        try:
            schedule = CourseSchedule.load(data / "schedule.json")
            students = load_clickstream(data / "events.jsonl", schedule, data / "labels.csv")
        except ClickstreamError as err:
            raise StageError(stage, str(err)) from err
        # students with no events at all still exist in the labels file
        seen = {s.student_id for s in students}
        for sid, lab in sorted(read_labels(data / "labels.csv").items()):
            if sid not in seen:
                students.append(StudentTimeSeries(sid, [], lab))
        students.sort(key=lambda s: s.student_id)
        self._cache[key] = (schedule, students)
        return schedule, students

    def kept_students(self, key, stage):
        schedule, students = self.load_course(key, stage)
        filt = _read_json(self.course_dir(key) / "filter.json", stage)
        removed = set(filt["removed"])
        return schedule, [s for s in students if s.student_id not in removed]

    def split(self, key, stage) -> DatasetSplit:
        return DatasetSplit.from_dict(_read_json(self.course_dir(key) / "split.json", stage))

    # -- stages

    def generate(self):
        self.root.mkdir(parents=True, exist_ok=True)
        _write_json(self.root / "config.json", {"config": self.config.to_dict(), "hash": self.config.hash()})
        for i, key in enumerate(self.course_keys()):
            data = self.course_dir(key) / "data"
            data.mkdir(parents=True, exist_ok=True)
            spec = self.config.courses[i]
            if "generator" in spec:
                schedule, students, profiles = generate_course(self._generator_config(i))
                write_profiles(data / "profiles.csv", students, profiles)
            else:
                for name in ("schedule", "events", "labels"):
                    if name not in spec or not Path(spec[name]).exists():
                        raise StageError("generate", f"course {key}: {name} file missing ({spec.get(name)})")
                try:
                    schedule = CourseSchedule.load(spec["schedule"])
                    students = load_clickstream(spec["events"], schedule, spec["labels"])
                except ClickstreamError as err:
                    raise StageError("generate", str(err)) from err
            schedule.save(data / "schedule.json")
            write_events(data / "events.jsonl", students)
            write_labels(data / "labels.csv", students)
            self._cache.pop(key, None)

    def preprocess(self):
        f = self.config.filter
        for key in self.course_keys():
            schedule, students = self.load_course(key, "preprocess")
            if f.get("enabled", True):
                if f.get("select"):
                    kept, removed, rep = select_filter(students, seed=self.config.seed)
                else:
                    kept, removed, rep = early_dropout_filter(students, f.get("weeks", 2), f.get("threshold", 0.99),
                                                              seed=self.config.seed)
                report = rep.to_dict()
            else:
                kept, removed, report = students, [], {"enabled": False}
            _write_json(self.course_dir(key) / "filter.json",
                        {"report": report, "removed": sorted(s.student_id for s in removed)})
            try:
                split = split_students(kept, self.config.seed)
            except ClickstreamError as err:
                raise StageError("preprocess", f"course {key}: {err}") from err
            _write_json(self.course_dir(key) / "split.json", split.to_dict())
            for e in self.levels():
                lv = EarlyLevel(e)
                d = self.course_dir(key) / level_name(e)
                d.mkdir(parents=True, exist_ok=True)
                cut = [truncate(s, schedule, lv) for s in kept]
                write_measures(d / "measures.csv", measure_table(cut, schedule, lv.horizon_seconds(schedule)))

    def _inputs(self, model_name, schedule, students, level):
        lv = EarlyLevel(level)
        if model_name == "bilstm":
            return {s.student_id: weekly_features(s, schedule, lv) for s in students}
        return {s.student_id: encode(truncate(s, schedule, lv), schedule) for s in students}

    def _fit_point(self, model_name, point, tr, tr_y, va, va_y):
        train_keys = {f.name for f in fields(TrainConfig)}
        tc = self._train_config(**{k: v for k, v in point.items() if k in train_keys})
        arch = {k: v for k, v in point.items() if k not in train_keys}
        if model_name == "raindrop":
            return raindrop.train(tr, va, raindrop.RaindropConfig(**arch), tc)
        if model_name == "bilstm":
            return baselines.train_bilstm(tr, tr_y, va, va_y, baselines.BaselineConfig("bilstm_features", **arch), tc)
        return baselines.train_transformer(tr, va, baselines.BaselineConfig("transformer_raw", **arch), tc)

    def train(self, level=None):
        set_deterministic(self.config.deterministic)
        for key in self.course_keys():
            schedule, kept = self.kept_students(key, "train")
            split = self.split(key, "train")
            labels = {s.student_id: s.label for s in kept}
            for e in self.levels(level):
                for m in self.config.models:
                    x = self._inputs(m, schedule, kept, e)
                    tr, va = [x[i] for i in split.train], [x[i] for i in split.validation]
                    tr_y, va_y = [labels[i] for i in split.train], [labels[i] for i in split.validation]
                    grid, best = [], None
                    for point in grid_points(self.config.grids.get(m, {})):
                        try:
                            model, report = self._fit_point(m, point, tr, tr_y, va, va_y)
                        except Exception as err:
                            raise StageError("train", f"{key} {m} level {e:g} point {point}: {err}") from err
                        grid.append({"point": point, "val_bac": report["best_val_bac"],
                                     "best_epoch": report["best_epoch"]})
                        if best is None or report["best_val_bac"] > best[0]:
                            best = (report["best_val_bac"], point, model, report)
                    d = self.course_dir(key) / level_name(e) / m
                    d.mkdir(parents=True, exist_ok=True)
                    _, point, model, report = best
                    report["grid_point"] = point
                    if m == "raindrop":
                        raindrop.save_checkpoint(model, d / "checkpoint.pt", report)
                    else:
                        baselines.save_baseline(model, d / "checkpoint.pt", report)
                    _write_json(d / "grid.json", {"grid": grid, "selected": point})

    def _load_model(self, m, d, stage):
        path = d / "checkpoint.pt"
        if not path.exists():
            raise StageError(stage, f"missing checkpoint {path}")
        return raindrop.load_checkpoint(path) if m == "raindrop" else baselines.load_baseline(path)

    def evaluate(self, level=None):
        results = []
        for key in self.course_keys():
            schedule, kept = self.kept_students(key, "evaluate")
            split = self.split(key, "evaluate")
            labels = {s.student_id: s.label for s in kept}
            course_id, _, iteration = key.rpartition("_")
            for e in self.levels(level):
                for m in self.config.models:
                    d = self.course_dir(key) / level_name(e) / m
                    model = self._load_model(m, d, "evaluate")
                    x = self._inputs(m, schedule, [s for s in kept if s.student_id in set(split.test)], e)
                    items = [x[i] for i in split.test]
                    if m == "raindrop":
                        pred, prob = raindrop.predict_batch(items, model)
                    else:
                        pred, prob = baselines.predict_baseline(model, items)
                    rows = [{"student_id": sid, "label": int(labels[sid]), "prediction": int(p),
                             "probability": round(float(q), 6)} for sid, p, q in zip(split.test, pred, prob)]
                    with open(d / "predictions.csv", "w", newline="") as fh:
                        w = csv.DictWriter(fh, fieldnames=["student_id", "label", "prediction", "probability"])
                        w.writeheader()
                        w.writerows(rows)
                    try:
                        bac = balanced_accuracy(pred, [labels[i] for i in split.test])
                    except ValueError as err:
                        raise StageError("evaluate", f"{key} {m} level {e:g}: {err}") from err
                    results.append(CourseResult(course_id, int(iteration) if iteration.isdigit() else 0, m, e,
                                                round(bac, 6), len(rows), rows))
        existing = []
        if level is not None and (self.root / "results.json").exists():
            existing = [r for r in json.loads((self.root / "results.json").read_text())
                        if float(r["level"]) != float(level)]
        _write_json(self.root / "results.json", existing + [r.to_dict() for r in results])
        return results

    def concepts(self, level=None):
        cfg = self.config.concepts
        for key in self.course_keys():
            for e in self.levels(level):
                d = self.course_dir(key) / level_name(e)
                if not (d / "measures.csv").exists():
                    raise StageError("concepts", f"missing artifact {d / 'measures.csv'}")
                ms = read_measures(d / "measures.csv")
                subsets = concepts.extract_all(ms, min_size=cfg.get("min_size", concepts.MIN_CONCEPT_SIZE))
                concepts.save_subsets(d / "concepts.json", subsets)

    def tcav(self, level=None):
        cfg = self.config.tcav
        if not cfg.get("enabled", True) or "raindrop" not in self.config.models:
            log.info("tcav disabled or raindrop not trained; skipping")
            return
        set_deterministic(self.config.deterministic)
        levels = self.levels(level)
        if cfg.get("levels"):
            levels = [e for e in levels if e in {float(x) for x in cfg["levels"]}]
        for key in self.course_keys():
            schedule, kept = self.kept_students(key, "tcav")
            split = self.split(key, "tcav")
            labels = {s.student_id: s.label for s in kept}
            pop = split.test if cfg.get("population") == "test" else tuple(sorted(labels))
            for e in levels:
                d = self.course_dir(key) / level_name(e)
                model = self._load_model("raindrop", d / "raindrop", "tcav")
                if not (d / "concepts.json").exists():
                    raise StageError("tcav", f"missing artifact {d / 'concepts.json'}")
                subsets = concepts.load_subsets(d / "concepts.json")
                x = self._inputs("raindrop", schedule, kept, e)
                store = tcav.ActivationStore.from_model(model, [x[i] for i in pop])
                out = d / "tcav"
                out.mkdir(parents=True, exist_ok=True)
                store.save(out / "store.npz")
                preds = _read_predictions(d / "raindrop" / "predictions.csv", "tcav")
                test = [r["student_id"] for r in preds if r["student_id"] in store.index]
                by_id = {r["student_id"]: r for r in preds}
                p = [by_id[s]["prediction"] for s in test]
                y = [by_id[s]["label"] for s in test]
                local = pick_local_students(test, p, cfg.get("n_local", 2))
                class_ids = {c: [s for s in pop if labels[s] == c] for c in (0, 1)}
                usable = [s for s in subsets if not s.insufficient and s.student_ids
                          and set(s.student_ids) <= set(store.index)]
                try:
                    suite = tcav.run_suite(store, usable, pop, class_ids, k=cfg.get("k", tcav.N_RUNS),
                                           size=cfg.get("size", concepts.MIN_CONCEPT_SIZE), seed=self.config.seed,
                                           confusion=(test, p, y), local_students=local,
                                           min_size=min(cfg.get("size", concepts.MIN_CONCEPT_SIZE),
                                                        self.config.concepts.get("min_size", concepts.MIN_CONCEPT_SIZE)))
                except (ValueError, tcav.TcavError) as err:
                    raise StageError("tcav", f"{key} level {e:g}: {err}") from err
                tcav.save_results(out / "results.json", suite)
                tcav.write_plot_csv(out / "plot.csv", suite.results, extra=("n_students",))

    def run(self, level=None):
        for stage in ("generate", "preprocess", "train", "evaluate", "concepts", "tcav"):
            log.info("stage %s", stage)
            run_stage(self, stage, level)
        from .report import emit_report
        emit_report(self.root)
        return self.root


def _read_predictions(path, stage):
    if not Path(path).exists():
        raise StageError(stage, f"missing artifact {path}")
    with open(path, newline="") as fh:
        return [{"student_id": r["student_id"], "label": int(r["label"]), "prediction": int(r["prediction"]),
                 "probability": float(r["probability"])} for r in csv.DictReader(fh)]


def pick_local_students(ids, predictions, n: int = 2):
    """Alternate predicted-fail and predicted-pass students, lowest id first."""
    groups = {c: [s for s, p in zip(ids, predictions) if p == c] for c in (1, 0)}
    out = []
    for j in range(n):
        for c in (1, 0) if j % 2 == 0 else (0, 1):
            pool = [s for s in groups[c] if s not in {o for o, _ in out}]
            if pool:
                out.append((pool[0], c))
                break
    return out


def run_stage(exp: Experiment, stage: str, level=None):
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    if level is not None:
        try:
            exp.levels(level)
        except ConfigError as err:
            raise StageError(stage, str(err)) from err
    if stage == "report":
        from .report import ReportError, emit_report
        try:
            return emit_report(exp.root)
        except ReportError as err:
            raise StageError("report", str(err)) from err
    fn = getattr(exp, stage)
    try:
        return fn() if stage in ("generate", "preprocess") else fn(level)
    except StageError:
        raise
    except ConfigError as err:
        raise StageError(stage, str(err)) from err
    except Exception as err:
        raise StageError(stage, f"{type(err).__name__}: {err}") from err


def run_experiment(config: ExperimentConfig) -> Path:
    return Experiment(config).run()


def load_results(root) -> list[CourseResult]:
    return [CourseResult.from_dict(d) for d in json.loads((Path(root) / "results.json").read_text())]
