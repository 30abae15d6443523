"""Concept activation vectors and concept sensitivity scores.

A CAV is the unit normal of a linear probe separating a concept cohort's
activations from a random cohort's at one layer.  A student's directional
derivative is the gradient of the class logit at that layer dotted with the
CAV; the concept score for class ``y`` is the fraction of ``y`` students with
a positive derivative, averaged over random runs and then over layers.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from .concepts import MIN_CONCEPT_SIZE, ConceptSubset, build_random_subsets

WEAK_PROBE = 0.55
HELDOUT = 0.2
N_RUNS = 100
CLASS_NAMES = {0: "pass", 1: "fail"}


class TcavError(ValueError):
    pass


class ActivationStore:
    """Per-student activations and class-logit gradients for a fixed set of layers."""

    def __init__(self, student_ids, activations: dict, gradients: dict):
        self.student_ids = [str(s) for s in student_ids]
        self.index = {s: i for i, s in enumerate(self.student_ids)}
        if len(self.index) != len(self.student_ids):
            raise TcavError("duplicate student ids in activation store")
        self.activations = {k: np.asarray(v, float) for k, v in activations.items()}
        self.gradients = {tuple(k): np.asarray(v, float) for k, v in gradients.items()}
        for name, arr in [*self.activations.items(), *self.gradients.items()]:
            if arr.ndim != 2 or len(arr) != len(self.student_ids):
                raise TcavError(f"store entry {name} has shape {arr.shape} for {len(self.student_ids)} students")

    @property
    def layers(self):
        return tuple(self.activations)

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self.index[s] for s in ids], dtype=np.int64)
        except KeyError as err:
            raise TcavError(f"no trace recorded for student {err.args[0]!r}") from None

    def acts(self, ids, layer: str) -> np.ndarray:
        if layer not in self.activations:
            raise TcavError(f"no activations for layer {layer!r}")
        return self.activations[layer][self.rows(ids)]

    def grads(self, ids, layer: str, cls: int) -> np.ndarray:
        if (layer, cls) not in self.gradients:
            raise TcavError(f"no gradients for layer {layer!r}, class {cls}")
        return self.gradients[(layer, cls)][self.rows(ids)]

    @classmethod
    def from_model(cls, model, encoded, layers=None, classes=(0, 1)):
        from . import raindrop

        layers = tuple(layers or raindrop.LAYERS)
        tr = raindrop.traces(encoded, model)
        acts = {l: np.stack([t.layer(l) for t in tr]) for l in layers}
        grads = {(l, y): raindrop.activation_gradients(encoded, model, l, y) for l in layers for y in classes}
        return cls([e.student_id for e in encoded], acts, grads)

    def save(self, path) -> None:
        arrays = {f"act::{l}": a for l, a in self.activations.items()}
        arrays.update({f"grad::{l}::{y}": g for (l, y), g in self.gradients.items()})
        np.savez(path, student_ids=np.array(self.student_ids), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            acts, grads = {}, {}
            for key in z.files:
                parts = key.split("::")
                if parts[0] == "act":
                    acts[parts[1]] = z[key]
                elif parts[0] == "grad":
                    grads[(parts[1], int(parts[2]))] = z[key]
            return cls(list(z["student_ids"]), acts, grads)


@dataclass
class CAV:
    concept: str
    layer: str
    direction: np.ndarray
    accuracy: float
    random_index: int = 0
    weak: bool = False


def fit_probe(concept_acts: np.ndarray, random_acts: np.ndarray, seed: int = 0, C: float = 1.0):
    """(unit direction toward the concept class, held-out accuracy)."""
    X = np.vstack([concept_acts, random_acts])
    y = np.r_[np.ones(len(concept_acts), int), np.zeros(len(random_acts), int)]
    X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=HELDOUT, random_state=seed, stratify=y)
    probe = LogisticRegression(C=C, max_iter=2000).fit(X_tr, y_tr)
    w = probe.coef_[0]
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm == 0:
        # degenerate probe: no separating direction at all
        w, norm = np.ones_like(w), math.sqrt(len(w))
    return w / norm, float(probe.score(X_te, y_te))


def fit_cav(concept: ConceptSubset, random: ConceptSubset, store: ActivationStore, layer: str,
            random_index: int = 0, seed: int = 0, min_size: int = MIN_CONCEPT_SIZE) -> CAV:
    overlap = set(concept.student_ids) & set(random.student_ids)
    if overlap:
        raise TcavError(f"{len(overlap)} students appear in both {concept.name} and {random.name}")
    for s in (concept, random):
        if len(s) < min_size:
            raise TcavError(f"{s.name} has {len(s)} students; a CAV needs at least {min_size}")
    direction, acc = fit_probe(store.acts(concept.student_ids, layer), store.acts(random.student_ids, layer), seed)
    return CAV(concept.name, layer, direction, acc, random_index, weak=acc < WEAK_PROBE)


def directional_derivatives(gradients: np.ndarray, cav: CAV) -> np.ndarray:
    return np.asarray(gradients, float) @ cav.direction


def directional_derivative(store: ActivationStore, student_id: str, cav: CAV, cls: int) -> float:
    return float(directional_derivatives(store.grads([student_id], cav.layer, cls), cav)[0])


@dataclass
class TcavResult:
    concept: str
    cls: int
    score: float | None
    layer_scores: dict
    run_scores: list
    random_scores: list = field(default_factory=list)
    p_value: float | None = None
    n_students: int = 0
    n_weak_cavs: int = 0
    layers: tuple = ()
    cell: str | None = None
    absent: bool = False

    @property
    def random_mean(self):
        return float(np.mean(self.random_scores)) if self.random_scores else None

    @property
    def random_std(self):
        return float(np.std(self.random_scores)) if self.random_scores else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        d["random_mean"], d["random_std"] = self.random_mean, self.random_std
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TcavResult":
        d = {k: v for k, v in d.items() if k not in ("random_mean", "random_std")}
        d["layers"] = tuple(d.get("layers", ()))
        return cls(**d)


def _group(cavs) -> dict:
    """{layer: [CAV per run]} from a list or a {(layer, run): CAV} mapping."""
    items = cavs.values() if isinstance(cavs, dict) else cavs
    out: dict = {}
    for c in sorted(items, key=lambda c: (c.layer, c.random_index)):
        out.setdefault(c.layer, []).append(c)
    return out


def positive_fractions(grads_by_layer: dict, cavs) -> dict:
    """{layer: array over runs of the fraction of students with D > 0}."""
    by_layer = _group(cavs)
    return {l: np.array([np.mean(directional_derivatives(grads_by_layer[l], c) > 0) for c in runs])
            for l, runs in by_layer.items()}


def combine(fractions: dict, layers) -> tuple[float, dict, np.ndarray]:
    """Run-then-layer averaging: (score, per-layer scores, per-run layer-averaged scores)."""
    layer_scores = {l: float(fractions[l].mean()) for l in layers}
    score = float(np.mean([layer_scores[l] for l in layers]))
    n_runs = {len(fractions[l]) for l in layers}
    per_run = np.mean([fractions[l] for l in layers], axis=0) if len(n_runs) == 1 else np.array([score])
    return score, layer_scores, per_run


def two_sided_p(a, b) -> float | None:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        return None
    if np.var(a) == 0 and np.var(b) == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    with warnings.catch_warnings():
        # near-constant run scores trigger a precision warning; the statistic is still defined
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(stats.ttest_ind(a, b).pvalue)


def tcav_score(concept: str, cls: int, student_ids, layers, cavs, store: ActivationStore,
               random_cavs=None, cell: str | None = None) -> TcavResult:
    """``cavs``: one CAV per (layer, run); ``random_cavs``: random-vs-random CAVs
    for the null distribution and the t-test."""
    ids = list(student_ids)
    if not ids:
        raise TcavError(f"no class-{cls} students to score for {concept}")
    layers = tuple(layers)
    grads = {l: store.grads(ids, l, cls) for l in layers}
    score, layer_scores, per_run = combine(positive_fractions(grads, cavs), layers)
    result = TcavResult(concept, cls, score, layer_scores, per_run.tolist(), n_students=len(ids),
                        n_weak_cavs=sum(c.weak for runs in _group(cavs).values() for c in runs),
                        layers=layers, cell=cell)
    if random_cavs:
        _, _, null = combine(positive_fractions(grads, random_cavs), layers)
        result.random_scores = null.tolist()
        result.p_value = two_sided_p(per_run, null)
    return result


def local_tcav(store: ActivationStore, student_id: str, cls: int, layers, cavs) -> float:
    """Fraction of (layer, run) pairs with a positive directional derivative for one student."""
    by_layer = _group(cavs)
    pos = total = 0
    for l in layers:
        g = store.grads([student_id], l, cls)
        for c in by_layer[l]:
            pos += int(directional_derivatives(g, c)[0] > 0)
            total += 1
    return pos / total


CELLS = (("true_pass", 0, 0), ("false_pass", 0, 1), ("true_fail", 1, 1), ("false_fail", 1, 0))


def confusion_cells(student_ids, predictions, labels) -> dict:
    """{cell: (predicted class, ids)}: a pass cell holds students predicted pass."""
    ids = np.asarray(list(student_ids), dtype=object)
    p, y = np.asarray(predictions, int), np.asarray(labels, int)
    if not (len(ids) == len(p) == len(y)):
        raise TcavError("predictions, labels and student ids must be aligned")
    return {name: (pred, list(ids[(p == pred) & (y == true)])) for name, pred, true in CELLS}


def confusion_matrix_tcav(student_ids, predictions, labels, concept: str, layers, cavs, store,
                          random_cavs=None) -> dict:
    out = {}
    for name, (pred, ids) in confusion_cells(student_ids, predictions, labels).items():
        if ids:
            out[name] = tcav_score(concept, pred, ids, layers, cavs, store, random_cavs, cell=name)
        else:
            out[name] = TcavResult(concept, pred, None, {}, [], layers=tuple(layers), cell=name, absent=True)
    return out


# ---------------------------------------------------------------- suite

def random_pairs(population, k: int = N_RUNS, size: int = MIN_CONCEPT_SIZE, seed: int = 0):
    """k disjoint (R_j, R'_j) pairs of random cohorts for the null distribution."""
    first = build_random_subsets(population, k, size, seed=[seed, 0])
    second = [build_random_subsets(population, 1, size, seed=[seed, 1, j], exclude=r.student_ids,
                                   prefix=f"random'/{j}")[0] for j, r in enumerate(first)]
    return first, second


def fit_cavs(concept: ConceptSubset, randoms, store, layers, seed: int = 0,
             min_size: int = MIN_CONCEPT_SIZE) -> list[CAV]:
    return [fit_cav(concept, r, store, l, random_index=j, seed=seed + j, min_size=min_size)
            for l in layers for j, r in enumerate(randoms)]


def random_cavs(population, store, layers, k: int = N_RUNS, size: int = MIN_CONCEPT_SIZE, seed: int = 0):
    first, second = random_pairs(population, k, size, seed)
    return [fit_cav(a, b, store, l, random_index=j, seed=seed + j, min_size=size)
            for l in layers for j, (a, b) in enumerate(zip(first, second))]


@dataclass
class Suite:
    results: list
    confusion: dict
    local: list
    layers: tuple
    k: int

    def to_dict(self) -> dict:
        return {"layers": list(self.layers), "k": self.k,
                "results": [r.to_dict() for r in self.results],
                "confusion": {c: {cell: r.to_dict() for cell, r in cells.items()}
                              for c, cells in self.confusion.items()},
                "local": self.local}


def run_suite(store: ActivationStore, concepts, population, class_ids: dict, layers=None,
              k: int = N_RUNS, size: int = MIN_CONCEPT_SIZE, seed: int = 0,
              confusion=None, local_students=(), min_size: int | None = None) -> Suite:
    """Score every non-flagged concept for each class.

    ``class_ids`` maps class -> student ids scored for that class.
    ``confusion`` is an optional (ids, predictions, labels) triple for the
    confusion-cell analysis; ``local_students`` get per-student scores.
    """
    layers = tuple(layers or store.layers)
    min_size = size if min_size is None else min_size
    population = sorted(set(population))
    null = random_cavs(population, store, layers, k, size, seed)
    results, cells, local = [], {}, []
    for ci, concept in enumerate(concepts):
        if concept.insufficient:
            continue
        randoms = build_random_subsets(population, k, size, seed=[seed, 2, ci], exclude=concept.student_ids)
        cavs = fit_cavs(concept, randoms, store, layers, seed, min_size)
        for cls in sorted(class_ids):
            results.append(tcav_score(concept.name, cls, class_ids[cls], layers, cavs, store, null))
        if confusion is not None:
            cells[concept.name] = confusion_matrix_tcav(*confusion, concept.name, layers, cavs, store, null)
        for sid, cls in local_students:
            local.append({"student_id": sid, "concept": concept.name, "cls": int(cls),
                          "score": local_tcav(store, sid, cls, layers, cavs)})
    return Suite(results, cells, local, layers, k)


def save_results(path, suite: Suite) -> None:
    with open(path, "w") as fh:
        json.dump(suite.to_dict(), fh, indent=1)


def plot_rows(results) -> list[dict]:
    rows = []
    for r in results:
        dim, _, pattern = r.concept.partition("/")
        rows.append({"concept": dim, "pattern": pattern, "class": CLASS_NAMES.get(r.cls, r.cls),
                     "score": r.score, "random_mean": r.random_mean, "random_std": r.random_std,
                     "p_value": r.p_value})
    return rows


def write_plot_csv(path, results, extra: tuple = ()) -> None:
    rows = plot_rows(results)
    fields = ["concept", "pattern", "class", "score", "random_mean", "random_std", "p_value", *extra]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r, res in zip(rows, results):
            for key in extra:
                r[key] = getattr(res, key)
            w.writerow(r)
