"""Evaluation metrics and course-set aggregation."""

from __future__ import annotations

from collections import defaultdict

import numpy as np


class MetricError(ValueError):
    pass


def balanced_accuracy(predictions, labels) -> float:
    """Mean of true-positive rate (fail = 1) and true-negative rate."""
    p = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    if p.shape != y.shape or p.size == 0:
        raise MetricError("predictions and labels must be aligned, non-empty vectors")
    if len(np.unique(y)) < 2:
        raise MetricError("balanced accuracy is undefined when labels contain a single class")
    tpr = np.mean(p[y == 1] == 1)
    tnr = np.mean(p[y == 0] == 0)
    return float((tpr + tnr) / 2.0)


def weighted_course_average(results, reference: str = "raindrop") -> list[dict]:
    """Student-weighted BAC per (course set, model, level), plus the share of
    iterations where ``reference`` scores at least as high as each other model.

    ``results`` are CourseResult-like objects (course_id, iteration, model,
    level, bac, n_students).
    """
    results = list(results)
    if not results:
        raise MetricError("no results to aggregate")
    groups = defaultdict(list)
    for r in results:
        groups[(r.course_id, r.model, r.level)].append(r)
    ref_bac = {(r.course_id, r.iteration, r.level): r.bac for r in results if r.model == reference}
    rows = []
    for (course, model, level), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][2], kv[0][1])):
        n = np.array([r.n_students for r in rs], float)
        bac = np.array([r.bac for r in rs], float)
        row = {"course_id": course, "model": model, "level": level,
               "bac": float((bac * n).sum() / n.sum()), "n_iterations": len(rs)}
        if model != reference:
            paired = [(ref_bac[(course, r.iteration, level)], r.bac) for r in rs
                      if (course, r.iteration, level) in ref_bac]
            wins = sum(a >= b for a, b in paired)
            row["r_wins"], row["r_total"] = wins, len(paired)
        rows.append(row)
    return rows


def comparability_flag(bac_model: float, bac_reference: float, tolerance: float = 0.05) -> str:
    """'better' when not below the reference, 'comparable' for a relative drop under 5%."""
    if bac_model >= bac_reference:
        return "better"
    if bac_reference > 0 and (bac_reference - bac_model) / bac_reference < tolerance:
        return "comparable"
    return "worse"
