"""Tables and figures from a finished experiment directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import balanced_accuracy, comparability_flag, weighted_course_average  # noqa: E402
from .tcav import CLASS_NAMES, CELLS, TcavResult, plot_rows  # noqa: E402

REFERENCE = "raindrop"
COMPARABLE_RULE = "comparable = relative BAC decrease below 5% against the reference model"
PNG_META = {"Software": None}


class ReportError(RuntimeError):
    pass


class _Result:
    def __init__(self, d):
        self.__dict__.update(d)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return x


def _save(fig, path) -> None:
    fig.savefig(path, format="png", dpi=100, metadata=PNG_META)
    plt.close(fig)


def _read_predictions(path):
    with open(path, newline="") as fh:
        return [(r["student_id"], int(r["label"]), int(r["prediction"])) for r in csv.DictReader(fh)]


def _level_dirs(root: Path, results) -> list:
    seen = []
    for r in results:
        key = f"{r['course_id']}_{r['iteration']}"
        item = (key, float(r["level"]))
        if item not in seen:
            seen.append(item)
    return seen


def _check_artifacts(root: Path):
    missing = [n for n in ("results.json", "config.json") if not (root / n).exists()]
    if missing:
        raise ReportError("missing artifacts: " + ", ".join(missing))
    results = json.loads((root / "results.json").read_text())
    config = json.loads((root / "config.json").read_text())["config"]
    tcav_on = config.get("tcav", {}).get("enabled", True) and "raindrop" in config.get("models", [])
    tcav_levels = config.get("tcav", {}).get("levels")
    for r in results:
        d = root / f"{r['course_id']}_{r['iteration']}" / f"level_{float(r['level']):g}"
        if not (d / r["model"] / "predictions.csv").exists():
            missing.append(str((d / r["model"] / "predictions.csv").relative_to(root)))
    if tcav_on:
        for key, e in _level_dirs(root, results):
            if tcav_levels and e not in {float(x) for x in tcav_levels}:
                continue
            p = root / key / f"level_{e:g}" / "tcav" / "results.json"
            if not p.exists():
                missing.append(str(p.relative_to(root)))
    if missing:
        raise ReportError("missing artifacts: " + ", ".join(sorted(set(missing))))
    return results, config, tcav_on


def audit(root: Path, results) -> list[list]:
    """Recompute every BAC from the predictions on disk."""
    rows = []
    for r in results:
        d = root / f"{r['course_id']}_{r['iteration']}" / f"level_{float(r['level']):g}" / r["model"]
        preds = _read_predictions(d / "predictions.csv")
        bac = balanced_accuracy([p for _, _, p in preds], [y for _, y, _ in preds])
        ok = abs(round(bac, 6) - r["bac"]) < 1e-9 and len(preds) == r["n_students"]
        rows.append([r["course_id"], r["iteration"], r["model"], f"{float(r['level']):g}",
                     f"{r['bac']:.6f}", f"{bac:.6f}", int(ok)])
        if not ok:
            raise ReportError(f"stored BAC for {r['model']} at level {r['level']} does not match its predictions")
    return rows


def result_table(results, reference: str = REFERENCE):
    """Rows keyed by course set; BAC per (model, level), plus R ratio and flag for non-reference models."""
    agg = weighted_course_average([_Result(r) for r in results], reference=reference)
    models = sorted({a["model"] for a in agg}, key=lambda m: (m != reference, m))
    levels = sorted({float(a["level"]) for a in agg})
    header = ["course_set"]
    for e in levels:
        for m in models:
            header.append(f"{m}@{e:g}")
            if m != reference:
                header += [f"R_{m}@{e:g}", f"flag_{m}@{e:g}"]
    index = {(a["course_id"], a["model"], float(a["level"])): a for a in agg}
    rows = []
    for course in sorted({a["course_id"] for a in agg}):
        row = [course]
        for e in levels:
            ref = index.get((course, reference, e))
            for m in models:
                a = index.get((course, m, e))
                row.append(_fmt(a["bac"]) if a else "")
                if m != reference:
                    if a and ref:
                        row += [f"{a['r_wins']}/{a['r_total']}", comparability_flag(a["bac"], ref["bac"])]
                    else:
                        row += ["", ""]
        rows.append(row)
    return header, rows


def _bar(ax, labels, scores, random_mean=None, random_std=None, title=""):
    x = np.arange(len(labels))
    ax.bar(x, [np.nan if s is None else s for s in scores], color="#4477aa")
    if random_mean is not None:
        ax.axhline(random_mean, color="#cc3311", lw=1)
        if random_std:
            ax.axhspan(random_mean - random_std, random_mean + random_std, color="#cc3311", alpha=0.15)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=70, fontsize=6)
    ax.set_ylim(0, 1)
    ax.set_title(title, fontsize=8)


def global_plots(tcav_json: dict, out: Path, tag: str) -> list[Path]:
    results = [TcavResult.from_dict(d) for d in tcav_json["results"]]
    rows = plot_rows(results)
    _write_csv(out / f"{tag}_tcav_global.csv", list(rows[0]) if rows else ["concept"],
               [[_fmt(v) for v in r.values()] for r in rows])
    paths = [out / f"{tag}_tcav_global.csv"]
    for cls in sorted({r.cls for r in results}):
        sel = [r for r in results if r.cls == cls]
        fig, ax = plt.subplots(figsize=(6, 3))
        null = np.mean([r.random_mean for r in sel if r.random_mean is not None]) if sel else None
        sd = np.mean([r.random_std for r in sel if r.random_std is not None]) if sel else None
        _bar(ax, [r.concept for r in sel], [r.score for r in sel], null, sd, f"{tag} {CLASS_NAMES[cls]}")
        fig.tight_layout()
        p = out / f"{tag}_tcav_{CLASS_NAMES[cls]}.png"
        _save(fig, p)
        paths.append(p)
    return paths


def local_plots(tcav_json: dict, out: Path, tag: str) -> list[Path]:
    local = tcav_json.get("local", [])
    _write_csv(out / f"{tag}_local_students.csv", ["student_id", "concept", "class", "score"],
               [[d["student_id"], d["concept"], CLASS_NAMES[d["cls"]], _fmt(d["score"])] for d in local])
    paths = [out / f"{tag}_local_students.csv"]
    for sid in sorted({d["student_id"] for d in local}):
        sel = [d for d in local if d["student_id"] == sid]
        fig, ax = plt.subplots(figsize=(6, 3))
        _bar(ax, [d["concept"] for d in sel], [d["score"] for d in sel], 0.5, None,
             f"{sid} (predicted {CLASS_NAMES[sel[0]['cls']]})")
        fig.tight_layout()
        p = out / f"{tag}_local_{sid}.png"
        _save(fig, p)
        paths.append(p)
    return paths


def confusion_plots(tcav_json: dict, out: Path, tag: str) -> list[Path]:
    conf = tcav_json.get("confusion", {})
    rows, cells = [], {name: [] for name, _, _ in CELLS}
    for concept in sorted(conf):
        for name, _, _ in CELLS:
            r = TcavResult.from_dict(conf[concept][name])
            cells[name].append(r)
            dim, _, pattern = concept.partition("/")
            rows.append([dim, pattern, name, CLASS_NAMES[r.cls], _fmt(r.score), _fmt(r.random_mean),
                         _fmt(r.random_std), _fmt(r.p_value), r.n_students, int(r.absent)])
    _write_csv(out / f"{tag}_confusion_tcav.csv",
               ["concept", "pattern", "cell", "class", "score", "random_mean", "random_std", "p_value",
                "n_students", "absent"], rows)
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for ax, (name, _, _) in zip(axes.ravel(), CELLS):
        sel = cells[name]
        n = sel[0].n_students if sel else 0
        if not sel or sel[0].absent:
            ax.set_title(f"{name} (empty)", fontsize=8)
            ax.set_axis_off()
            continue
        _bar(ax, [r.concept for r in sel], [r.score for r in sel], sel[0].random_mean, sel[0].random_std,
             f"{name} (n={n})")
    fig.tight_layout()
    p = out / f"{tag}_confusion_tcav.png"
    _save(fig, p)
    return [out / f"{tag}_confusion_tcav.csv", p]


def emit_report(root) -> dict:
    root = Path(root)
    results, config, tcav_on = _check_artifacts(root)
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    header, rows = result_table(results)
    _write_csv(out / "table.csv", header, rows)
    written["table"] = "table.csv"
    _write_csv(out / "audit.csv", ["course_id", "iteration", "model", "level", "bac_stored", "bac_recomputed",
                                   "match"], audit(root, results))
    written["audit"] = "audit.csv"
    figures = []
    if tcav_on:
        for key, e in _level_dirs(root, results):
            p = root / key / f"level_{e:g}" / "tcav" / "results.json"
            if not p.exists():
                continue
            data = json.loads(p.read_text())
            tag = f"{key}_level_{e:g}"
            figures += global_plots(data, out, tag) + local_plots(data, out, tag) + confusion_plots(data, out, tag)
    written["figures"] = sorted(str(f.relative_to(out)) for f in figures)
    manifest = {"reference": REFERENCE, "rule": COMPARABLE_RULE, "files": written,
                "config_hash": json.loads((root / "config.json").read_text())["hash"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
