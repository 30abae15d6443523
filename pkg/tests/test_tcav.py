import csv

import numpy as np
import pytest
from scipy import stats

from clickgraph.concepts import ConceptSubset, build_random_subsets
from clickgraph.tcav import (
    CAV, CELLS, ActivationStore, TcavError, TcavResult, combine, confusion_cells, confusion_matrix_tcav,
    directional_derivative, directional_derivatives, fit_cav, fit_probe, local_tcav, positive_fractions,
    random_cavs, random_pairs, run_suite, tcav_score, two_sided_p, write_plot_csv,
)


def _ids(n, prefix="s"):
    return [f"{prefix}{i:04d}" for i in range(n)]


def _store(acts: dict, grads: dict):
    n = len(next(iter(acts.values())))
    return ActivationStore(_ids(n), acts, grads)


def _subset(name, ids, kind="pattern"):
    return ConceptSubset(name, tuple(ids), 5.0, (), kind=kind)


def _cav(direction, layer="a", run=0):
    d = np.asarray(direction, float)
    return CAV("c", layer, d / np.linalg.norm(d), 1.0, run)


def test_shifted_gaussian_cav_recovers_offset():
    rng = np.random.default_rng(0)
    v = np.array([2.0, -1.0, 0.5, 1.0, 0.0])
    base = rng.normal(size=(1000, 5))
    acts = np.vstack([base[:500] + v, base[500:]])
    store = _store({"a": acts}, {("a", 0): np.zeros_like(acts)})
    ids = store.student_ids
    cav = fit_cav(_subset("c", ids[:500]), _subset("r", ids[500:], "random"), store, "a")
    assert np.linalg.norm(cav.direction) == pytest.approx(1.0)
    assert cav.direction @ (v / np.linalg.norm(v)) >= 0.99
    assert cav.accuracy > 0.8 and not cav.weak  # Bayes rate is Phi(|v| / 2) = 0.894


def test_indistinguishable_cohorts_flagged_weak():
    acts = np.random.default_rng(1).normal(size=(2000, 6))
    store = _store({"a": acts}, {("a", 0): acts})
    ids = store.student_ids
    cav = fit_cav(_subset("c", ids[:1000]), _subset("r", ids[1000:], "random"), store, "a")
    assert abs(cav.accuracy - 0.5) < 0.05
    assert cav.weak


def test_fit_cav_preconditions():
    acts = np.random.default_rng(2).normal(size=(300, 3))
    store = _store({"a": acts}, {("a", 0): acts})
    ids = store.student_ids
    with pytest.raises(TcavError, match="both"):
        fit_cav(_subset("c", ids[:150]), _subset("r", ids[149:]), store, "a")
    with pytest.raises(TcavError, match="at least"):
        fit_cav(_subset("c", ids[:50]), _subset("r", ids[100:200]), store, "a")
    with pytest.raises(TcavError, match="no trace"):
        fit_cav(_subset("c", ids[:100] + ["ghost"]), _subset("r", ids[150:250]), store, "a", min_size=10)
    with pytest.raises(TcavError, match="layer"):
        fit_cav(_subset("c", ids[:100]), _subset("r", ids[150:250]), store, "b")


def test_probe_direction_points_to_concept():
    rng = np.random.default_rng(3)
    direction, _ = fit_probe(rng.normal(size=(200, 2)) + [0, 3], rng.normal(size=(200, 2)))
    assert direction[1] > 0.95


def test_directional_derivative_hand_values():
    cav = CAV("c", "a", np.array([0.6, 0.8]), 1.0)
    assert directional_derivatives(np.array([[3.0, -4.0]]), cav)[0] == pytest.approx(-1.4)
    assert directional_derivatives(np.array([[1.5, 2.0]]), cav)[0] == pytest.approx(2.5)   # parallel: the norm
    assert directional_derivatives(np.array([[0.8, -0.6]]), cav)[0] == pytest.approx(0.0)  # orthogonal
    store = _store({"a": np.zeros((1, 2))}, {("a", 1): np.array([[3.0, -4.0]])})
    assert directional_derivative(store, "s0000", cav, 1) == pytest.approx(-1.4)
    with pytest.raises(TcavError):
        directional_derivative(store, "nobody", cav, 1)


def _two_layer_store():
    # layer a: 3 of 4 students have positive first coordinate; layer b: 1 of 4
    ga = np.array([[1.0, 0], [2, 0], [0.5, 0], [-1, 0]])
    gb = np.array([[-1.0, 0], [-2, 0], [3, 0], [0, 1]])
    return _store({"a": np.zeros((4, 2)), "b": np.zeros((4, 2))}, {("a", 0): ga, ("b", 0): gb})


def test_score_hand_case():
    store = _two_layer_store()
    cavs = [_cav([1, 0], "a"), _cav([1, 0], "b")]
    r = tcav_score("c", 0, store.student_ids, ("a", "b"), cavs, store)
    assert r.layer_scores == {"a": 0.75, "b": 0.25}
    assert r.score == 0.5


def test_zero_derivative_is_not_positive():
    store = _store({"a": np.zeros((2, 2))}, {("a", 0): np.array([[0.0, 1.0], [1.0, 0.0]])})
    assert tcav_score("c", 0, store.student_ids, ("a",), [_cav([1, 0])], store).score == 0.5


def test_all_positive_gives_one():
    g = np.abs(np.random.default_rng(4).normal(size=(30, 3))) + 0.1
    store = _store({"a": g, "b": g}, {("a", 0): g, ("b", 0): g})
    cavs = [_cav([1, 1, 1], l, j) for l in "ab" for j in range(5)]
    r = tcav_score("c", 0, store.student_ids, ("a", "b"), cavs, store)
    assert r.score == 1.0
    assert local_tcav(store, "s0003", 0, ("a", "b"), cavs) == 1.0


def test_empty_class_rejected():
    store = _two_layer_store()
    with pytest.raises(TcavError):
        tcav_score("c", 0, [], ("a",), [_cav([1, 0])], store)


def test_local_counting():
    store = _store({"a": np.zeros((1, 1)), "b": np.zeros((1, 1))}, {("a", 0): [[1.0]], ("b", 0): [[1.0]]})
    signs = np.r_[np.ones(120), -np.ones(80)]
    cavs = [CAV("c", "ab"[i // 100], np.array([signs[i]]), 1.0, i % 100) for i in range(200)]
    assert local_tcav(store, "s0000", 0, ("a", "b"), cavs) == pytest.approx(0.6)


def _random_setup(n=60, d=4, runs=7, seed=5):
    rng = np.random.default_rng(seed)
    g = {(l, c): rng.normal(size=(n, d)) + 0.3 for l in "ab" for c in (0, 1)}
    store = _store({"a": rng.normal(size=(n, d)), "b": rng.normal(size=(n, d))}, g)
    cavs = [_cav(rng.normal(size=d), l, j) for l in "ab" for j in range(runs)]
    return rng, store, cavs


def test_singleton_score_equals_local():
    rng, store, cavs = _random_setup()
    for sid in rng.choice(store.student_ids, 20, replace=False):
        for cls in (0, 1):
            r = tcav_score("c", cls, [sid], ("a", "b"), cavs, store)
            assert r.score == pytest.approx(local_tcav(store, sid, cls, ("a", "b"), cavs), abs=1e-12)


def test_sign_flip_maps_score_to_complement():
    _, store, cavs = _random_setup()
    flipped = [CAV(c.concept, c.layer, -c.direction, c.accuracy, c.random_index) for c in cavs]
    a = tcav_score("c", 1, store.student_ids, ("a", "b"), cavs, store)
    b = tcav_score("c", 1, store.student_ids, ("a", "b"), flipped, store)
    for l in "ab":
        assert b.layer_scores[l] == pytest.approx(1 - a.layer_scores[l])
    assert b.score == pytest.approx(1 - a.score)


def test_score_is_mean_of_layer_scores_and_bounded():
    _, store, cavs = _random_setup(runs=11)
    r = tcav_score("c", 0, store.student_ids, ("a", "b"), cavs, store)
    assert r.score == np.mean(list(r.layer_scores.values()))
    assert all(0 <= x <= 1 for x in [r.score, *r.layer_scores.values(), *r.run_scores])
    assert np.mean(r.run_scores) == pytest.approx(r.score)


def test_random_vs_random_centres_on_half():
    rng = np.random.default_rng(6)
    n, d = 600, 8
    acts = rng.normal(size=(n, d))
    mix = rng.normal(size=(d, d)) / np.sqrt(d)
    store = _store({"a": acts, "b": np.tanh(acts @ mix)},
                   {(l, 0): rng.normal(size=(n, d)) for l in "ab"})
    null = random_cavs(store.student_ids, store, ("a", "b"), k=100, size=100, seed=0)
    fr = positive_fractions({l: store.grads(store.student_ids, l, 0) for l in "ab"}, null)
    score, _, per_run = combine(fr, ("a", "b"))
    assert len(per_run) == 100
    assert abs(score - 0.5) <= 0.05


def test_random_pairs_are_disjoint_and_seeded():
    pop = _ids(400)
    first, second = random_pairs(pop, k=10, size=100, seed=3)
    for a, b in zip(first, second):
        assert len(a) == len(b) == 100
        assert not set(a.student_ids) & set(b.student_ids)
    again = random_pairs(pop, k=10, size=100, seed=3)
    assert (first, second) == again


def test_p_value_rules():
    a, b = [0.9, 0.8, 0.85, 0.95], [0.5, 0.45, 0.55, 0.5]
    assert two_sided_p(a, b) == pytest.approx(stats.ttest_ind(a, b).pvalue)
    assert two_sided_p([0.5, 0.5], [0.5, 0.5]) == 1.0
    assert two_sided_p([1.0, 1.0], [0.5, 0.5]) == 0.0
    assert two_sided_p([0.5], [0.1, 0.2]) is None


def test_confusion_cells_partition():
    rng = np.random.default_rng(7)
    ids = _ids(50)
    p, y = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
    cells = confusion_cells(ids, p, y)
    assert [c[0] for c in CELLS] == list(cells)
    members = [s for _, group in cells.values() for s in group]
    assert sorted(members) == ids
    assert cells["true_pass"][0] == 0 and cells["false_pass"][0] == 0
    assert cells["true_fail"][0] == 1 and cells["false_fail"][0] == 1
    assert set(cells["false_pass"][1]) == {ids[i] for i in np.flatnonzero((p == 0) & (y == 1))}
    with pytest.raises(TcavError):
        confusion_cells(ids[:3], p, y)


def test_perfect_classifier_leaves_error_cells_empty():
    _, store, cavs = _random_setup()
    y = np.arange(60) % 2
    out = confusion_matrix_tcav(store.student_ids, y, y, "c", ("a", "b"), cavs, store)
    assert out["false_pass"].absent and out["false_fail"].absent
    assert out["false_pass"].score is None
    assert not out["true_pass"].absent and out["true_pass"].n_students == 30
    assert out["true_fail"].cls == 1


def test_store_round_trip_and_validation(tmp_path):
    _, store, _ = _random_setup(n=10)
    store.save(tmp_path / "s.npz")
    back = ActivationStore.load(tmp_path / "s.npz")
    assert back.student_ids == store.student_ids
    np.testing.assert_array_equal(back.grads(["s0002"], "b", 1), store.grads(["s0002"], "b", 1))
    with pytest.raises(TcavError, match="shape"):
        ActivationStore(_ids(3), {"a": np.zeros((2, 2))}, {})
    with pytest.raises(TcavError, match="duplicate"):
        ActivationStore(["x", "x"], {"a": np.zeros((2, 2))}, {})


def test_result_dict_round_trip():
    r = TcavResult("effort/higher", 0, 0.7, {"a": 0.7}, [0.7, 0.7], [0.4, 0.6], 0.01, 12, 0, ("a",))
    d = r.to_dict()
    assert d["random_mean"] == pytest.approx(0.5)
    assert TcavResult.from_dict(d) == r


def test_suite_and_plot_csv(tmp_path):
    rng = np.random.default_rng(8)
    n = 240
    acts = rng.normal(size=(n, 4))
    ids = _ids(n)
    store = ActivationStore(ids, {"a": acts, "b": acts ** 2},
                            {(l, c): rng.normal(size=(n, 4)) for l in "ab" for c in (0, 1)})
    concepts = [_subset("effort/higher", ids[:40]), _subset("effort/lower", ids[40:80]),
                ConceptSubset("control/higher", tuple(ids[80:90]), 100.0, (), insufficient=True)]
    labels = np.arange(n) % 2
    class_ids = {c: [s for s, l in zip(ids, labels) if l == c] for c in (0, 1)}
    suite = run_suite(store, concepts, ids, class_ids, ("a", "b"), k=5, size=40, seed=0,
                      confusion=(ids, labels, labels), local_students=[(ids[0], 0), (ids[1], 1)])
    assert len(suite.results) == 2 * 2
    assert set(suite.confusion) == {"effort/higher", "effort/lower"}
    assert len(suite.local) == 2 * 2
    assert all(len(r.random_scores) == 5 and r.p_value is not None for r in suite.results)
    write_plot_csv(tmp_path / "p.csv", suite.results)
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert [r["concept"] for r in rows] == ["effort"] * 4
    assert {r["class"] for r in rows} == {"pass", "fail"}
    assert list(rows[0]) == ["concept", "pattern", "class", "score", "random_mean", "random_std", "p_value"]


def test_concept_randoms_exclude_members():
    ids = _ids(300)
    subs = build_random_subsets(ids, 20, 100, seed=0, exclude=ids[:150])
    assert all(min(s.student_ids) >= ids[150] for s in subs)
