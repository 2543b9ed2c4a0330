import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zsseg import checks, losses
from zsseg.numerics import DimensionError, Tensor, finite_diff_check

small = st.floats(-3, 3, allow_nan=False)


def matrices(rows, cols):
    return arrays(np.float64, (rows, cols), elements=small)


def val(t):
    return t.item() if isinstance(t, Tensor) else float(t)


# -- kernel / mmd -------------------------------------------------------------------


def test_kernel_examples(rng):
    x = rng.normal(size=4)
    assert losses.gaussian_kernel(x, x) == 1.0
    assert losses.gaussian_kernel([0.0, 0.0], [1.0, 1.0]) == pytest.approx(math.exp(-1.0), abs=1e-15)
    y = rng.normal(size=4)
    assert losses.gaussian_kernel(x, y) == pytest.approx(math.exp(-0.5 * sum((x - y) ** 2)), rel=1e-14)


def test_mmd_identical_sets_is_zero(rng):
    x = rng.normal(size=(8, 3))
    assert abs(val(losses.mmd_loss(x, x))) <= 1e-9


def test_mmd_singletons_closed_form():
    value = val(losses.mmd_loss([[0.0, 0.0]], [[1.0, 1.0]]))
    assert value == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-12)


def test_mmd_matches_triple_loop(rng):
    real, synth = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    assert abs(val(losses.mmd_loss(real, synth)) - checks.mmd_reference(real, synth)) <= 1e-10


def test_mmd_normalized_variant(rng):
    real, synth = rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
    k = lambda a, b: np.exp(-0.5 * ((a[:, None] - b[None]) ** 2).sum(-1)).mean()
    expected = k(real, real) + k(synth, synth) - 2 * k(real, synth)
    assert val(losses.mmd_loss(real, synth, normalized=True)) == pytest.approx(expected, abs=1e-12)


def test_mmd_errors(rng):
    with pytest.raises(DimensionError):
        losses.mmd_loss(rng.normal(size=(3, 2)), rng.normal(size=(3, 3)))
    with pytest.raises(ValueError):
        losses.mmd_loss(np.zeros((0, 2)), rng.normal(size=(3, 2)))


@settings(max_examples=40, deadline=None)
@given(matrices(4, 2), matrices(3, 2))
def test_mmd_symmetric_and_non_negative(a, b):
    ab, ba = val(losses.mmd_loss(a, b)), val(losses.mmd_loss(b, a))
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab >= -1e-9


# -- infonce ------------------------------------------------------------------------


def test_infonce_equal_logits_is_log4():
    synth = np.zeros((5, 3))
    value = val(losses.infonce_loss(synth, np.ones(3), [np.ones(3)] * 3))
    assert value == pytest.approx(math.log(4.0), abs=1e-9)


def test_infonce_without_negatives_is_zero(rng):
    assert val(losses.infonce_loss(rng.normal(size=(4, 3)), rng.normal(size=3), [])) == 0.0


def test_infonce_matches_reference(rng):
    synth, pos = rng.normal(size=(6, 4)), rng.normal(size=4)
    negs = list(rng.normal(size=(3, 4)))
    tau = 0.3
    expected = 0.0
    for f in synth:
        lp = f @ pos / tau
        ln = [f @ n / tau for n in negs]
        m = max([lp] + ln)
        expected += -(lp - (m + math.log(sum(math.exp(v - m) for v in [lp] + ln))))
    expected /= len(synth)
    assert val(losses.infonce_loss(synth, pos, negs, tau)) == pytest.approx(expected, abs=1e-10)
    assert finite_diff_check(lambda x: losses.infonce_loss(x, pos, negs, tau), synth) < 1e-4


def test_infonce_rejects_bad_tau(rng):
    with pytest.raises(ValueError):
        losses.infonce_loss(rng.normal(size=(2, 2)), np.ones(2), [np.zeros(2)], tau=0.0)


@settings(max_examples=40, deadline=None)
@given(matrices(1, 3), matrices(1, 3), matrices(2, 3), st.floats(0.01, 2.0))
def test_infonce_decreases_with_positive_logit(f, pos, negs, step):
    # moving the positive centroid along f raises only the positive logit
    norm = float(np.linalg.norm(f))
    if norm < 1e-3:
        return
    a = val(losses.infonce_loss(f, pos[0], list(negs), tau=1.0))
    b = val(losses.infonce_loss(f, pos[0] + step * f[0] / norm, list(negs), tau=1.0))
    assert b <= a + 1e-12


# -- cosine / align -----------------------------------------------------------------


def test_cosine_distance_examples(rng):
    v = rng.normal(size=5)
    assert val(losses.cosine_distance(v, v)) == pytest.approx(0.0, abs=1e-15)
    assert val(losses.cosine_distance([1.0, 0.0], [0.0, 1.0])) == 1.0
    assert val(losses.cosine_distance(v, -v)) == pytest.approx(2.0, abs=1e-15)
    assert val(losses.cosine_distance(np.zeros(5), v)) == 1.0


@given(matrices(1, 4), matrices(1, 4))
def test_cosine_distance_range(u, v):
    d = val(losses.cosine_distance(u[0], v[0]))
    assert -1e-12 <= d <= 2 + 1e-12


def test_align_examples(rng):
    s = rng.normal(size=4)
    assert val(losses.align_loss(np.tile(s, (3, 1)), s)) == pytest.approx(0.0, abs=1e-15)
    assert val(losses.align_loss(np.tile(-s, (3, 1)), s)) == pytest.approx(2.0, abs=1e-15)
    protos = rng.normal(size=(5, 4))
    expected = np.mean([1 - p @ s / (np.linalg.norm(p) * np.linalg.norm(s)) for p in protos])
    assert val(losses.align_loss(protos, s)) == pytest.approx(expected, abs=1e-14)


def test_align_gradient_flows_to_both(rng):
    protos, s = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    assert finite_diff_check(lambda x: losses.align_loss(x, s), protos) < 1e-4
    assert finite_diff_check(lambda x: losses.align_loss(protos, x), s) < 1e-4


# -- relations / consistency ------------------------------------------------------


def test_relation_examples(rng):
    same = np.tile(rng.normal(size=3), (4, 1))
    assert not losses.relation_matrices(same, same).semantic.data.any()
    two = np.array([[0.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(losses.relation_matrices(two, two).semantic.data, [[0.0, 2.0], [2.0, 0.0]], atol=1e-15)
    sem, vis = rng.normal(size=(5, 6)), rng.normal(size=(5, 2))
    rel = losses.relation_matrices(sem, vis)
    np.testing.assert_allclose(rel.semantic.data, checks.relation_reference(sem), atol=1e-12)
    np.testing.assert_allclose(rel.visual.data, checks.relation_reference(vis), atol=1e-12)


def test_relation_errors(rng):
    with pytest.raises(ValueError):
        losses.relation_matrices(rng.normal(size=(1, 3)), rng.normal(size=(1, 2)))
    with pytest.raises(DimensionError):
        losses.relation_matrices(rng.normal(size=(3, 3)), rng.normal(size=(2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6).flatmap(lambda m: matrices(m, 3)))
def test_relation_symmetric_zero_diagonal(points):
    w = losses.relation_matrices(points, points).semantic.data
    np.testing.assert_array_equal(w, w.T)
    assert not np.diag(w).any()
    assert (w >= 0).all()


@pytest.mark.parametrize("kappa", [1.0, 3.0])
def test_consistency_scale_invariance(kappa, rng):
    sem = rng.normal(size=(5, 4))
    w = losses.relation_matrices(sem, sem).semantic.data
    rel = losses.RelationMatrices(Tensor(w), Tensor(kappa * w))
    assert abs(val(losses.consistency_loss(rel))) <= 1e-9


def test_consistency_matches_row_reference(rng):
    sem, vis = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    rel = losses.relation_matrices(sem, vis)
    w, v = checks.relation_reference(sem), checks.relation_reference(vis)
    expected = sum(1 - w[e] @ v[e] / (np.linalg.norm(w[e]) * np.linalg.norm(v[e])) for e in range(4))
    assert val(losses.consistency_loss(rel)) == pytest.approx(expected, abs=1e-12)
    flat = 1 - w.ravel() @ v.ravel() / (np.linalg.norm(w) * np.linalg.norm(v))
    assert val(losses.consistency_loss(rel, flatten=True)) == pytest.approx(flat, abs=1e-12)


def test_consistency_zero_row_counts_one():
    w = Tensor(np.array([[0.0, 2.0], [2.0, 0.0]]))
    v = Tensor(np.zeros((2, 2)))
    assert val(losses.consistency_loss(losses.RelationMatrices(w, v))) == 2.0


@settings(max_examples=30, deadline=None)
@given(matrices(4, 3), matrices(4, 2), st.floats(0.1, 10.0))
def test_consistency_visual_row_scaling(sem, vis, kappa):
    rel = losses.relation_matrices(sem, vis)
    scaled = losses.RelationMatrices(rel.semantic, Tensor(kappa * rel.visual.data))
    assert val(losses.consistency_loss(scaled)) == pytest.approx(val(losses.consistency_loss(rel)), abs=1e-9)


# -- cross entropy / generator loss -------------------------------------------------


def test_ce_uniform_logits(rng):
    assert val(losses.cross_entropy(np.zeros((4, 7)), [0, 3, 6, 2])) == pytest.approx(math.log(7), abs=1e-14)


def test_ce_confident_logits_near_zero():
    logits = np.array([[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]])
    assert val(losses.cross_entropy(logits, [0, 2])) < 1e-20


def test_ce_doubling_weight_doubles_contribution(rng):
    logits = rng.normal(size=(6, 3))
    labels = np.array([0, 1, 2, 1, 0, 1])
    base = np.ones(3)
    doubled = np.array([1.0, 2.0, 1.0])
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    class1 = -logp[labels == 1, 1].sum() / 6
    diff = val(losses.cross_entropy(logits, labels, doubled)) - val(losses.cross_entropy(logits, labels, base))
    assert diff == pytest.approx(class1, abs=1e-13)


def test_ce_errors(rng):
    with pytest.raises(ValueError):
        losses.cross_entropy(rng.normal(size=(2, 3)), [0, 3])
    with pytest.raises(ValueError):
        losses.cross_entropy(rng.normal(size=(2, 3)), [0, 1], [1.0, -1.0, 1.0])


def test_generator_loss_examples():
    ones = {k: Tensor(1.0) for k in ("mmd", "con", "align", "cst")}
    assert val(losses.generator_loss(ones, 0.4)) == pytest.approx(3.4, abs=1e-15)
    assert val(losses.generator_loss(ones, 0.0)) == 3.0
    with pytest.raises(ValueError):
        losses.generator_loss({"mmd": Tensor(float("nan"))})


@given(st.lists(st.floats(-100, 100), min_size=4, max_size=4), st.floats(0, 5))
def test_generator_loss_linear_combination(parts, alpha):
    named = dict(zip(("mmd", "con", "align", "cst"), parts))
    out = val(losses.generator_loss({k: Tensor(v) for k, v in named.items()}, alpha))
    expected = named["mmd"] + named["con"] + named["align"] + alpha * named["cst"]
    assert out == pytest.approx(expected, abs=1e-9)


# -- gradient fidelity --------------------------------------------------------------


def test_gradient_suite_passes():
    results = checks.gradient_suite(points=3, seed=7)
    assert results and all(r.passed for r in results), [r.line() for r in results]
