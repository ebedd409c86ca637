import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_chamfer, brute_iou, brute_seg_miou
from parsefit.metrics import (
    MetricsError,
    SegmentLabeling,
    chamfer_distance,
    evaluate,
    iou_matrix,
    label_miou,
    match_segments,
    p_coverage,
    reconstruct_samples,
    residual_error,
    seg_miou,
)
from parsefit.primitives import Plane, Sphere
from parsefit.synth import make_scene


def lab(labels, k, kind="plane"):
    return SegmentLabeling(np.asarray(labels), [kind] * k)


def test_identity_and_permuted_matching():
    t = lab([0, 0, 1, 1, 2, 2], 3)
    assert match_segments(t, t) == [(0, 0), (1, 1), (2, 2)]
    p = lab([2, 2, 0, 0, 1, 1], 3)
    assert match_segments(p, t) == [(2, 0), (0, 1), (1, 2)]


def test_perfect_and_disjoint():
    t = lab([0] * 5 + [1] * 5, 2)
    assert seg_miou(t, t) == 1.0
    # every predicted segment straddles both truth segments equally
    p = lab([0, 1] * 5, 2)
    assert seg_miou(p, t) == pytest.approx(2 * (3 / 7) / 2)
    assert seg_miou(lab([0] * 10, 1), lab([0] * 10, 1)) == 1.0


def test_completely_disjoint_is_zero():
    # truth segment 1 is empty in the prediction's only matched pair
    t = SegmentLabeling([0, 0, 0], ["plane", "sphere"])
    p = SegmentLabeling([1, 1, 1], ["plane", "plane"])
    iou = iou_matrix(p, t)
    assert iou[0].sum() == 0 and iou[1, 0] == 1
    t2 = SegmentLabeling([1, 1, 1], ["plane", "sphere"])
    p2 = SegmentLabeling([0, 0, 0], ["plane"])
    assert iou_matrix(p2, t2)[0, 0] == 0


def test_swapped_halves_give_one_third():
    truth = np.repeat([0, 1], 100)
    pred = truth.copy()
    pred[:50] = 1
    pred[100:150] = 0
    assert seg_miou(lab(pred, 2), lab(truth, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_one_way_flip():
    truth = np.repeat([0, 1], 100)
    pred = truth.copy()
    pred[:50] = 1
    # IOUs 50/100 and 100/150
    assert seg_miou(lab(pred, 2), lab(truth, 2)) == pytest.approx((0.5 + 2 / 3) / 2, abs=1e-15)


def test_label_miou_counts():
    t = SegmentLabeling(np.repeat(np.arange(4), 3), ["plane", "sphere", "cone", "cylinder"])
    assert label_miou(t, t) == 1.0
    wrong = SegmentLabeling(t.labels, ["sphere", "plane", "cylinder", "cone"])
    assert label_miou(wrong, t) == 0.0
    three = SegmentLabeling(t.labels, ["plane", "sphere", "cone", "open_bspline"])
    assert label_miou(three, t) == 0.75


def test_labeling_validation():
    with pytest.raises(MetricsError):
        SegmentLabeling([0, 2], ["plane", "plane"])
    with pytest.raises(MetricsError):
        SegmentLabeling([0], [])
    w = np.eye(3)[[0, 2, 1]]
    assert SegmentLabeling.from_membership(w, ["plane"] * 3).labels.tolist() == [0, 2, 1]
    with pytest.raises(MetricsError):
        SegmentLabeling.from_membership(0.5 * w, ["plane"] * 3)


@settings(max_examples=150, deadline=None)
@given(
    n=st.integers(1, 50),
    kp=st.integers(1, 5),
    kt=st.integers(1, 5),
    seed=st.integers(0, 2**32 - 1),
)
def test_scores_match_brute_force(n, kp, kt, seed):
    rng = np.random.default_rng(seed)
    pl, tl = rng.integers(0, kp, n), rng.integers(0, kt, n)
    kinds = ["plane", "sphere", "cylinder", "cone", "open_bspline"]
    p = SegmentLabeling(pl, [kinds[i] for i in rng.integers(0, 5, kp)])
    t = SegmentLabeling(tl, [kinds[i] for i in rng.integers(0, 5, kt)])
    np.testing.assert_allclose(iou_matrix(p, t), brute_iou(pl, tl, kp, kt), atol=1e-12)
    assert abs(seg_miou(p, t) - brute_seg_miou(pl, tl, kp, kt)) < 1e-12
    # label score of the chosen pairing recomputed by hand
    pairs = match_segments(p, t)
    want = sum(p.types[k] == t.types[j] for k, j in pairs) / kt
    assert abs(label_miou(p, t) - want) < 1e-12
    # relabeling either side leaves the score alone
    perm = rng.permutation(kp)
    q = SegmentLabeling(perm[pl], [p.types[i] for i in np.argsort(perm)])
    assert abs(seg_miou(q, t) - seg_miou(p, t)) < 1e-12


def test_chamfer_cases():
    x = np.random.default_rng(0).random((20, 3))
    assert chamfer_distance(x, x) == (0.0, 0.0, 0.0)
    d = 0.7
    assert chamfer_distance([[0, 0, 0]], [[d, 0, 0]]) == pytest.approx((d * d,) * 3)
    with pytest.raises(MetricsError):
        chamfer_distance(np.zeros((0, 3)), x)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), na=st.integers(1, 50), nb=st.integers(1, 50))
def test_chamfer_brute_force_and_symmetry(seed, na, nb):
    rng = np.random.default_rng(seed)
    a, b = rng.random((na, 3)), rng.random((nb, 3))
    got = chamfer_distance(a, b)
    np.testing.assert_allclose(got, brute_chamfer(a, b), rtol=0, atol=1e-12)
    back = chamfer_distance(b, a)
    assert back[0] == pytest.approx(got[1], abs=1e-15) and back[2] == pytest.approx(got[2], abs=1e-15)


def test_p_coverage_hand_counted():
    rng = np.random.default_rng(1)
    plane = Plane((0, 0, 1), 0.0)
    on = np.column_stack([rng.random((10, 2)), np.zeros(10)])
    off = on + [0, 0, 0.05]
    assert p_coverage(on, [plane]) == 1.0
    assert p_coverage(off, [plane]) == 0.0
    assert p_coverage(np.vstack([on, off]), [plane]) == 0.5
    # 3 of 8 within 0.01 of one of two surfaces
    pts = np.array([[0, 0, 0.005], [0, 0, 0.02], [0, 0, 2.009], [0, 0, 1.0],
                    [0, 0, 3.0], [0, 0, -0.011], [0, 0, 1.991], [0, 0, 1.5]])
    assert p_coverage(pts, [plane, Sphere((0, 0, 0), 2.0)], epsilon=0.01) == 3 / 8


def test_residual_error():
    plane = Plane((0, 0, 1), 0.0)
    pts = np.column_stack([np.random.default_rng(2).random((30, 2)), np.full(30, 0.01)])
    assert residual_error([plane], [pts]) == pytest.approx(0.01)
    assert residual_error([plane], [pts - [0, 0, 0.01]]) == 0


def test_residual_direct_averaging_on_scene():
    scene = make_scene("primitives", 3, n_per=300)
    segs = [scene.points[scene.labels == k] for k in range(3)]
    per = []
    for patch, s in zip(scene.patches, segs):
        if isinstance(patch, Plane):
            d = np.abs(s @ patch.normal - patch.offset)
        elif isinstance(patch, Sphere):
            d = np.abs(np.linalg.norm(s - patch.center, axis=1) - patch.radius)
        else:
            w = s - patch.center
            w = w - np.outer(w @ patch.direction, patch.direction)
            d = np.abs(np.linalg.norm(w, axis=1) - patch.radius)
        per.append(d.mean())
    assert abs(residual_error(scene.patches, segs) - np.mean(per)) < 1e-12


def test_reconstruct_and_evaluate_perfect_prediction():
    scene = make_scene("primitives", 4, n_per=400, noise=False)
    t = SegmentLabeling(scene.labels, scene.kinds)
    segs = [scene.points[scene.labels == k] for k in range(3)]
    r = reconstruct_samples(scene.patches, segs, 900, np.random.default_rng(0))
    assert r.shape == (900, 3)
    rep = evaluate(scene.points, t, scene.patches, t, scene.patches, seed=1, cd_samples=2000)
    assert rep.seg_miou == 1 and rep.label_miou == 1
    assert rep.residual < 1e-12
    assert rep.p_coverage == 1.0
    assert rep.chamfer < 1e-3
    again = evaluate(scene.points, t, scene.patches, t, scene.patches, seed=1, cd_samples=2000)
    assert again.to_dict() == rep.to_dict()
