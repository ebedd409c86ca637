import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from oracles import grid_symmetries
from parsefit.bspline import BSplinePatch, greville_abscissae, sample_uniform
from parsefit.embedding import normalize_rows
from parsefit.losses import (
    LossError,
    TripletConfig,
    classification_loss,
    control_point_loss,
    embedding_loss,
    grid_laplacian,
    grid_permutations,
    laplacian_loss,
    patch_distance_loss,
    triplet_loss,
)
from parsefit.primitives import Plane, Sphere
from parsefit.synth import random_smooth_patch


def unit(rng, *shape):
    return normalize_rows(rng.normal(size=(int(np.prod(shape[:-1])) if len(shape) > 1 else 1, shape[-1])))


def test_triplet_zero_and_margin_cases():
    a = np.array([1.0, 0, 0])
    assert triplet_loss(a, a, -a) == 0.0
    assert triplet_loss(a, a, a) == pytest.approx(0.9)
    assert triplet_loss(a, a, a, TripletConfig(margin=0.25)) == pytest.approx(0.25)


def test_triplet_matches_direct_arithmetic():
    rng = np.random.default_rng(0)
    a, b, c = (unit(rng, 50, 8) for _ in range(3))
    want = [max(np.sqrt(np.sum((x - y) ** 2)) - np.sqrt(np.sum((x - z) ** 2)) + 0.9, 0) for x, y, z in zip(a, b, c)]
    np.testing.assert_allclose(triplet_loss(a, b, c), want, atol=1e-12)


def test_triplet_rejects_non_unit():
    with pytest.raises(LossError):
        triplet_loss([1.0, 1, 0], [1.0, 0, 0], [0, 1.0, 0])


@settings(max_examples=50, deadline=None)
@given(t1=st.floats(0, np.pi), t2=st.floats(0, np.pi))
def test_triplet_monotone_in_negative_distance(t1, t2):
    a = np.array([1.0, 0, 0])
    b = np.array([np.cos(0.3), np.sin(0.3), 0])
    c1 = np.array([np.cos(t1), 0, np.sin(t1)])
    c2 = np.array([np.cos(t2), 0, np.sin(t2)])
    # larger angle to the negative means larger distance
    lo, hi = (c1, c2) if t1 <= t2 else (c2, c1)
    assert triplet_loss(a, b, hi) <= triplet_loss(a, b, lo) + 1e-15
    near = np.array([np.cos(0.1), np.sin(0.1), 0])
    assert triplet_loss(a, near, lo) <= triplet_loss(a, b, lo) + 1e-15


def test_embedding_loss_sums_shape_means():
    rng = np.random.default_rng(1)
    sets = [tuple(unit(rng, n, 4) for _ in range(3)) for n in (5, 9)]
    want = sum(triplet_loss(*s).mean() for s in sets)
    assert embedding_loss(sets) == pytest.approx(want, abs=1e-12)


def test_classification_loss():
    assert classification_loss(np.eye(6), np.arange(6)) == 0.0
    assert classification_loss(np.full((4, 6), 1 / 6), [0, 1, 2, 5]) == pytest.approx(np.log(6), abs=1e-12)
    rng = np.random.default_rng(2)
    p = rng.random((30, 6))
    p /= p.sum(axis=1, keepdims=True)
    t = rng.integers(0, 6, 30)
    want = -sum(np.log(p[i, t[i]]) for i in range(30)) / 30
    assert classification_loss(p, t) == pytest.approx(want, abs=1e-12)
    with pytest.raises(LossError):
        classification_loss(p, t + 6)


@pytest.mark.parametrize("closed,count", [(False, 8), (True, 160)])
def test_permutation_counts_match_explicit_maps(closed, count):
    perms = grid_permutations(20, closed)
    assert len(perms) == count
    assert sorted(map(tuple, perms.tolist())) == grid_symmetries(20, closed)
    np.testing.assert_array_equal(perms[0], np.arange(400))


@pytest.mark.parametrize("closed", [False, True])
def test_control_point_loss_zero_on_every_permutation(closed):
    rng = np.random.default_rng(3)
    g = rng.normal(size=(20, 20, 3))
    flat = g.reshape(-1, 3)
    assert control_point_loss(g, g, closed) == 0
    for perm in grid_permutations(20, closed):
        assert control_point_loss(flat[perm].reshape(20, 20, 3), g, closed) == 0


def test_open_loss_symmetric_under_permuted_ground_truth():
    rng = np.random.default_rng(3)
    c, g = rng.normal(size=(2, 20, 20, 3))
    base = control_point_loss(c, g)
    for perm in grid_permutations(20):
        assert control_point_loss(c, g.reshape(-1, 3)[perm].reshape(20, 20, 3)) == pytest.approx(base, abs=1e-12)


def test_closed_loss_symmetric_under_shifts_and_reversals():
    # The closed set includes transposes, so it is not closed under composition;
    # the shift/reversal part is, and the loss is symmetric under it.
    rng = np.random.default_rng(4)
    c, g = rng.normal(size=(2, 20, 20, 3))
    base = control_point_loss(c, g, True)
    for s in (1, 7, 19):
        for h in (np.roll(g, s, 0), np.roll(g, s, 0)[::-1], np.roll(g, s, 0)[:, ::-1]):
            assert control_point_loss(c, h, True) == pytest.approx(base, abs=1e-12)


def test_control_point_loss_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        c, g = rng.normal(size=(2, 20, 20, 3))
        fc, fg = c.reshape(-1, 3), g.reshape(-1, 3)
        want = min(sum(np.sum((fc[i] - fg[p[i]]) ** 2) for i in range(400)) for p in grid_symmetries(20, False)) / 400
        assert control_point_loss(c, g) == pytest.approx(want, abs=1e-10)


def test_grid_laplacian_of_linear_grid_vanishes():
    s, t = np.meshgrid(np.arange(10.0), np.arange(10.0), indexing="ij")
    x = np.stack([s, t, 2 * s - t], -1).reshape(-1, 3)
    lap, interior = grid_laplacian(x, 10)
    assert np.abs(lap).max() == 0
    assert interior.sum() == 64


def cap(r):
    g = np.linspace(-0.5, 0.5, 6)
    s, t = np.meshgrid(g, g, indexing="ij")
    z = np.sqrt(1.0 - s**2 - t**2)
    return BSplinePatch.from_points(r * np.stack([s, t, z], -1))


def loop_laplacian(x, n):
    g = x.reshape(n, n, 3)
    out = {}
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            out[i * n + j] = 4 * g[i, j] - g[i - 1, j] - g[i + 1, j] - g[i, j - 1] - g[i, j + 1]
    return out


def test_laplacian_loss_zero_cases():
    # controls at the Greville sites make the patch a linear map of uv
    s, t = np.meshgrid(greville_abscissae(5), greville_abscissae(5), indexing="ij")
    flat = BSplinePatch.from_points(np.stack([s, t, np.zeros_like(s)], -1))
    tilted = BSplinePatch.from_points(flat.control_points @ np.array([[1, 0, 0.2], [0, 1, 0.1], [0, 0, 1]]))
    _, gt = sample_uniform(tilted, 40, 40)
    assert laplacian_loss(flat, gt) < 1e-24
    p = cap(1.0)
    assert laplacian_loss(p, sample_uniform(p, 40, 40)[1]) == 0


def test_laplacian_loss_matches_explicit_recomputation():
    n = 40
    pred = cap(1.0)
    _, x = sample_uniform(pred, n, n)
    _, y = sample_uniform(cap(1.01), n, n)
    rows, cols = linear_sum_assignment(((x[:, None] - y[None]) ** 2).sum(-1))
    lx, ly = loop_laplacian(x, n), loop_laplacian(y, n)
    diffs = [np.sum((lx[r] - ly[c]) ** 2) for r, c in zip(rows, cols) if r in lx and c in ly]
    assert laplacian_loss(pred, y) == pytest.approx(np.mean(diffs), abs=1e-10)


def test_laplacian_loss_rigid_invariance():
    rng = np.random.default_rng(5)
    pred = random_smooth_patch(rng, 6, 6)
    gt = random_smooth_patch(rng, 6, 6)
    _, y = sample_uniform(gt, 40, 40)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    shift = rng.normal(size=3)
    moved = BSplinePatch.from_points(pred.control_points @ q.T + shift)
    assert laplacian_loss(moved, y @ q.T + shift) == pytest.approx(laplacian_loss(pred, y), abs=1e-9)


def test_patch_distance_loss():
    rng = np.random.default_rng(6)
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    s = Sphere((0, 0, 0), 1.0)
    assert patch_distance_loss([s], [d]) == pytest.approx(0, abs=1e-28)
    assert patch_distance_loss([s], [1.03 * d]) == pytest.approx(0.03**2, abs=1e-15)
    plane = Plane((0, 0, 1), 0.2)
    pts = rng.random((300, 3))
    want = np.mean((pts[:, 2] - 0.2) ** 2)
    both = 0.5 * (want + 0.03**2)
    assert patch_distance_loss([plane, s], [pts, 1.03 * d]) == pytest.approx(both, abs=1e-12)
    with pytest.raises(LossError):
        patch_distance_loss([], [])
