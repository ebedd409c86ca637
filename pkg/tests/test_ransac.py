import numpy as np
import pytest

from parsefit.primitives import PrimitiveKind, primitive_distance
from parsefit.ransac import (
    MINIMAL_SET,
    RansacConfig,
    RansacError,
    _SOLVERS,
    coverage,
    detect_primitives,
    inlier_mask,
    surface_normals,
)
from parsefit.synth import make_scene, sample_cone, sample_cylinder, sample_plane, sample_sphere


def test_minimal_set_sizes():
    assert MINIMAL_SET == {
        PrimitiveKind.PLANE: 3,
        PrimitiveKind.SPHERE: 4,
        PrimitiveKind.CYLINDER: 2,
        PrimitiveKind.CONE: 3,
    }


@pytest.mark.parametrize(
    "kind,sampler",
    [
        (PrimitiveKind.PLANE, lambda r: sample_plane(r, 50, (0.1, 0.2, 0.3), (1, 2, 3), 1.0)),
        (PrimitiveKind.SPHERE, lambda r: sample_sphere(r, 50, (0.1, 0.2, 0.3), 0.4)),
        (PrimitiveKind.CYLINDER, lambda r: sample_cylinder(r, 50, (0.1, 0, 0), (1, 1, 0), 0.3, 1.0)),
        (PrimitiveKind.CONE, lambda r: sample_cone(r, 50, (0, 0.1, 0), (0, 0, 1), 0.5, 0.2, 1.0)),
    ],
)
def test_minimal_solvers_are_exact(kind, sampler):
    rng = np.random.default_rng(0)
    pts, nrm, _ = sampler(rng)
    m = MINIMAL_SET[kind]
    patch = _SOLVERS[kind](pts[:m], nrm[:m])
    assert patch is not None
    assert primitive_distance(pts, patch).max() < 1e-8
    np.testing.assert_allclose(np.abs(np.sum(surface_normals(pts, patch) * nrm, axis=1)), 1, atol=1e-8)


def test_inlier_mask_checks_normals():
    rng = np.random.default_rng(1)
    pts, nrm, sphere = sample_sphere(rng, 100, (0, 0, 0), 1.0)
    cfg = RansacConfig()
    assert inlier_mask(pts, nrm, sphere, cfg).all()
    assert inlier_mask(pts, -nrm, sphere, cfg).all()
    tilted = np.roll(nrm, 1, axis=1)
    assert inlier_mask(pts, tilted, sphere, cfg).mean() < 0.5


def test_single_plane():
    scene = make_scene("plane", 0)
    found = detect_primitives(scene.points, scene.normals)
    assert len(found) == 1 and found[0].kind == PrimitiveKind.PLANE
    assert coverage(found, len(scene.points)) >= 0.99


def test_two_spheres():
    scene = make_scene("two_spheres", 0)
    found = detect_primitives(scene.points, scene.normals)
    assert [d.kind for d in found] == [PrimitiveKind.SPHERE] * 2
    truth = sorted(scene.patches, key=lambda s: s.radius)
    got = sorted((d.patch for d in found), key=lambda s: s.radius)
    for a, b in zip(got, truth):
        np.testing.assert_allclose(a.center, b.center, atol=1e-3)
        assert abs(a.radius - b.radius) < 1e-3


def test_detections_disjoint_and_deterministic():
    scene = make_scene("primitives", 2, n_per=800)
    cfg = RansacConfig(seed=5, restarts=1)
    a = detect_primitives(scene.points, scene.normals, cfg)
    b = detect_primitives(scene.points, scene.normals, cfg)
    idx = np.concatenate([d.inliers for d in a])
    assert len(np.unique(idx)) == len(idx)
    assert idx.min() >= 0 and idx.max() < len(scene.points)
    assert [d.kind for d in a] == [d.kind for d in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.inliers, y.inliers)
    for d in a:
        assert len(d.inliers) >= cfg.min_inliers
        res = primitive_distance(scene.points[d.inliers], d.patch)
        assert res.mean() <= cfg.inlier_epsilon


def test_errors():
    with pytest.raises(RansacError):
        detect_primitives(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(RansacError):
        detect_primitives(np.zeros((10, 3)), None)
    with pytest.raises(RansacError):
        RansacConfig(inlier_epsilon=0)
    with pytest.raises(RansacError):
        RansacConfig(min_inliers=2)


def test_degenerate_minimal_sets_are_rejected():
    flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    up = np.tile([0, 0, 1.0], (4, 1))
    assert _SOLVERS[PrimitiveKind.SPHERE](flat, up) is None
    assert _SOLVERS[PrimitiveKind.PLANE](np.outer(np.arange(3.0), [1, 1, 1]), up) is None
    # parallel normals leave the cylinder axis undefined
    assert _SOLVERS[PrimitiveKind.CYLINDER](flat[:2], up[:2]) is None
