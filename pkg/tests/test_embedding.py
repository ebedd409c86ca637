import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from parsefit.clustering import cluster
from parsefit.embedding import (
    EmbeddingError,
    canonicalize_normals,
    geometric_embedding,
    load_embeddings,
    normalize_rows,
    save_embeddings,
)
from parsefit.pipeline import normalize_positions
from parsefit.synth import make_scene


def test_load_renormalizes_rows(tmp_path):
    f = tmp_path / "e.txt"
    f.write_text("2 3\n1 0 0\n0 2 0\n")
    np.testing.assert_array_equal(load_embeddings(f), [[1, 0, 0], [0, 1, 0]])


@pytest.mark.parametrize(
    "body",
    ["2 3\n1 0 0\n0 0 0\n", "3 3\n1 0 0\n0 1 0\n", "2 x\n1 0\n0 1\n", "", "2 3\n1 0\n0 1 0\n", "1 2\nnan 1\n"],
)
def test_load_rejects_malformed(tmp_path, body):
    f = tmp_path / "e.txt"
    f.write_text(body)
    with pytest.raises(EmbeddingError):
        load_embeddings(f)


def test_save_load_round_trip(tmp_path):
    rows = normalize_rows(np.random.default_rng(0).normal(size=(20, 5)))
    save_embeddings(tmp_path / "e.txt", rows)
    np.testing.assert_allclose(load_embeddings(tmp_path / "e.txt"), rows, rtol=0, atol=1e-15)


def test_identical_inputs_give_identical_rows():
    y = geometric_embedding(np.ones((3, 3)), np.tile([0, 0, 1.0], (3, 1)))
    assert np.all(y == y[0])


@settings(max_examples=50, deadline=None)
@given(
    p=arrays(float, (8, 3), elements=st.floats(-10, 10)),
    n=arrays(float, (8, 3), elements=st.floats(-1, 1)),
    sp=st.floats(0.1, 5),
    sn=st.floats(0.1, 5),
)
def test_rows_are_unit(p, n, sp, sn):
    n = n + [0, 0, 2.0]  # keep normals away from zero
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    y = geometric_embedding(p, n, sp, sn)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1, atol=1e-10)


def test_canonical_normals_ignore_sign():
    rng = np.random.default_rng(1)
    n = normalize_rows(rng.normal(size=(50, 3)))
    np.testing.assert_allclose(canonicalize_normals(n), canonicalize_normals(-n))


def test_normals_required_when_weighted():
    with pytest.raises(EmbeddingError):
        geometric_embedding(np.ones((2, 3)), None, 1.0, 1.0)
    assert geometric_embedding(np.ones((2, 3)), None, 1.0, 0.0).shape == (2, 3)


def test_two_parallel_planes_give_two_clusters():
    scene = make_scene("two_planes", 0)
    p, _, _ = normalize_positions(scene.points)
    y = geometric_embedding(p, scene.normals, 1.0, 1.0)
    # 400 points: the neighbor rank has to stay well inside one plane
    result = cluster(y, neighbor_rank=20)
    assert result.k == 2
    assert len(set(zip(result.hard_labels, scene.labels))) == 2
