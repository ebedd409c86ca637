"""Mean-shift clustering on the unit hypersphere with a von Mises-Fisher kernel."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp, softmax

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-4
DEFAULT_NEIGHBOR_RANK = 150
DEFAULT_ITERATIONS = 50
DEFAULT_TOLERANCE = 1e-5
_CHUNK = 512


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterResult:
    centers: np.ndarray
    hard_labels: np.ndarray
    membership: np.ndarray
    beta: float
    iterations_run: int = 0
    center_indices: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.centers)


def estimate_bandwidth(embeddings, neighbor_rank: int = DEFAULT_NEIGHBOR_RANK, floor: float = BANDWIDTH_FLOOR) -> float:
    """Mean distance from each row to its ``neighbor_rank``-th nearest neighbor."""
    y = np.asarray(embeddings, dtype=float)
    n = len(y)
    if n < 2:
        raise ClusteringError("bandwidth needs at least 2 points")
    rank = int(min(max(neighbor_rank, 1), n - 1))
    d, _ = cKDTree(y).query(y, k=[rank + 1])
    beta = float(d.mean())
    if beta < floor:
        log.warning("degenerate bandwidth %.3g clamped to %.3g", beta, floor)
        beta = floor
    return beta


def _shift(z, y32, inv):
    # Kernel weights in single precision; the mean is renormalized in double.
    logits = z.astype(np.float32) @ y32.T
    logits -= logits.max(axis=1, keepdims=True)
    logits *= np.float32(inv)
    w = np.exp(logits, out=logits)
    out = (w @ y32).astype(float) / w.sum(axis=1, dtype=float)[:, None]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def mean_shift(
    embeddings,
    beta: float,
    max_iterations: int = DEFAULT_ITERATIONS,
    tolerance: float = DEFAULT_TOLERANCE,
    return_iterations: bool = False,
):
    """Iterate each seed to its kernel-weighted mean of the fixed embeddings.

    Rows whose displacement falls below ``tolerance`` are frozen; the loop
    ends once every row is frozen or after ``max_iterations``.
    """
    if not beta > 0:
        raise ClusteringError("bandwidth must be positive")
    y = np.asarray(embeddings, dtype=float)
    z = y.copy()
    y32 = y.astype(np.float32)
    inv = 1.0 / beta**2
    active = np.arange(len(z))
    it = 0
    while it < max_iterations and len(active):
        it += 1
        moved = np.empty(len(active))
        for s in range(0, len(active), _CHUNK):
            rows = active[s : s + _CHUNK]
            new = _shift(z[rows], y32, inv)
            moved[s : s + _CHUNK] = np.linalg.norm(new - z[rows], axis=1)
            z[rows] = new
        active = active[moved >= tolerance]
    return (z, it) if return_iterations else z


def log_density(z, y, beta: float) -> np.ndarray:
    """log of sum_j exp(z_i . y_j / beta^2), chunked over rows."""
    inv = 1.0 / beta**2
    out = np.empty(len(z))
    for s in range(0, len(z), _CHUNK):
        out[s : s + _CHUNK] = logsumexp((z[s : s + _CHUNK] @ y.T) * inv, axis=1)
    return out


def extract_clusters(z, y, beta: float, iterations_run: int = 0) -> ClusterResult:
    """Non-maximum suppression on density, then nearest-center assignment.

    Ties in density go to the lower point index; cluster ids follow
    decreasing density.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.shape != y.shape:
        raise ClusteringError("converged and original embeddings differ in shape")
    dens = log_density(z, y, beta)
    order = np.lexsort((np.arange(len(z)), -dens))
    tree = cKDTree(z)
    suppressed = np.zeros(len(z), dtype=bool)
    centers = []
    for i in order:
        if suppressed[i]:
            continue
        centers.append(i)
        suppressed[tree.query_ball_point(z[i], beta)] = True
    center_idx = np.array(centers)
    c = z[center_idx]
    labels = np.argmax(z @ c.T, axis=1)  # unit rows: max dot = nearest
    membership = np.zeros((len(z), len(c)))
    membership[np.arange(len(z)), labels] = 1.0
    return ClusterResult(c, labels, membership, beta, iterations_run, center_idx)


def soft_membership(z, centers, beta: float) -> np.ndarray:
    """Row-stochastic W[i, k] proportional to exp(c_k . z_i / beta^2)."""
    z = np.asarray(z, dtype=float)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    return softmax((z @ centers.T) / beta**2, axis=1)


def cluster(embeddings, neighbor_rank: int = DEFAULT_NEIGHBOR_RANK, max_iterations: int = DEFAULT_ITERATIONS,
            tolerance: float = DEFAULT_TOLERANCE, beta: float | None = None) -> ClusterResult:
    y = np.asarray(embeddings, dtype=float)
    if beta is None:
        beta = estimate_bandwidth(y, neighbor_rank)
    z, it = mean_shift(y, beta, max_iterations, tolerance, return_iterations=True)
    return extract_clusters(z, y, beta, it)
