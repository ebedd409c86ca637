"""Independent reference implementations used as test oracles.

Nothing here imports from the package under test.
"""

import itertools
from functools import lru_cache

import numpy as np


def cox_de_boor(i, k, u, t):
    """Recursive N_{i,k}(u) on knot tuple ``t``; the last non-empty span is closed at the right."""
    if k == 0:
        if t[i] <= u < t[i + 1]:
            return 1.0
        # u at the very end belongs to the last non-empty span
        if u == t[-1] and t[i] < t[i + 1] == t[-1]:
            return 1.0
        return 0.0
    out = 0.0
    d1 = t[i + k] - t[i]
    if d1 > 0:
        out += (u - t[i]) / d1 * cox_de_boor(i, k - 1, u, t)
    d2 = t[i + k + 1] - t[i + 1]
    if d2 > 0:
        out += (t[i + k + 1] - u) / d2 * cox_de_boor(i + 1, k - 1, u, t)
    return out


def open_basis(u, knots, count, degree=3):
    t = tuple(float(x) for x in knots)
    return np.array([cox_de_boor(i, degree, u, t) for i in range(count)])


def periodic_basis(u, count, degree=3):
    """Uniform periodic basis as a wrapped open basis on the extended knots (j - 3) / n."""
    t = tuple((j - degree) / count for j in range(count + 2 * degree + 2))
    out = np.zeros(count)
    for j in range(count + degree + 1):
        out[j % count] += cox_de_boor(j, degree, u, t)
    return out


def surface_point(u, v, ctrl, knots_u, knots_v, closed_u=False, closed_v=False):
    p, q, _ = ctrl.shape
    bu = periodic_basis(u, p) if closed_u else open_basis(u, knots_u, p)
    bv = periodic_basis(v, q) if closed_v else open_basis(v, knots_v, q)
    return np.einsum("i,j,ijk->k", bu, bv, ctrl)


def brute_assignment(cost):
    """Minimum total cost over every injective map of the smaller side."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, c] for i, c in enumerate(cols)) for cols in itertools.permutations(range(m), n))
    return brute_assignment(cost.T)


def brute_chamfer(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    p = d.min(axis=1).mean()
    s = d.min(axis=0).mean()
    return p, s, 0.5 * (p + s)


def brute_iou(pred, truth, kp, kt):
    out = np.zeros((kp, kt))
    for k in range(kp):
        for j in range(kt):
            a = set(np.flatnonzero(pred == k))
            b = set(np.flatnonzero(truth == j))
            u = len(a | b)
            out[k, j] = len(a & b) / u if u else 0.0
    return out


def brute_seg_miou(pred, truth, kp, kt):
    """Best mean IOU over every injective pairing, by enumeration."""
    iou = brute_iou(pred, truth, kp, kt)
    best = 0.0
    if kp >= kt:
        for rows in itertools.permutations(range(kp), kt):
            best = max(best, sum(iou[r, j] for j, r in enumerate(rows)))
    else:
        for cols in itertools.permutations(range(kt), kp):
            best = max(best, sum(iou[k, c] for k, c in enumerate(cols)))
    return best / kt


@lru_cache(maxsize=None)
def grid_symmetries(n, closed):
    """Index maps of an n x n grid: flips and transpose, plus cyclic u shifts when closed.

    Built element by element from explicit (i, j) formulas.
    """
    maps = set()
    shifts = range(n) if closed else [0]
    for s in shifts:
        for ru in (0, 1):
            for rv in (0, 1):
                for tr in (0, 1):
                    perm = []
                    for i in range(n):
                        for j in range(n):
                            a, b = (j, i) if tr else (i, j)
                            a = n - 1 - a if ru else a
                            b = n - 1 - b if rv else b
                            a = (a - s) % n
                            perm.append(a * n + b)
                    maps.add(tuple(perm))
    return sorted(maps)
