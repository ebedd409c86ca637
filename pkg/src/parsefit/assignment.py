"""Minimum-cost linear assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class Assignment:
    rows: np.ndarray
    cols: np.ndarray
    total_cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def __len__(self) -> int:
        return len(self.rows)


def solve_assignment(costs) -> Assignment:
    """Minimum-cost maximal matching of rows to columns.

    Rectangular matrices match ``min(R, C)`` pairs. Pairs are sorted by row.
    """
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError("cost matrix must be 2-D and non-empty")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(c)
    return Assignment(rows, cols, float(c[rows, cols].sum()))
