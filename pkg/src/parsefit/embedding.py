"""Per-point unit embeddings for clustering."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class EmbeddingError(ValueError):
    pass


def normalize_rows(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2:
        raise EmbeddingError("embeddings must be a 2-D matrix")
    if not np.all(np.isfinite(rows)):
        raise EmbeddingError("non-finite embedding values")
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise EmbeddingError(f"zero-norm embedding row at index {int(np.argmin(norms))}")
    return rows / norms[:, None]


def load_embeddings(path) -> np.ndarray:
    """Read an ``N D`` header followed by N rows of D reals; rows are renormalized."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise EmbeddingError("empty embedding file")
    header = lines[0].split()
    try:
        n, d = (int(x) for x in header)
    except ValueError:
        raise EmbeddingError(f"malformed header: {lines[0]!r}") from None
    if n < 1 or d < 1 or len(lines) - 1 != n:
        raise EmbeddingError(f"header declares {n} rows, file has {len(lines) - 1}")
    try:
        rows = np.array([[float(x) for x in ln.split()] for ln in lines[1:]])
    except ValueError as exc:
        raise EmbeddingError(str(exc)) from None
    if rows.shape != (n, d):
        raise EmbeddingError(f"expected {d} values per row")
    return normalize_rows(rows)


def save_embeddings(path, rows) -> None:
    rows = np.asarray(rows, dtype=float)
    body = "\n".join(" ".join(repr(float(x)) for x in row) for row in rows)
    Path(path).write_text(f"{rows.shape[0]} {rows.shape[1]}\n{body}\n")


SIGN_THRESHOLD = 0.1


def canonicalize_normals(normals, threshold: float = SIGN_THRESHOLD) -> np.ndarray:
    """Flip each normal so its first non-negligible coordinate is positive.

    Components with magnitude at most ``threshold`` are skipped so that a
    noisy axis-aligned normal does not flip on the sign of its noise.
    """
    n = np.asarray(normals, dtype=float)
    nz = np.abs(n) > threshold
    nz[~nz.any(axis=1)] = n[~nz.any(axis=1)] != 0
    first = np.where(nz.any(axis=1), nz.argmax(axis=1), 0)
    sign = np.where(n[np.arange(len(n)), first] < 0, -1.0, 1.0)
    return n * sign[:, None]


def geometric_embedding(positions, normals=None, scale_position: float = 1.0, scale_normal: float = 1.0):
    """Unit rows of ``(scale_position * p, scale_normal * n)``."""
    p = np.asarray(positions, dtype=float)
    parts = [scale_position * p]
    if scale_normal > 0:
        if normals is None:
            raise EmbeddingError("normals required when scale_normal > 0")
        parts.append(scale_normal * canonicalize_normals(normals))
    return normalize_rows(np.hstack(parts))
