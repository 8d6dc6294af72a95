"""Minimum-cost linear assignment (Hungarian method, shortest augmenting paths)."""
from __future__ import annotations

import numpy as np

from .errors import ParameterError


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Row-to-column assignment for a square matrix using dual potentials.

    Rows are inserted one at a time; each insertion grows a Dijkstra-like
    alternating tree over reduced costs until a free column is reached. Ties
    go to the lowest column index.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.intp)  # match[j]: 1-based row on column j
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = np.nonzero(~used[1:])[0] + 1
            reduced = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = reduced < minv[free]
            minv[free[better]] = reduced[better]
            way[free[better]] = j0
            k = int(np.argmin(minv[free]))
            j1 = int(free[k])
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    rows = np.empty(n, dtype=np.intp)
    rows[match[1:] - 1] = np.arange(n)
    return rows


def hungarian(cost) -> list[tuple[int, int]]:
    """Optimal assignment minimizing total cost.

    Args:
        cost: ``(n, m)`` array of finite, non-negative costs. Rectangular
            inputs are padded internally with a constant sentinel.

    Returns:
        ``min(n, m)`` ``(row, col)`` pairs sorted by row.
    """
    c = np.asarray(cost, dtype=float)
    if c.size == 0:
        return []
    if c.ndim != 2:
        raise ParameterError(f"cost must be a 2-D matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ParameterError("cost matrix has non-finite entries")
    if (c < 0).any():
        raise ParameterError("cost matrix has negative entries")
    n, m = c.shape
    size = max(n, m)
    if n != m:
        padded = np.full((size, size), c.max() + 1.0)
        padded[:n, :m] = c
        c = padded
    cols = _solve_square(c)
    return [(r, int(cols[r])) for r in range(n) if cols[r] < m]


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=float)
    total = 0.0
    for r, col in pairs:
        total += c[r, col]
    return total
