"""Deterministic k-nearest-neighbor queries.

Both paths rank candidates by the key (squared distance, point index) and
exclude the query point's own index, so results are reproducible down to
tie handling. knn_fast must agree with knn_brute element for element on
every input; the brute-force path is the oracle.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .io import Points, as_points

NeighborList = NDArray[np.int64]  # (M, k), ascending (distance, index)


def _check_k(m: int, k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k >= m:
        raise ValueError(f"k = {k} must be smaller than the cloud size {m}")


def knn_brute(cloud: Points, k: int) -> NeighborList:
    """Exhaustive Euclidean search; ties broken by ascending point index."""
    pts = as_points(cloud)
    m = pts.shape[0]
    _check_k(m, k)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)  # self-exclusion by index
    # stable sort keeps equal distances in ascending index order
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def knn_fast(cloud: Points, k: int) -> NeighborList:
    """kd-tree accelerated search, identical to knn_brute on every input.

    The tree only proposes candidates; the final ranking recomputes
    squared distances with the same arithmetic as the brute-force path
    and sorts by (distance, index). Whenever a candidate set cannot be
    proven complete (ties straddling the k-th distance), an exact ball
    query widens it.
    """
    pts = as_points(cloud)
    m = pts.shape[0]
    _check_k(m, k)

    tree = cKDTree(pts)
    kq = min(m, k + 2)  # +1 for self, +1 to expose boundary ties
    dist, idx = tree.query(pts, k=kq)

    # Drop the query's own index from each candidate row. With >= kq
    # coincident points the tree may omit the query itself; drop the
    # farthest candidate instead to keep rows rectangular.
    rows = np.arange(m)
    is_self = idx == rows[:, None]
    keep_order = np.argsort(is_self, axis=1, kind="stable")  # self entry moves last
    cand = np.take_along_axis(idx, keep_order[:, : kq - 1], axis=1)

    diff = pts[cand] - pts[:, None, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    order = np.lexsort((cand, d2), axis=1)
    chosen = np.take_along_axis(cand, order[:, :k], axis=1).astype(np.int64)

    if kq == m:
        return chosen  # candidate set is the whole cloud

    # Completeness margin: points outside the candidate list lie at
    # tree distance >= dist[:, -1].
    d2_kth = np.take_along_axis(d2, order[:, k - 1 : k], axis=1)[:, 0]
    r = dist[:, -1]
    unsafe = ~(d2_kth < r * r * (1.0 - 1e-9))
    for i in np.nonzero(unsafe)[0]:
        radius = r[i] * (1.0 + 1e-6)
        ball = np.array(
            [j for j in tree.query_ball_point(pts[i], radius) if j != i],
            dtype=np.int64,
        )
        bd = pts[ball] - pts[i]
        bd2 = np.einsum("ij,ij->i", bd, bd)
        full = np.lexsort((ball, bd2))
        chosen[i] = ball[full[:k]]
    return chosen
