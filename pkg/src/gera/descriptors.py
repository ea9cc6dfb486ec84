"""Per-point geometric descriptors from fully connected neighbor graphs.

Each point's descriptor is the vector of all pairwise Euclidean edge
lengths among n_desc graph vertices: the point itself plus its n_desc - 1
nearest neighbors. Edges are emitted in lexicographic order over vertex
list positions, so descriptor rows are a deterministic function of the
cloud and cache bit-exactly. Edge lengths are invariant to rigid motion,
which is what makes them a more stable network input than coordinates.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from .io import DescriptorSet, Points, as_points
from .neighbors import NeighborList, knn_fast


@lru_cache(maxsize=32)
def edge_index_pairs(n_desc: int) -> tuple[np.ndarray, np.ndarray]:
    """Vertex-position pairs (a, b) with a < b, lexicographic order."""
    pairs = [(a, b) for a in range(n_desc) for b in range(a + 1, n_desc)]
    arr = np.array(pairs, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def triangle_descriptor(p_i, p_j, p_k) -> NDArray[np.float64]:
    """Edge lengths (|ij|, |ik|, |jk|) of the triangle through three points."""
    pts = np.asarray([p_i, p_j, p_k], dtype=np.float64)
    if pts.shape != (3, 3) or not np.isfinite(pts).all():
        raise ValueError("triangle vertices must be three finite 3-vectors")
    a, b = edge_index_pairs(3)
    diff = pts[a] - pts[b]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def graph_vertices(neighbors: NeighborList, i: int, n_desc: int) -> NDArray[np.int64]:
    """Vertex list for point i: itself first, then its nearest neighbors."""
    if neighbors.shape[1] < n_desc - 1:
        raise ValueError(
            f"point {i} has {neighbors.shape[1]} neighbors, need {n_desc - 1}"
        )
    return np.concatenate(([i], neighbors[i, : n_desc - 1])).astype(np.int64)


def point_descriptor(
    cloud: Points, neighbors: NeighborList, i: int, n_desc: int
) -> NDArray[np.float64]:
    """All C(n_desc, 2) pairwise distances among point i's graph vertices."""
    pts = as_points(cloud)
    verts = pts[graph_vertices(neighbors, i, n_desc)]
    a, b = edge_index_pairs(n_desc)
    diff = verts[a] - verts[b]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def descriptors_from_neighbors(
    cloud: Points, neighbors: NeighborList, n_desc: int
) -> NDArray[np.float64]:
    """Descriptor rows for every point given precomputed neighbor lists."""
    pts = as_points(cloud)
    m = pts.shape[0]
    if neighbors.shape[0] != m or neighbors.shape[1] < n_desc - 1:
        raise ValueError("neighbor list shape does not cover the cloud")
    verts = np.concatenate(
        (np.arange(m, dtype=np.int64)[:, None], neighbors[:, : n_desc - 1]), axis=1
    )
    coords = pts[verts]  # (M, n_desc, 3)
    a, b = edge_index_pairs(n_desc)
    diff = coords[:, a, :] - coords[:, b, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def encode_cloud(cloud: Points, n_desc: int = 10) -> DescriptorSet:
    """Build the full descriptor set for a cloud.

    Deterministic: encoding the same cloud twice yields bit-identical
    rows, which is what allows the cache built once before training to
    stand in for online feature extraction.
    """
    pts = as_points(cloud)
    if n_desc < 3:
        raise ValueError(f"n_desc must be >= 3, got {n_desc}")
    if pts.shape[0] <= n_desc:
        raise ValueError(
            f"cloud of {pts.shape[0]} points is too small for n_desc = {n_desc}"
        )
    neighbors = knn_fast(pts, n_desc - 1)
    return DescriptorSet(
        vectors=descriptors_from_neighbors(pts, neighbors, n_desc), n_desc=n_desc
    )
