import numpy as np
import pytest

from gera.descriptors import (
    encode_cloud,
    edge_index_pairs,
    point_descriptor,
    triangle_descriptor,
)
from gera.neighbors import knn_brute

from test_neighbors import random_rotation


def brute_pairwise_descriptor(vertices):
    """Independent O(n^2) double loop over all vertex index pairs."""
    out = []
    n = len(vertices)
    for a in range(n):
        for b in range(a + 1, n):
            out.append(np.linalg.norm(np.asarray(vertices[a]) - np.asarray(vertices[b])))
    return np.array(out)


def test_triangle_right_angle():
    desc = triangle_descriptor((0, 0, 0), (1, 0, 0), (0, 1, 0))
    np.testing.assert_allclose(desc, [1.0, 1.0, np.sqrt(2.0)], rtol=0, atol=0)


def test_triangle_degenerate_identical_points():
    np.testing.assert_array_equal(triangle_descriptor((2, 2, 2), (2, 2, 2), (2, 2, 2)), np.zeros(3))


def test_triangle_pythagorean():
    desc = triangle_descriptor((0, 0, 0), (3, 4, 0), (3, 4, 12))
    np.testing.assert_allclose(desc, [5.0, 13.0, 12.0], rtol=0, atol=1e-12)


def test_triangle_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        triangle_descriptor((0, 0, np.nan), (1, 0, 0), (0, 1, 0))


def test_triangle_inequality_random():
    rng = np.random.default_rng(8)
    for _ in range(200):
        pts = rng.normal(size=(3, 3)) * 40
        a, b, c = triangle_descriptor(*pts)
        slack = 1e-9 * max(a, b, c, 1.0)
        assert a + b >= c - slack and a + c >= b - slack and b + c >= a - slack


def test_smallest_graph_matches_triangle():
    cloud = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    nb = knn_brute(cloud, 2)
    desc = point_descriptor(cloud, nb, 0, 3)
    # pair order (0,1), (0,2), (1,2) over the vertex list [self, nn1, nn2]
    np.testing.assert_allclose(desc, [1.0, 1.0, np.sqrt(2.0)])


def test_descriptor_length_is_pair_count():
    rng = np.random.default_rng(1)
    cloud = rng.normal(size=(64, 3)) * 30
    desc = encode_cloud(cloud, 10)
    assert desc.vectors.shape == (64, 45)
    for n in range(3, 17):
        assert encode_cloud(cloud, n).dim == n * (n - 1) // 2


def test_point_descriptor_matches_brute_force():
    rng = np.random.default_rng(4)
    cloud = rng.normal(size=(30, 3)) * 20
    n_desc = 5
    nb = knn_brute(cloud, n_desc - 1)
    for i in (0, 7, 29):
        verts = [cloud[i]] + [cloud[j] for j in nb[i, : n_desc - 1]]
        expected = brute_pairwise_descriptor(verts)
        np.testing.assert_allclose(point_descriptor(cloud, nb, i, n_desc), expected, atol=1e-12)


def test_encode_matches_per_point_path():
    rng = np.random.default_rng(9)
    cloud = rng.normal(size=(50, 3)) * 15
    n_desc = 6
    desc = encode_cloud(cloud, n_desc)
    nb = knn_brute(cloud, n_desc - 1)
    for i in range(50):
        np.testing.assert_array_equal(desc.vectors[i], point_descriptor(cloud, nb, i, n_desc))


def test_encode_deterministic():
    rng = np.random.default_rng(12)
    cloud = rng.normal(size=(128, 3)) * 40
    a = encode_cloud(cloud, 10)
    b = encode_cloud(cloud, 10)
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_rigid_invariance():
    rng = np.random.default_rng(21)
    cloud = rng.normal(size=(96, 3)) * 35
    base = encode_cloud(cloud, 10)
    for _ in range(10):
        rot = random_rotation(rng)
        t = rng.normal(size=3) * 80
        moved = encode_cloud(cloud @ rot.T + t, 10)
        assert np.abs(moved.vectors - base.vectors).max() <= 1e-9


def test_uniform_scale_scales_descriptors():
    rng = np.random.default_rng(31)
    cloud = rng.normal(size=(40, 3)) * 10
    s = 3.7
    base = encode_cloud(cloud, 8)
    scaled = encode_cloud(cloud * s, 8)
    np.testing.assert_allclose(scaled.vectors, base.vectors * s, rtol=1e-9)


def test_permutation_equivariance():
    rng = np.random.default_rng(13)
    cloud = rng.normal(size=(48, 3)) * 25
    desc = encode_cloud(cloud, 7)
    perm = rng.permutation(48)
    desc_perm = encode_cloud(cloud[perm], 7)
    np.testing.assert_allclose(desc_perm.vectors, desc.vectors[perm], atol=1e-12)


def test_cloud_too_small():
    with pytest.raises(ValueError, match="too small"):
        encode_cloud(np.zeros((5, 3)) + np.arange(5)[:, None], 5)


def test_edge_order_is_lexicographic():
    a, b = edge_index_pairs(4)
    assert list(zip(a.tolist(), b.tolist())) == [
        (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3),
    ]


def test_coincident_neighbors_give_zero_edges():
    cloud = np.array([[0.0, 0, 0], [0, 0, 0], [1, 0, 0], [2, 0, 0]])
    desc = encode_cloud(cloud, 3)
    assert desc.vectors[0, 0] == 0.0  # edge to the coincident duplicate
