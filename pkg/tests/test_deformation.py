import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_transform
from splitfusion.deformation import (
    DeformationGraph,
    approximate_rigid_motion,
    bind_points,
    connect_nodes,
    grow_graph,
    premultiply,
    rigid_graph,
    sample_nodes,
    warp_normal,
    warp_normals,
    warp_point,
    warp_points,
)
from splitfusion.geometry import RigidTransform, apply, so3_exp

seeds = st.integers(0, 2**32 - 1)


def blend_oracle(points, nodes, K):
    """Blend weights evaluated directly from all point-node distances."""
    W = np.zeros((len(points), len(nodes)))
    for j, v in enumerate(points):
        d = np.array([np.linalg.norm(v - g) for g in nodes])
        order = np.argsort(d, kind="stable")
        if len(nodes) > K:
            d_max = d[order[K]]
            use = order[:K]
        else:
            d_max = 2 * d.max() if len(nodes) > 1 else np.inf
            use = order
        for i in use:
            if d[i] < d_max:
                W[j, i] = 1.0 if np.isinf(d_max) else (1 - d[i] / d_max) ** 2
        W[j] /= W[j].sum()
    return W


def random_graph(rng, k, angle=0.3, shift=0.05):
    g = DeformationGraph.from_nodes(rng.uniform(-0.3, 0.3, (k, 3)))
    g.rotations = so3_exp(rng.normal(scale=angle, size=(k, 3))).reshape(k, 3, 3)
    g.translations = rng.normal(scale=shift, size=(k, 3))
    return g


def test_single_point_one_node():
    np.testing.assert_array_equal(sample_nodes(np.array([[1.0, 2.0, 3.0]]), 0.05), [[1.0, 2.0, 3.0]])


def test_far_points_two_nodes():
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0]])
    assert len(sample_nodes(pts, 0.05)) == 2


def test_grid_cover():
    r = 0.05
    g = np.arange(0, 0.5, r / 2)
    pts = np.stack(np.meshgrid(g, g, [0.0]), -1).reshape(-1, 3)
    nodes = sample_nodes(pts, r)
    d = np.linalg.norm(pts[:, None] - nodes[None], axis=2).min(axis=1)
    assert d.max() <= r
    assert (np.linalg.norm(nodes[:, None] - nodes[None], axis=2) + np.eye(len(nodes)) * 9).min() >= r


@given(seeds, st.floats(0.02, 0.2))
def test_cover_property(seed, r):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, (300, 3))
    nodes = sample_nodes(pts, r)
    d = np.linalg.norm(pts[:, None] - nodes[None], axis=2).min(axis=1)
    assert d.max() <= r


def test_connect_small_graphs():
    e, w = connect_nodes(np.zeros((1, 3)))
    assert e.shape == (2, 0) and w.size == 0
    e, w = connect_nodes(np.array([[0.0, 0, 0], [1, 0, 0]]))
    assert sorted(map(tuple, e.T)) == [(0, 1), (1, 0)] and (w == 1).all()


def test_connect_matches_knn_oracle(rng):
    nodes = rng.uniform(size=(10, 3))
    edges, w = connect_nodes(nodes, 4)
    D = np.linalg.norm(nodes[:, None] - nodes[None], axis=2)
    expected = set()
    for i in range(10):
        for j in np.argsort(D[i])[1:5]:
            expected |= {(i, int(j)), (int(j), i)}
    assert set(map(tuple, edges.T.tolist())) == expected
    assert (w == 1).all()


def test_single_node_weight_one(rng):
    g = DeformationGraph.from_nodes(np.array([[0.1, 0.2, 0.3]]))
    b = bind_points(rng.normal(size=(50, 3)), g)
    np.testing.assert_array_equal(b.weights, np.ones((50, 1)))


def test_coincident_point_gets_largest_weight(rng):
    nodes = rng.uniform(size=(10, 3))
    g = DeformationGraph.from_nodes(nodes)
    b = bind_points(nodes[3:4], g)
    dense = b.dense(10)[0]
    assert dense.argmax() == 3


def test_blend_matches_oracle_eight_nodes(rng):
    nodes = rng.uniform(size=(8, 3))
    g = DeformationGraph.from_nodes(nodes)
    p = rng.uniform(size=(1, 3))
    np.testing.assert_allclose(bind_points(p, g).dense(8), blend_oracle(p, nodes, 6), atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 6, 7, 30])
def test_blend_matches_oracle_1000_points(k):
    rng = np.random.default_rng(k)
    nodes = rng.uniform(size=(k, 3))
    pts = rng.uniform(-0.2, 1.2, (1000, 3))
    b = bind_points(pts, DeformationGraph.from_nodes(nodes))
    W = b.dense(k)
    np.testing.assert_allclose(W, blend_oracle(pts, nodes, 6), atol=1e-12)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)


@given(seeds, st.integers(1, 25))
def test_partition_of_unity_and_compact_support(seed, k):
    rng = np.random.default_rng(seed)
    nodes = rng.uniform(size=(k, 3))
    pts = rng.uniform(size=(100, 3))
    b = bind_points(pts, DeformationGraph.from_nodes(nodes))
    np.testing.assert_allclose(b.weights.sum(axis=1), 1.0, atol=1e-9)
    assert (b.weights >= 0).all()
    d = np.linalg.norm(pts[:, None] - nodes[None], axis=2)
    far = d >= b.d_max[:, None]
    assert (b.dense(k)[far] == 0).all()


def test_max_range_leaves_points_unbound():
    g = DeformationGraph.from_nodes(np.array([[0.0, 0, 0], [0.1, 0, 0]]))
    b = bind_points(np.array([[0.05, 0, 0], [5.0, 0, 0]]), g, max_range=0.5)
    assert b.bound.tolist() == [True, False]


@given(seeds, st.integers(1, 20))
def test_identity_warp(seed, k):
    rng = np.random.default_rng(seed)
    g = DeformationGraph.from_nodes(rng.uniform(size=(k, 3)))
    pts = rng.uniform(size=(50, 3))
    b = bind_points(pts, g)
    np.testing.assert_allclose(warp_points(pts, b, g), pts, atol=1e-12)
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    np.testing.assert_allclose(warp_normals(n, b, g), n, atol=1e-12)


def test_single_node_translation():
    g = DeformationGraph.from_nodes(np.array([[0.3, 0.0, 1.0]]))
    g.translations[0] = [0.1, 0, 0]
    p = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(warp_point(p, bind_points(p, g), g), p + [0.1, 0, 0], atol=1e-15)


def test_two_node_manual_expansion():
    g = DeformationGraph.from_nodes(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    g.rotations = np.stack([so3_exp([0, 0, 0.3]), so3_exp([0.2, 0, 0])])
    g.translations = np.array([[0.1, 0, 0], [0, 0.2, 0]])
    p = np.array([0.5, 0.5, 0.0])
    b = bind_points(p, g)
    w = b.dense(2)[0]
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)
    expected = np.zeros(3)
    for i in range(2):
        gi = g.positions[i]
        expected += w[i] * (g.rotations[i] @ (p - gi) + g.translations[i] + gi)
    np.testing.assert_allclose(warp_point(p, b, g), expected, atol=1e-15)


def test_normal_rotation_90_deg():
    g = rigid_graph(RigidTransform(so3_exp([0, 0, np.pi / 2])))
    n = np.array([1.0, 0, 0])
    np.testing.assert_allclose(warp_normal(n, bind_points(n, g), g), [0, 1, 0], atol=1e-15)


@given(seeds)
def test_two_node_normal_blend(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 2, angle=0.5)
    p, n = rng.uniform(size=3), np.array([0.0, 0.0, 1.0])
    b = bind_points(p, g)
    w = b.dense(2)[0]
    raw = w[0] * g.rotations[0] @ n + w[1] * g.rotations[1] @ n
    np.testing.assert_allclose(warp_normal(n, b, g), raw / np.linalg.norm(raw), atol=1e-12)


def test_degenerate_normal_blend_is_invalid():
    g = DeformationGraph.from_nodes(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    g.rotations[1] = so3_exp([0, np.pi, 0])
    p = np.array([0.5, 0.0, 0.0])
    assert np.isnan(warp_normal(np.array([1.0, 0, 0]), bind_points(p, g), g)).all()


@given(seeds)
def test_rigid_graph_is_se3(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    g = rigid_graph(T)
    p = rng.normal(size=(20, 3))
    np.testing.assert_allclose(warp_points(p, bind_points(p, g), g), apply(T, p), atol=1e-12)
    assert g.as_rigid_transform() == T


def test_rigid_graph_identity_and_translation():
    p = np.array([[0.1, 0.2, 0.3]])
    g = rigid_graph()
    np.testing.assert_array_equal(warp_points(p, bind_points(p, g), g), p)
    g = rigid_graph(RigidTransform(np.eye(3), [1.0, 0, 0]))
    np.testing.assert_allclose(warp_points(p, bind_points(p, g), g), p + [1, 0, 0])


@given(seeds)
def test_premultiply_composes(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 12)
    T = random_transform(rng)
    pts = rng.uniform(-0.3, 0.3, (40, 3))
    b = bind_points(pts, g)
    np.testing.assert_allclose(warp_points(pts, b, premultiply(g, T)),
                               apply(T, warp_points(pts, b, g)), atol=1e-12)


@given(seeds)
def test_approximate_rigid_motion_exact_for_rigid_graphs(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    g = premultiply(DeformationGraph.from_nodes(rng.uniform(size=(9, 3))), T)
    np.testing.assert_allclose(approximate_rigid_motion(g).matrix(), T.matrix(), atol=1e-9)


def test_grow_graph_covers_new_points_and_preserves_warp(rng):
    g = DeformationGraph.from_nodes(np.array([[0.0, 0, 0], [0.04, 0, 0]]))
    T = RigidTransform.from_rotvec([0, 0.2, 0], [0.01, 0.02, 0])
    g = premultiply(g, T)
    new_pts = np.array([[0.3, 0.0, 0.0], [0.31, 0.0, 0.0], [0.0, 0.3, 0.0]])
    added = grow_graph(g, new_pts)
    assert added == 2 and g.k == 4
    np.testing.assert_allclose(approximate_rigid_motion(g).matrix(), T.matrix(), atol=1e-9)
    assert grow_graph(g, new_pts) == 0
    edges = set(map(tuple, g.edges.T.tolist()))
    assert all((j, i) in edges for i, j in edges)
