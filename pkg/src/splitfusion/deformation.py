"""Embedded deformation graph: node sampling, connectivity, blend weights, warping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, project_to_rotation, rigid_fit

DEFAULT_K = 6
DEFAULT_R_NODE = 0.05
DEFAULT_N_EDGES = 4


@dataclass
class DeformationGraph:
    """Warp field of one surface.

    ``positions`` (k, 3) are canonical node positions g_i and never move;
    ``rotations`` (k, 3, 3) and ``translations`` (k, 3) are the per-node
    motion. ``edges`` is a symmetric directed edge list (2, m) with weights.
    """

    positions: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((2, 0), dtype=np.int64))
    edge_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    K: int = DEFAULT_K
    r_node: float = DEFAULT_R_NODE
    rigid: bool = False

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        k = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(k, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(k, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(2, -1)
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64).reshape(-1)

    @classmethod
    def from_nodes(cls, positions, K: int = DEFAULT_K, r_node: float = DEFAULT_R_NODE,
                   n_edges: int = DEFAULT_N_EDGES) -> "DeformationGraph":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        k = len(positions)
        edges, weights = connect_nodes(positions, n_edges)
        return cls(positions, np.tile(np.eye(3), (k, 1, 1)), np.zeros((k, 3)), edges, weights, K, r_node)

    @property
    def k(self) -> int:
        return len(self.positions)

    def copy(self) -> "DeformationGraph":
        return DeformationGraph(
            self.positions.copy(), self.rotations.copy(), self.translations.copy(),
            self.edges.copy(), self.edge_weights.copy(), self.K, self.r_node, self.rigid,
        )

    def neighbors(self, i: int) -> np.ndarray:
        return self.edges[1, self.edges[0] == i]

    def as_rigid_transform(self) -> RigidTransform:
        if self.k != 1 or np.any(self.positions[0] != 0):
            raise ValueError("only a single-node graph at the origin is a rigid transform")
        return RigidTransform(self.rotations[0], self.translations[0])

    def node_targets(self) -> np.ndarray:
        """Warped node positions g_i + t_i."""
        return self.positions + self.translations


def rigid_graph(initial: RigidTransform = RigidTransform()) -> DeformationGraph:
    return DeformationGraph(
        np.zeros((1, 3)), initial.rotation[None].copy(), initial.translation[None].copy(), rigid=True
    )


def sample_nodes(points: np.ndarray, r_node: float, existing: Optional[np.ndarray] = None) -> np.ndarray:
    """Greedy cover: accept a point iff no accepted node lies within r_node.

    ``existing`` nodes count as already accepted; only new nodes are returned.
    """
    if r_node <= 0:
        raise ValueError("r_node must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros((0, 3))
    # Bucket nodes on an r_node grid so each test only looks at 27 cells.
    cells: dict[tuple, list[int]] = {}
    nodes: list[np.ndarray] = []
    r2 = r_node * r_node

    def _add(p):
        key = tuple(np.floor(p / r_node).astype(np.int64))
        cells.setdefault(key, []).append(len(nodes))
        nodes.append(p)

    def _covered(p) -> bool:
        cx, cy, cz = np.floor(p / r_node).astype(np.int64)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in cells.get((cx + dx, cy + dy, cz + dz), ()):
                        d = p - nodes[j]
                        if d @ d < r2:
                            return True
        return False

    n_existing = 0
    if existing is not None:
        for p in np.asarray(existing, dtype=np.float64).reshape(-1, 3):
            _add(p)
        n_existing = len(nodes)
    # Points already within r_node of an existing node can be skipped in bulk.
    candidates = points
    if n_existing:
        d, _ = cKDTree(np.array(nodes)).query(points, k=1)
        candidates = points[d >= r_node]
    for p in candidates:
        if not _covered(p):
            _add(p)
    return np.array(nodes[n_existing:]).reshape(-1, 3)


def connect_nodes(nodes: np.ndarray, n_edges: int = DEFAULT_N_EDGES) -> tuple[np.ndarray, np.ndarray]:
    """Link every node to its n_edges nearest nodes, symmetrized, unit weights."""
    nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 3)
    k = len(nodes)
    if k == 0:
        raise ValueError("need at least one node")
    if k == 1:
        return np.zeros((2, 0), dtype=np.int64), np.zeros(0)
    m = min(n_edges, k - 1)
    _, idx = cKDTree(nodes).query(nodes, k=m + 1)
    idx = idx.reshape(k, m + 1)
    pairs = set()
    for i in range(k):
        for j in idx[i]:
            if j != i:
                pairs.add((i, int(j)))
                pairs.add((int(j), i))
    edges = np.array(sorted(pairs), dtype=np.int64).T
    return edges, np.ones(edges.shape[1])


@dataclass(frozen=True)
class BlendBinding:
    """Per-point node indices and normalized blend weights.

    Unused slots have weight 0 and index 0. A point with all-zero weights is
    unbound.
    """

    nodes: np.ndarray  # (N, S) int
    weights: np.ndarray  # (N, S) float
    d_max: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def bound(self) -> np.ndarray:
        return self.weights.sum(axis=1) > 0

    def subset(self, keep) -> "BlendBinding":
        return BlendBinding(self.nodes[keep], self.weights[keep], self.d_max[keep])

    def dense(self, k: int) -> np.ndarray:
        """(N, k) weight matrix."""
        W = np.zeros((len(self), k))
        np.add.at(W, (np.repeat(np.arange(len(self)), self.nodes.shape[1]), self.nodes.ravel()), self.weights.ravel())
        return W


def bind_points(points: np.ndarray, graph: DeformationGraph, max_range: Optional[float] = None) -> BlendBinding:
    """Blend weights w = (1 - d / d_max)^2 over the K nearest nodes, normalized.

    d_max is the distance to the (K+1)-th nearest node. With K or fewer
    nodes every node is used and d_max is twice the farthest node distance
    (infinite for a single node, which yields weight 1). Points farther than
    ``max_range`` from every node are left unbound.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n, k, K = len(points), graph.k, graph.K
    if k == 0:
        raise ValueError("graph has no nodes")
    if n == 0:
        return BlendBinding(np.zeros((0, min(K, k)), np.int64), np.zeros((0, min(K, k))), np.zeros(0))
    tree = cKDTree(graph.positions)
    active = np.ones(n, dtype=bool)
    if max_range is not None:
        d1, _ = tree.query(points, k=1, distance_upper_bound=max_range)
        active = np.isfinite(d1)
    pts = points[active]

    if k == 1:
        slots = 1
        dist = np.linalg.norm(pts - graph.positions[0], axis=1)[:, None]
        idx = np.zeros((len(pts), 1), dtype=np.int64)
        dmax = np.full(len(pts), np.inf)
    elif k <= K:
        slots = k
        dist, idx = tree.query(pts, k=k)
        dmax = 2.0 * dist[:, -1]
        dmax = np.where(dmax > 0, dmax, np.inf)
    else:
        slots = K
        dist, idx = tree.query(pts, k=K + 1)
        dmax = dist[:, K]
        dist, idx = dist[:, :K], idx[:, :K]
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(np.isinf(dmax)[:, None], 1.0, (1.0 - dist / dmax[:, None]) ** 2)
    raw = np.where(dist < dmax[:, None], raw, 0.0)
    total = raw.sum(axis=1, keepdims=True)
    w = np.where(total > 0, raw / np.where(total > 0, total, 1.0), 0.0)

    nodes = np.zeros((n, slots), dtype=np.int64)
    weights = np.zeros((n, slots))
    d_max = np.zeros(n)
    nodes[active] = idx
    weights[active] = w
    d_max[active] = dmax
    return BlendBinding(nodes, weights, d_max)


def warp_points(points: np.ndarray, binding: BlendBinding, graph: DeformationGraph) -> np.ndarray:
    """Linear blend of node-centred rigid motions: sum_i w_i [R_i (p - g_i) + t_i + g_i]."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if graph.k == 1:
        # Same arithmetic as geometry.transform_points, so the rigid case is exact.
        g = graph.positions[0]
        local = (points - g) @ graph.rotations[0].T + graph.translations[0] + g
        return binding.weights[:, :1] * local
    out = None
    for s in range(binding.nodes.shape[1]):
        idx = binding.nodes[:, s]
        g = graph.positions[idx]
        local = np.einsum("nij,nj->ni", graph.rotations[idx], points - g) + graph.translations[idx] + g
        term = binding.weights[:, s, None] * local
        out = term if out is None else out + term
    return out


def warp_point(p: np.ndarray, binding: BlendBinding, graph: DeformationGraph) -> np.ndarray:
    return warp_points(np.asarray(p).reshape(1, 3), binding, graph)[0]


def warp_normals(normals: np.ndarray, binding: BlendBinding, graph: DeformationGraph) -> np.ndarray:
    """normalize(sum_i w_i R_i n); NaN where the blend has (near) zero length."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    out = np.zeros_like(normals)
    for s in range(binding.nodes.shape[1]):
        idx = binding.nodes[:, s]
        out += binding.weights[:, s, None] * np.einsum("nij,nj->ni", graph.rotations[idx], normals)
    norm = np.linalg.norm(out, axis=1)
    bad = ~(norm >= 1e-9)
    out = out / np.where(bad, 1.0, norm)[:, None]
    out[bad] = np.nan
    return out


def warp_normal(n: np.ndarray, binding: BlendBinding, graph: DeformationGraph) -> np.ndarray:
    return warp_normals(np.asarray(n).reshape(1, 3), binding, graph)[0]


def blended_node_transform(points: np.ndarray, binding: BlendBinding, graph: DeformationGraph) -> tuple[np.ndarray, np.ndarray]:
    """Rotation (projected to SO(3)) and translation a new node at ``points`` should start with."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    M = np.zeros((len(points), 3, 3))
    for s in range(binding.nodes.shape[1]):
        M += binding.weights[:, s, None, None] * graph.rotations[binding.nodes[:, s]]
    R = np.array([project_to_rotation(m) if np.abs(m).sum() > 0 else np.eye(3) for m in M]).reshape(-1, 3, 3)
    t = warp_points(points, binding, graph) - points
    return R, t


def grow_graph(graph: DeformationGraph, surface_points: np.ndarray, n_edges: int = DEFAULT_N_EDGES) -> int:
    """Add nodes for surface points not covered within r_node; returns count added."""
    new = sample_nodes(surface_points, graph.r_node, existing=graph.positions)
    if len(new) == 0:
        return 0
    binding = bind_points(new, graph)
    R_new, t_new = blended_node_transform(new, binding, graph)
    graph.positions = np.concatenate([graph.positions, new])
    graph.rotations = np.concatenate([graph.rotations, R_new])
    graph.translations = np.concatenate([graph.translations, t_new])
    graph.edges, graph.edge_weights = connect_nodes(graph.positions, n_edges)
    return len(new)


def premultiply(graph: DeformationGraph, T: RigidTransform) -> DeformationGraph:
    """Graph whose warp is ``T`` applied after ``graph``'s warp."""
    out = graph.copy()
    out.rotations = np.array([project_to_rotation(T.rotation @ R) for R in graph.rotations]).reshape(-1, 3, 3)
    out.translations = (graph.positions + graph.translations) @ T.rotation.T + T.translation - graph.positions
    return out


def approximate_rigid_motion(graph: DeformationGraph) -> RigidTransform:
    """Best rigid fit of the node motion, used to place the model camera."""
    if graph.k == 1:
        return RigidTransform(
            project_to_rotation(graph.rotations[0]),
            graph.translations[0] + graph.positions[0] - project_to_rotation(graph.rotations[0]) @ graph.positions[0],
        )
    if graph.k < 3:
        R = project_to_rotation(graph.rotations.mean(axis=0))
        c = graph.positions.mean(axis=0)
        return RigidTransform(R, graph.node_targets().mean(axis=0) - R @ c)
    return rigid_fit(graph.positions, graph.node_targets())
