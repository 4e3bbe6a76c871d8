"""Split a frame into rigid and non-rigid surface segments.

Instance masks give class labels and a pixel prior; a min-cut over a k-NN
graph of the frame's 3D points cleans up each prior before it is used.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, maximum_flow
from scipy.spatial import cKDTree

from .dataset_io import InstanceMaskFrame
from .geometry import DepthFrame, PointCloud, backproject

log = logging.getLogger(__name__)

BACKGROUND_CLASS = "background"


class Rigidity(enum.Enum):
    RIGID = "rigid"
    NONRIGID = "nonrigid"


COCO_CLASSES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat",
    "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack",
    "umbrella", "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball",
    "kite", "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket",
    "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair",
    "couch", "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear", "hair drier",
    "toothbrush",
)

# Humans and animals deform; everything else is tracked rigidly.
COCO_NONRIGID = frozenset(
    {"person", "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe"}
)


class UnknownClassError(KeyError):
    pass


class ClassTable:
    def __init__(self, mapping: dict[str, Rigidity]):
        self._map = dict(mapping)

    @classmethod
    def default(cls) -> "ClassTable":
        table = {c: (Rigidity.NONRIGID if c in COCO_NONRIGID else Rigidity.RIGID) for c in COCO_CLASSES}
        # Common aliases for the ground and desks, which COCO does not label.
        for extra in ("table", "ground", "floor", "desktop", "desk", "wall"):
            table[extra] = Rigidity.RIGID
        return cls(table)

    @classmethod
    def load(cls, path, base: Optional["ClassTable"] = None) -> "ClassTable":
        """Override file: {"<class>": "rigid" | "nonrigid"} merged over ``base``."""
        return cls.merged(json.loads(Path(path).read_text()), base)

    @classmethod
    def merged(cls, raw: dict, base: Optional["ClassTable"] = None) -> "ClassTable":
        """``{"<class>": "rigid" | "nonrigid"}`` layered over ``base``."""
        mapping = dict(base._map) if base is not None else {}
        for name, kind in raw.items():
            try:
                mapping[name] = Rigidity(str(kind).lower())
            except ValueError:
                raise ValueError(f"class {name!r}: rigidity must be 'rigid' or 'nonrigid', got {kind!r}")
        return cls(mapping)

    def __contains__(self, name: str) -> bool:
        return name in self._map

    def __getitem__(self, name: str) -> Rigidity:
        return classify(name, self)

    def names(self) -> list[str]:
        return sorted(self._map)


def classify(name: str, table: ClassTable) -> Rigidity:
    if name == BACKGROUND_CLASS:
        return Rigidity.RIGID
    try:
        return table._map[name]
    except KeyError:
        raise UnknownClassError(f"class {name!r} is not in the class table; extend it with an override file")


@dataclass(frozen=True)
class SurfaceSegment:
    instance_id: int
    class_name: str
    rigidity: Rigidity
    pixels: np.ndarray  # (H, W) bool
    cloud: PointCloud
    refinement_flag: bool = False

    @property
    def is_rigid(self) -> bool:
        return self.rigidity is Rigidity.RIGID

    @property
    def is_background(self) -> bool:
        return self.instance_id == 0


@dataclass(frozen=True)
class GraphCutParams:
    k: int = 8
    r_bg: float = 0.5
    stride: int = 2
    min_iou: float = 0.3
    min_valid_fraction: float = 0.3
    capacity_scale: float = 1000.0


@dataclass(frozen=True)
class NeighborGraph:
    points: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    sigma: float

    @property
    def n(self) -> int:
        return len(self.points)

    def adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))


def neighbor_graph(points: np.ndarray, k: int = 8) -> NeighborGraph:
    """Symmetric k-NN graph with Gaussian weights exp(-d^2 / sigma^2).

    sigma is twice the median nearest-neighbour distance.
    """
    n = len(points)
    kk = min(k, n - 1)
    if kk < 1:
        return NeighborGraph(points, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), 1.0)
    dist, idx = cKDTree(points).query(points, k=kk + 1)
    dist, idx = dist[:, 1:], idx[:, 1:]
    sigma = 2.0 * float(np.median(dist[:, 0]))
    sigma = sigma if sigma > 0 else 1e-6
    rows = np.repeat(np.arange(n), kk)
    cols = idx.ravel()
    # Symmetrize: an edge exists if either endpoint lists the other.
    a, b = np.minimum(rows, cols), np.maximum(rows, cols)
    keys = np.unique(a * n + b)
    a, b = keys // n, keys % n
    d = np.linalg.norm(points[a] - points[b], axis=1)
    w = np.exp(-(d**2) / sigma**2)
    return NeighborGraph(
        points,
        np.concatenate([a, b]),
        np.concatenate([b, a]),
        np.concatenate([w, w]),
        sigma,
    )


def min_cut_foreground(graph: NeighborGraph, fg_seed: np.ndarray, bg_seed: np.ndarray, scale: float = 1000.0) -> np.ndarray:
    """Source side of the s-t min cut with hard foreground/background seeds."""
    n = graph.n
    cap = np.round(graph.weights * scale).astype(np.int64)
    keep = cap > 0
    rows, cols, cap = graph.rows[keep], graph.cols[keep], cap[keep]
    # A tie larger than a node's total incident capacity can never be cut.
    strength = np.bincount(rows, weights=cap, minlength=n).astype(np.int64)
    hard = strength + 1
    s, t = n, n + 1
    fg = np.flatnonzero(fg_seed)
    bg = np.flatnonzero(bg_seed & ~fg_seed)
    all_rows = np.concatenate([rows, np.full(fg.size, s), bg])
    all_cols = np.concatenate([cols, fg, np.full(bg.size, t)])
    all_cap = np.concatenate([cap, hard[fg], hard[bg]])
    C = sp.csr_matrix((all_cap, (all_rows, all_cols)), shape=(n + 2, n + 2), dtype=np.int64)
    C.sum_duplicates()
    flow = maximum_flow(C, s, t, method="dinic").flow
    residual = (C - flow).tocsr()
    residual.data[residual.data <= 0] = 0
    residual.eliminate_zeros()
    reach = breadth_first_order(residual, s, directed=True, return_predecessors=False)
    side = np.zeros(n + 2, dtype=bool)
    side[reach] = True
    return side[:n]


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def refine_segment_graphcut(
    frame: DepthFrame,
    prior: np.ndarray,
    params: GraphCutParams = GraphCutParams(),
    candidates: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, bool]:
    """Refine a prior pixel mask by a 3D min cut.

    Returns (mask, flagged); ``flagged`` means the cut was rejected and the
    valid part of the prior is returned unchanged. ``candidates`` restricts
    which pixels may take part (defaults to all valid pixels).
    """
    prior = np.asarray(prior, dtype=bool)
    if not prior.any():
        raise ValueError("graph-cut refinement needs a nonempty prior mask")
    valid = frame.valid if candidates is None else (frame.valid & candidates)
    prior_valid = prior & valid
    if np.count_nonzero(prior_valid) < params.min_valid_fraction * np.count_nonzero(prior):
        raise ValueError("less than the required fraction of prior pixels carries valid depth")

    st = params.stride
    sub = np.zeros_like(valid)
    sub[::st, ::st] = True
    rows, cols = np.nonzero(valid & sub)
    pts = frame.vertex_map[rows, cols]
    seeds = prior[rows, cols]
    if not seeds.any() or seeds.all():
        return prior_valid, True
    dist, _ = cKDTree(pts[seeds]).query(pts, k=1)
    sink = dist > params.r_bg
    if not sink.any():
        return prior_valid, True

    graph = neighbor_graph(pts, params.k)
    fg = min_cut_foreground(graph, seeds, sink, params.capacity_scale)
    if fg.all() or not fg.any():
        return prior_valid, True

    # Lift the subsampled labels to full resolution by 3D nearest neighbour.
    all_rows, all_cols = np.nonzero(valid)
    _, nn = cKDTree(pts).query(frame.vertex_map[all_rows, all_cols], k=1)
    refined = np.zeros_like(valid)
    refined[all_rows, all_cols] = fg[nn]
    refined |= prior_valid
    if _iou(refined, prior_valid) < params.min_iou:
        log.warning("graph cut rejected (IoU below %.2f); keeping prior", params.min_iou)
        return prior_valid, True
    return refined, False


def split_frame(
    frame: DepthFrame,
    masks: Optional[InstanceMaskFrame],
    table: ClassTable,
    params: GraphCutParams = GraphCutParams(),
    refine: bool = True,
) -> list[SurfaceSegment]:
    """Partition the valid pixels into instance segments plus one background.

    Instances are processed in ascending id; a pixel claimed by an earlier
    instance is not available to later ones.
    """
    valid = frame.valid
    free = valid.copy()
    segments: list[SurfaceSegment] = []
    if masks is not None:
        if masks.labels.shape != valid.shape:
            raise ValueError("mask dimensions do not match the frame")
        for iid in masks.instance_ids():
            name = masks.classes[iid]
            rigidity = classify(name, table)
            prior = (masks.labels == iid) & free
            if not prior.any():
                continue
            pixels, flagged = prior, False
            if refine:
                try:
                    pixels, flagged = refine_segment_graphcut(frame, prior, params, candidates=free)
                except ValueError:
                    pixels, flagged = prior, True
            pixels = pixels & free
            if not pixels.any():
                continue
            free &= ~pixels
            segments.append(
                SurfaceSegment(iid, name, rigidity, pixels, backproject(frame, pixels), flagged)
            )
    segments.insert(
        0, SurfaceSegment(0, BACKGROUND_CLASS, Rigidity.RIGID, free, backproject(frame, free))
    )
    return segments
