"""Per-frame orchestration: split, associate, track, fuse and re-unite surfaces.

Every surface, the background included, owns a TSDF volume in its own
canonical frame (the camera frame of the frame it was spawned in) and a warp
mapping canonical coordinates into the live camera. The camera trajectory is
the inverse of the background warp.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import PipelineConfig
from .dataset_io import (
    InstanceMaskFrame,
    Trajectory,
    load_masks,
    load_tum_sequence,
    write_mesh,
    write_trajectory,
)
from .deformation import (
    DeformationGraph,
    approximate_rigid_motion,
    bind_points,
    grow_graph,
    premultiply,
    rigid_graph,
    sample_nodes,
    warp_points,
)
from .geometry import DepthFrame, RigidTransform, TriangleMesh, apply, compose, concatenate_meshes, invert
from .icp import SolverDivergence, TrackingLost, rigid_icp, solve_warp
from .segmentation import ClassTable, Rigidity, SurfaceSegment, split_frame
from .tsdf import (
    TsdfVolume,
    VoxelBinding,
    bind_voxels,
    extract_mesh,
    integrate_nonrigid,
    integrate_rigid,
    raycast,
)

log = logging.getLogger(__name__)

MIN_SURFACE_POINTS = 100
MIN_ASSOCIATION_IOU = 0.3
MAX_LOST_FRAMES = 3
MODEL_STRIDE = 2


class PipelineError(RuntimeError):
    pass


class BackgroundLost(PipelineError):
    """Background tracking failed; ``state`` holds everything up to the failure."""

    def __init__(self, message: str, state: "SceneState"):
        super().__init__(message)
        self.state = state


class SurfaceStatus(enum.Enum):
    ACTIVE = "active"
    LOST = "lost"
    RETIRED = "retired"


@dataclass
class Surface:
    id: int
    class_name: str
    rigidity: Rigidity
    volume: TsdfVolume
    graph: DeformationGraph
    voxels: Optional[VoxelBinding] = None
    history: dict = field(default_factory=dict)  # frame index -> DeformationGraph snapshot
    status: SurfaceStatus = SurfaceStatus.ACTIVE
    lost_frames: int = 0
    last_mask: Optional[np.ndarray] = None
    spawn_frame: int = 0
    clipped_points: int = 0  # observed points that fell outside the volume

    @property
    def is_rigid(self) -> bool:
        return self.rigidity is Rigidity.RIGID

    @property
    def is_background(self) -> bool:
        return self.id == 0

    def pose(self) -> RigidTransform:
        """Canonical-to-camera transform (approximate for non-rigid surfaces)."""
        return self.graph.as_rigid_transform() if self.is_rigid else approximate_rigid_motion(self.graph)

    def warp_at(self, frame_index: int) -> DeformationGraph:
        return self.history[frame_index]


@dataclass
class SceneState:
    surfaces: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    camera_poses: list = field(default_factory=list)
    frame_count: int = 0
    next_id: int = 1
    diagnostics: list = field(default_factory=list)

    @property
    def background(self) -> Surface:
        return self.surfaces[0]

    def live_surfaces(self) -> list:
        return [s for s in self.surfaces if s.status is not SurfaceStatus.RETIRED]

    def trajectory(self) -> Trajectory:
        return Trajectory(tuple(self.timestamps), tuple(self.camera_poses))


# -- association ------------------------------------------------------------

def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def iou_matrix(segments: Sequence[SurfaceSegment], surfaces: Sequence[Surface]) -> np.ndarray:
    """IoU against each surface's previous mask; -1 where the class gate forbids a match."""
    M = np.full((len(segments), len(surfaces)), -1.0)
    for i, seg in enumerate(segments):
        for j, surf in enumerate(surfaces):
            if seg.is_background != surf.is_background or seg.class_name != surf.class_name:
                continue
            if surf.last_mask is not None:
                M[i, j] = _iou(seg.pixels, surf.last_mask)
    return M


def associate_segments(segments: Sequence[SurfaceSegment], state: SceneState,
                       min_iou: float = MIN_ASSOCIATION_IOU) -> list:
    """Map each segment to a live surface or None (new), maximizing total IoU.

    The background segment always maps to the background surface.
    """
    out: list = [None] * len(segments)
    surfaces = [s for s in state.live_surfaces() if not s.is_background]
    idx = [i for i, seg in enumerate(segments) if not seg.is_background]
    for i, seg in enumerate(segments):
        if seg.is_background and state.surfaces:
            out[i] = state.background
    if not idx or not surfaces:
        return out
    M = iou_matrix([segments[i] for i in idx], surfaces)
    allowed = M >= min_iou
    # Forbidden pairs cost nothing, so the optimum is the maximum total IoU over allowed pairs.
    cost = np.where(allowed, -M, 0.0)
    rows, cols = linear_sum_assignment(cost)
    for r, c in zip(rows, cols):
        if allowed[r, c]:
            out[idx[r]] = surfaces[c]
    return out


# -- surfaces -----------------------------------------------------------------

def spawn_surface(segment: SurfaceSegment, frame: DepthFrame, config: PipelineConfig,
                  surface_id: int, frame_index: int = 0) -> Optional[Surface]:
    """New surface from a segment, integrated at identity; None if too small."""
    points = segment.cloud.vertices
    if len(points) < MIN_SURFACE_POINTS:
        log.info("segment %d (%s) has %d points, too small to track",
                 segment.instance_id, segment.class_name, len(points))
        return None
    s = config.background_voxel_size if segment.is_background else config.voxel_size
    vol = TsdfVolume.fit(points, s, config.truncation_factor, config.volume_padding, config.max_weight)
    if segment.is_rigid:
        graph = rigid_graph()
        voxels = None
        integrate_rigid(vol, frame, RigidTransform.identity(), segment.pixels)
    else:
        nodes = sample_nodes(points, config.r_node)
        graph = DeformationGraph.from_nodes(nodes, config.K, config.r_node)
        voxels = bind_voxels(vol, graph, config.bind_range)
        integrate_nonrigid(vol, frame, graph, voxels, segment.pixels)
    surf = Surface(surface_id, segment.class_name, segment.rigidity, vol, graph, voxels,
                   last_mask=segment.pixels.copy(), spawn_frame=frame_index)
    surf.history[frame_index] = graph.copy()
    return surf


def track_surface(surf: Surface, segment: SurfaceSegment, frame: DepthFrame,
                  config: PipelineConfig, frame_index: int,
                  camera_motion: Optional[RigidTransform] = None) -> dict:
    """Register, fuse and grow one surface; mutates ``surf``. Returns diagnostics.

    ``camera_motion`` (previous-to-current camera transform, from the
    background) seeds the warp so that surfaces static in the world start
    where they should; the solver refines from there. If tracking fails the
    surface keeps this prediction.
    """
    record = {"frame": frame_index, "surface_id": surf.id, "class": surf.class_name}
    if camera_motion is not None:
        surf.graph = premultiply(surf.graph, camera_motion)
    rc = raycast(surf.volume, frame.intrinsics, surf.pose())
    model = rc.to_point_cloud(MODEL_STRIDE)
    params, solver = config.energy_params(), config.solver_config()
    try:
        if surf.is_rigid:
            pose, diag = rigid_icp(model, frame, surf.pose(), params, solver, segment.pixels, surf.id)
            graph = rigid_graph(pose)
        else:
            binding = bind_points(model.vertices, surf.graph)
            graph, diag = solve_warp(model, surf.graph, frame, params, solver, segment.pixels,
                                     binding, surf.id)
    except (TrackingLost, SolverDivergence) as exc:
        record.update(status="lost", reason=str(exc))
        return record
    surf.graph = graph
    clipped = _count_clipped(surf, segment)
    surf.clipped_points += clipped
    if surf.is_rigid:
        integrate_rigid(surf.volume, frame, graph.as_rigid_transform(), segment.pixels)
        added = 0
    else:
        integrate_nonrigid(surf.volume, frame, graph, surf.voxels, segment.pixels)
        added = grow_graph(graph, surf.volume.surface_points())
        if added:
            surf.voxels = bind_voxels(surf.volume, graph, config.bind_range)
    record.update(
        status="tracked",
        n_corr=diag.n_corr,
        initial_e_data=diag.initial_e_data,
        final_e_data=diag.final_e_data,
        final_e_prior=diag.final_e_prior,
        iterations=diag.iterations,
        nodes=graph.k,
        nodes_added=added,
        clipped_points=clipped,
    )
    return record


def _count_clipped(surf: Surface, segment: SurfaceSegment) -> int:
    """Segment points that land outside the fixed volume (non-rigid: via the mean motion)."""
    canonical = apply(invert(surf.pose()), segment.cloud.vertices)
    return int(np.count_nonzero(~surf.volume.contains(canonical)))


def _snapshot(state: SceneState, frame_index: int) -> None:
    for surf in state.surfaces:
        if surf.status is not SurfaceStatus.RETIRED:
            surf.history[frame_index] = surf.graph.copy()


def _record_camera(state: SceneState, frame: DepthFrame) -> None:
    state.timestamps.append(frame.timestamp)
    state.camera_poses.append(invert(state.background.pose()))
    state.frame_count += 1


def process_frame(state: SceneState, frame: DepthFrame, masks: Optional[InstanceMaskFrame],
                  config: PipelineConfig, table: ClassTable) -> list:
    """Advance the scene by one frame; returns per-surface diagnostics."""
    n = state.frame_count
    segments = split_frame(frame, masks, table, config.graph_cut, refine=config.refine_segments)
    if not state.surfaces:
        records = []
        for seg in segments:
            sid = 0 if seg.is_background else state.next_id
            surf = spawn_surface(seg, frame, config, sid, n)
            if surf is None:
                if seg.is_background:
                    raise PipelineError("first frame has too few valid background points")
                continue
            if not seg.is_background:
                state.next_id += 1
            state.surfaces.append(surf)
            records.append({"frame": n, "surface_id": sid, "class": seg.class_name, "status": "spawned"})
        _record_camera(state, frame)
        state.diagnostics.extend(records)
        return records

    matches = associate_segments(segments, state)
    jobs = [(surf, seg) for seg, surf in zip(segments, matches) if surf is not None]
    # The background goes first: its motion is the camera motion that seeds the rest.
    bg_job = next(j for j in jobs if j[0].is_background)
    jobs.remove(bg_job)
    jobs.insert(0, bg_job)
    bg = bg_job[0]
    previous = bg.pose()
    bg_record = track_surface(bg, bg_job[1], frame, config, n)
    if bg_record["status"] == "lost":
        raise BackgroundLost(f"background tracking lost at frame {n}: {bg_record['reason']}", state)
    motion = compose(bg.pose(), invert(previous))
    # Surfaces with no segment this frame follow the camera and count as lost.
    matched = {id(j[0]) for j in jobs}
    unmatched = [s for s in state.live_surfaces() if id(s) not in matched]
    for surf in unmatched:
        surf.graph = premultiply(surf.graph, motion)

    def run(job):
        surf, seg = job
        return track_surface(surf, seg, frame, config, n, motion)

    rest = jobs[1:]
    if config.workers > 1 and len(rest) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            records = [bg_record] + list(pool.map(run, rest))
    else:
        records = [bg_record] + [run(j) for j in rest]

    for surf in unmatched:
        jobs.append((surf, None))
        records.append({"frame": n, "surface_id": surf.id, "class": surf.class_name,
                        "status": "lost", "reason": "no segment"})
    for (surf, seg), rec in zip(jobs, records):
        if rec["status"] == "lost":
            surf.lost_frames += 1
            surf.status = SurfaceStatus.LOST
            if surf.lost_frames >= MAX_LOST_FRAMES:
                surf.status = SurfaceStatus.RETIRED
                rec["status"] = "retired"
                log.info("surface %d retired at frame %d", surf.id, n)
        else:
            surf.lost_frames = 0
            surf.status = SurfaceStatus.ACTIVE
            surf.last_mask = seg.pixels.copy()

    for seg, surf in zip(segments, matches):
        if surf is None and not seg.is_background:
            new = spawn_surface(seg, frame, config, state.next_id, n)
            if new is not None:
                state.next_id += 1
                state.surfaces.append(new)
                records.append({"frame": n, "surface_id": new.id, "class": new.class_name, "status": "spawned"})

    _snapshot(state, n)
    _record_camera(state, frame)
    state.diagnostics.extend(records)
    return records


# -- output ---------------------------------------------------------------------

_SURFACE_COLORS = np.array(
    [[170, 170, 170], [230, 80, 60], [60, 140, 230], [90, 200, 100], [240, 200, 60], [180, 90, 210]],
    dtype=np.uint8,
)


def surface_color(surface_id: int) -> np.ndarray:
    return _SURFACE_COLORS[surface_id % len(_SURFACE_COLORS)]


def warp_mesh(mesh: TriangleMesh, graph: DeformationGraph) -> TriangleMesh:
    if len(mesh.vertices) == 0:
        return mesh
    if graph.rigid:
        verts = apply(graph.as_rigid_transform(), mesh.vertices)
    else:
        verts = warp_points(mesh.vertices, bind_points(mesh.vertices, graph), graph)
    return TriangleMesh(verts, mesh.triangles, mesh.colors)


def reunite(state: SceneState, frame_index: int) -> TriangleMesh:
    """All surfaces existing at ``frame_index``, warped into that frame's camera."""
    if not 0 <= frame_index < state.frame_count:
        raise IndexError(f"frame {frame_index} has not been processed")
    parts = []
    for surf in state.surfaces:
        if frame_index not in surf.history:
            continue
        mesh = extract_mesh(surf.volume)
        colors = np.tile(surface_color(surf.id), (len(mesh.vertices), 1))
        parts.append(warp_mesh(TriangleMesh(mesh.vertices, mesh.triangles, colors), surf.warp_at(frame_index)))
    return concatenate_meshes(parts)


def run_rigid_baseline(frames: Sequence[DepthFrame], config: PipelineConfig) -> tuple[Trajectory, TsdfVolume]:
    """Single-volume rigid tracking and fusion, independent of the surface machinery."""
    first = frames[0]
    vol = TsdfVolume.fit(first.vertex_map[first.valid], config.background_voxel_size,
                         config.truncation_factor, config.volume_padding, config.max_weight)
    integrate_rigid(vol, first, RigidTransform.identity(), first.valid)
    pose = RigidTransform.identity()
    poses = [invert(pose)]
    for frame in frames[1:]:
        model = raycast(vol, frame.intrinsics, pose).to_point_cloud(MODEL_STRIDE)
        pose, _ = rigid_icp(model, frame, pose, config.energy_params(), config.solver_config(), frame.valid, 0)
        integrate_rigid(vol, frame, pose, frame.valid)
        poses.append(invert(pose))
    return Trajectory(tuple(f.timestamp for f in frames), tuple(poses)), vol


def _report(state: SceneState, config: PipelineConfig, error: Optional[str]) -> dict:
    return {
        "frames_processed": state.frame_count,
        "error": error,
        "config": config.to_dict(),
        "surfaces": [
            {
                "id": s.id,
                "class": s.class_name,
                "rigidity": s.rigidity.value,
                "status": s.status.value,
                "spawn_frame": s.spawn_frame,
                "nodes": s.graph.k,
                "voxels": s.volume.n_voxels,
                "clipped_points": s.clipped_points,
                "weight_clipped_voxels": int(np.count_nonzero(s.volume.weight >= s.volume.max_weight)),
            }
            for s in state.surfaces
        ],
        "retired": [s.id for s in state.surfaces if s.status is SurfaceStatus.RETIRED],
        "diagnostics": state.diagnostics,
    }


def write_outputs(state: SceneState, config: PipelineConfig, out_dir, export_frames: Sequence[int],
                  error: Optional[str] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state.frame_count:
        write_trajectory(state.trajectory(), out / "trajectory.txt")
    for surf in state.surfaces:
        mesh = extract_mesh(surf.volume)
        colors = np.tile(surface_color(surf.id), (len(mesh.vertices), 1))
        write_mesh(TriangleMesh(mesh.vertices, mesh.triangles, colors), out / f"surface_{surf.id}_canonical.ply")
    for n in export_frames:
        if n < state.frame_count:
            write_mesh(reunite(state, n), out / f"reunited_{n:04d}.ply")
    (out / "report.json").write_text(json.dumps(_report(state, config, error), indent=2, sort_keys=True) + "\n")


def run_frames(frames: Sequence[DepthFrame], masks: Sequence[Optional[InstanceMaskFrame]],
               config: PipelineConfig, table: Optional[ClassTable] = None) -> SceneState:
    table = table or config.class_table()
    state = SceneState()
    for frame, mask in zip(frames, masks):
        process_frame(state, frame, mask, config, table)
    return state


def run_sequence(config: PipelineConfig, dataset, out_dir, masks_dir=None,
                 frames: Optional[tuple[int, int]] = None, export_every: int = 0,
                 rigid_only: bool = False) -> SceneState:
    """Process a TUM-layout dataset and write all outputs.

    ``frames`` is an inclusive index range. Reunited meshes are written every
    ``export_every`` frames (0: last frame only). Raises on dataset errors and
    on background tracking loss, after flushing partial outputs.
    """
    manifest: SequenceManifest = load_tum_sequence(dataset)
    if config.depth_scale is not None and config.depth_scale != manifest.depth_scale:
        intrinsics = dataclasses.replace(manifest.intrinsics, depth_scale=config.depth_scale)
        manifest = dataclasses.replace(manifest, intrinsics=intrinsics)
    if len(manifest) == 0:
        raise PipelineError(f"{dataset}: no frames")
    lo, hi = frames if frames is not None else (0, len(manifest) - 1)
    if not 0 <= lo <= hi < len(manifest):
        raise PipelineError(f"frame range {lo}..{hi} outside 0..{len(manifest) - 1}")
    indices = range(lo, hi + 1)
    all_masks = [None] * len(manifest)
    if masks_dir is not None and not rigid_only:
        all_masks = load_masks(manifest, masks_dir)
    table = config.class_table(Path(dataset))
    state = SceneState()
    error = None
    try:
        for i in indices:
            process_frame(state, manifest.load_frame(i), all_masks[i], config, table)
    except BackgroundLost as exc:
        error = str(exc)
    count = state.frame_count
    export = list(range(0, count, export_every)) if export_every > 0 else []
    if count and count - 1 not in export:
        export.append(count - 1)
    write_outputs(state, config, out_dir, export, error)
    if error:
        raise PipelineError(error)
    return state
