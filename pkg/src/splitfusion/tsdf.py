"""Dense TSDF volume: projective integration, raycasting and mesh extraction.

Voxel (i, j, k) has its centre at ``origin + (i, j, k) * voxel_size``.
Unobserved voxels have weight 0; their tsdf value is meaningless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from skimage.measure import marching_cubes

from .deformation import BlendBinding, DeformationGraph, bind_points, warp_points
from .geometry import (
    CameraIntrinsics,
    DepthFrame,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    transform_points,
)

_DUMP_HEADER = struct.Struct("<4s3I3d2f")
_CHUNK = 1 << 20


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float
    max_weight: float = 100.0
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be at least two voxels")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float32)

    @classmethod
    def fit(cls, points: np.ndarray, voxel_size: float, truncation_factor: float = 4.0,
            padding_factor: float = 10.0, max_weight: float = 100.0) -> "TsdfVolume":
        """Volume covering the bounding box of ``points`` padded by padding_factor * truncation."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        tau = truncation_factor * voxel_size
        pad = padding_factor * tau
        lo = points.min(axis=0) - pad
        hi = points.max(axis=0) + pad
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, tuple(dims), tau, max_weight)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.array(self.dims) - 1) * self.voxel_size

    def centers(self, flat_ids: np.ndarray) -> np.ndarray:
        ijk = np.stack(np.unravel_index(flat_ids, self.dims), axis=1)
        return self.origin + ijk * self.voxel_size

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.origin) & (points <= self.upper), axis=1)

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.truncation,
                          self.max_weight, self.tsdf.copy(), self.weight.copy())

    def _update(self, ids: np.ndarray, cam: np.ndarray, frame: DepthFrame, mask: Optional[np.ndarray]) -> None:
        intr = frame.intrinsics
        z = cam[:, 2]
        front = z > 0
        ids, cam, z = ids[front], cam[front], z[front]
        u, v = intr.project(cam)
        ui = np.floor(u + 0.5).astype(np.int64)
        vi = np.floor(v + 0.5).astype(np.int64)
        inside = (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
        ids, z, ui, vi = ids[inside], z[inside], ui[inside], vi[inside]
        d = frame.depth[vi, ui]
        ok = d > 0
        if mask is not None:
            ok &= mask[vi, ui]
        sdf = d - z
        ok &= sdf > -self.truncation
        ids, sdf = ids[ok], sdf[ok]
        sample = np.clip(sdf / self.truncation, -1.0, 1.0)
        flat_t = self.tsdf.reshape(-1)
        flat_w = self.weight.reshape(-1)
        w_old = flat_w[ids].astype(np.float64)
        t_old = flat_t[ids].astype(np.float64)
        flat_t[ids] = ((t_old * w_old + sample) / (w_old + 1.0)).astype(np.float32)
        flat_w[ids] = np.minimum(w_old + 1.0, self.max_weight).astype(np.float32)

    def known_cubes(self) -> np.ndarray:
        """Cubes (by their lowest corner) whose eight corners all have weight > 0."""
        k = self.weight > 0
        c = k[:-1, :-1, :-1] & k[1:, :-1, :-1] & k[:-1, 1:, :-1] & k[:-1, :-1, 1:]
        c &= k[1:, 1:, :-1] & k[1:, :-1, 1:] & k[:-1, 1:, 1:] & k[1:, 1:, 1:]
        return c

    def sample(self, points: np.ndarray, cubes: Optional[np.ndarray] = None) -> np.ndarray:
        """Trilinear tsdf at ``points``; NaN where any corner is unobserved."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cubes = self.known_cubes() if cubes is None else cubes
        f = (points - self.origin) / self.voxel_size
        i0 = np.floor(f).astype(np.int64)
        out = np.full(len(points), np.nan)
        inb = np.all((i0 >= 0) & (i0 < np.array(self.dims) - 1), axis=1)
        idx = np.flatnonzero(inb)
        i0 = i0[idx]
        ok = cubes[i0[:, 0], i0[:, 1], i0[:, 2]]
        idx, i0 = idx[ok], i0[ok]
        fr = f[idx] - i0
        T = self.tsdf
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = fr[:, 0], fr[:, 1], fr[:, 2]
        c00 = T[x0, y0, z0] * (1 - fx) + T[x0 + 1, y0, z0] * fx
        c10 = T[x0, y0 + 1, z0] * (1 - fx) + T[x0 + 1, y0 + 1, z0] * fx
        c01 = T[x0, y0, z0 + 1] * (1 - fx) + T[x0 + 1, y0, z0 + 1] * fx
        c11 = T[x0, y0 + 1, z0 + 1] * (1 - fx) + T[x0 + 1, y0 + 1, z0 + 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[idx] = c0 * (1 - fz) + c1 * fz
        return out

    def surface_points(self, band: float = 0.5) -> np.ndarray:
        """Observed voxel centres with |tsdf| * truncation below band * voxel_size."""
        near = (self.weight > 0) & (np.abs(self.tsdf) * self.truncation < band * self.voxel_size)
        return self.centers(np.flatnonzero(near.reshape(-1)))


def integrate_rigid(vol: TsdfVolume, frame: DepthFrame, pose: RigidTransform,
                    mask: Optional[np.ndarray] = None) -> None:
    """Fuse a depth frame; ``pose`` maps canonical (volume) coordinates to the camera."""
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    for start in range(0, vol.n_voxels, _CHUNK):
        ids = np.arange(start, min(start + _CHUNK, vol.n_voxels))
        cam = transform_points(pose.rotation, pose.translation, vol.centers(ids))
        vol._update(ids, cam, frame, mask)


@dataclass(frozen=True)
class VoxelBinding:
    """Voxels that the warp field may move, with their blend weights."""

    ids: np.ndarray
    binding: BlendBinding


def bind_voxels(vol: TsdfVolume, graph: DeformationGraph, max_range: Optional[float]) -> VoxelBinding:
    parts_ids, parts = [], []
    for start in range(0, vol.n_voxels, _CHUNK):
        ids = np.arange(start, min(start + _CHUNK, vol.n_voxels))
        b = bind_points(vol.centers(ids), graph, max_range)
        keep = b.bound
        parts_ids.append(ids[keep])
        parts.append(b.subset(keep))
    ids = np.concatenate(parts_ids)
    binding = BlendBinding(
        np.concatenate([p.nodes for p in parts]),
        np.concatenate([p.weights for p in parts]),
        np.concatenate([p.d_max for p in parts]),
    )
    return VoxelBinding(ids, binding)


def integrate_nonrigid(vol: TsdfVolume, frame: DepthFrame, graph: DeformationGraph,
                       voxels: VoxelBinding, mask: Optional[np.ndarray] = None) -> None:
    """Fuse a frame after warping each bound canonical voxel centre into it."""
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    n = len(voxels.ids)
    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        ids = voxels.ids[sl]
        cam = warp_points(vol.centers(ids), voxels.binding.subset(sl), graph)
        vol._update(ids, cam, frame, mask)


@dataclass(frozen=True)
class RaycastResult:
    vertices: np.ndarray  # (H, W, 3) canonical
    normals: np.ndarray  # (H, W, 3) canonical
    valid: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W) camera z, 0 where invalid

    def to_point_cloud(self, stride: int = 1) -> PointCloud:
        sel = np.zeros_like(self.valid)
        sel[::stride, ::stride] = True
        rows, cols = np.nonzero(self.valid & sel)
        return PointCloud(self.vertices[rows, cols], self.normals[rows, cols], np.stack([rows, cols], axis=1))


def _refine_crossing(vol, cubes, origin, dirs, a, b, fa, fb, iters):
    """Secant step inside the bracket [a, b], then Illinois false-position updates."""
    s = a + (b - a) * fa / (fa - fb)
    for _ in range(iters - 1):
        fs = vol.sample(origin + s[:, None] * dirs, cubes)
        ok = np.isfinite(fs)
        pos = ok & (fs > 0)
        neg = ok & ~pos
        a = np.where(pos, s, a)
        fa = np.where(pos, fs, np.where(neg, 0.5 * fa, fa))
        b = np.where(neg, s, b)
        fb = np.where(neg, fs, np.where(pos, 0.5 * fb, fb))
        denom = fa - fb
        s = np.where(ok & (denom != 0), a + (b - a) * fa / np.where(denom != 0, denom, 1.0), s)
    return s


def raycast(vol: TsdfVolume, intrinsics: CameraIntrinsics, pose: RigidTransform,
            refine_iters: int = 4) -> RaycastResult:
    """March each pixel ray at truncation/2 until the tsdf turns from + to -.

    The bracketing interval is refined by a secant step followed by
    ``refine_iters - 1`` false-position updates.
    """
    H, W = intrinsics.shape
    rays = intrinsics.pixel_rays().reshape(-1, 3)
    Rt = pose.rotation.T
    cam_origin = -(Rt @ pose.translation)
    dirs = rays @ pose.rotation  # rows are Rt @ ray
    length = np.linalg.norm(rays, axis=1)

    # Slab intersection with the volume box, parameterized by camera depth.
    lo, hi = vol.origin, vol.upper
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - cam_origin) / dirs
        t2 = (hi - cam_origin) / dirs
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    s_in = np.maximum(tmin.max(axis=1), 0.0)
    s_out = tmax.min(axis=1)

    vertices = np.zeros((H * W, 3))
    normals = np.zeros((H * W, 3))
    valid = np.zeros(H * W, dtype=bool)
    depth = np.zeros(H * W)
    cubes = vol.known_cubes()
    step = 0.5 * vol.truncation / length

    active = np.flatnonzero(s_in < s_out)
    s = s_in[active]
    f_prev = vol.sample(cam_origin + s[:, None] * dirs[active], cubes)
    hit_ids, hit_s = [], []
    while active.size:
        s_next = s + step[active]
        f_next = vol.sample(cam_origin + s_next[:, None] * dirs[active], cubes)
        known = np.isfinite(f_prev) & np.isfinite(f_next)
        front = known & (f_prev > 0) & (f_next <= 0)
        back = known & (f_prev < 0) & (f_next > 0)
        if front.any():
            ids = active[front]
            hit_ids.append(ids)
            hit_s.append(_refine_crossing(vol, cubes, cam_origin, dirs[ids], s[front], s_next[front],
                                          f_prev[front], f_next[front], refine_iters))
        keep = ~(front | back) & (s_next < s_out[active])
        active, s, f_prev = active[keep], s_next[keep], f_next[keep]

    if hit_ids:
        ids = np.concatenate(hit_ids)
        sh = np.concatenate(hit_s)
        pts = cam_origin + sh[:, None] * dirs[ids]
        h = vol.voxel_size
        grad = np.zeros((len(ids), 3))
        for ax in range(3):
            off = np.zeros(3)
            off[ax] = h
            grad[:, ax] = (vol.sample(pts + off, cubes) - vol.sample(pts - off, cubes)) / (2 * h)
        norm = np.linalg.norm(grad, axis=1)
        ok = np.isfinite(norm) & (norm > 0)
        ids, sh, pts = ids[ok], sh[ok], pts[ok]
        vertices[ids] = pts
        normals[ids] = grad[ok] / norm[ok, None]
        valid[ids] = True
        depth[ids] = sh
    return RaycastResult(vertices.reshape(H, W, 3), normals.reshape(H, W, 3), valid.reshape(H, W), depth.reshape(H, W))


def extract_mesh(vol: TsdfVolume) -> TriangleMesh:
    """Marching cubes over fully observed cubes; triangles face along +gradient."""
    cubes = vol.known_cubes()
    if not cubes.any():
        return TriangleMesh.empty()
    # skimage enables the cube whose upper corner carries the mask flag.
    mask = np.zeros(vol.dims, dtype=bool)
    mask[1:, 1:, 1:] = cubes
    try:
        verts, faces, _, _ = marching_cubes(
            vol.tsdf, level=0.0, spacing=(vol.voxel_size,) * 3, mask=mask,
            gradient_direction="descent", allow_degenerate=False,
        )
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    if len(faces) == 0:
        return TriangleMesh.empty()
    verts = verts.astype(np.float64) + vol.origin
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = faces[area > 1e-14]
    used, inverse = np.unique(faces.ravel(), return_inverse=True)
    return TriangleMesh(verts[used], inverse.reshape(-1, 3))


def dump_volume(vol: TsdfVolume, path) -> None:
    """48-byte header (magic, dims, origin, voxel size, truncation), then x-fastest (tsdf, weight) float32 pairs."""
    header = _DUMP_HEADER.pack(b"TSDF", *vol.dims, *vol.origin, vol.voxel_size, vol.truncation)
    body = np.stack([vol.tsdf.ravel(order="F"), vol.weight.ravel(order="F")], axis=1).astype("<f4")
    Path(path).write_bytes(header + body.tobytes())


def load_volume(path, max_weight: float = 100.0) -> TsdfVolume:
    raw = Path(path).read_bytes()
    magic, nx, ny, nz, ox, oy, oz, s, tau = _DUMP_HEADER.unpack_from(raw)
    if magic != b"TSDF":
        raise ValueError(f"{path} is not a TSDF dump")
    dims = (nx, ny, nz)
    body = np.frombuffer(raw, dtype="<f4", offset=_DUMP_HEADER.size).reshape(-1, 2)
    tsdf = body[:, 0].reshape(dims, order="F").astype(np.float32)
    weight = body[:, 1].reshape(dims, order="F").astype(np.float32)
    return TsdfVolume(np.array([ox, oy, oz]), float(s), dims, float(tau), max_weight, tsdf, weight)
