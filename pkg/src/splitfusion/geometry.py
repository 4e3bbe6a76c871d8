"""Camera model, rigid transforms and depth-map primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) rays with unit z, so a ray scaled by depth is the vertex."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) of camera-frame points."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * points[..., 0] / z + self.cx
            v = self.fy * points[..., 1] / z + self.cy
        return u, v

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "depth_scale": self.depth_scale,
        }


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
        raise ValueError("rotation is not a proper orthonormal matrix")


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for one axis-angle vector or a stack of them."""
    omega = np.asarray(omega, dtype=np.float64)
    single = omega.ndim == 1
    w = omega.reshape(-1, 3)
    theta = np.linalg.norm(w, axis=1)
    K = skew(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    R = np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * (K @ K)
    return R[0] if single else R


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element acting as p -> rotation @ p + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(R)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(so3_exp(np.asarray(rotvec, dtype=np.float64)), translation)

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "RigidTransform":
        R = Rotation.from_quat(np.asarray(quat_xyzw, dtype=np.float64)).as_matrix()
        return cls(project_to_rotation(R), translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other) -> bool:
        """Exact (bitwise) equality; use allclose on matrix() for tolerances."""
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def __hash__(self) -> int:
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying b first, then a."""
    R = project_to_rotation(a.rotation @ b.rotation)
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    Rt = a.rotation.T
    return RigidTransform(Rt, -(Rt @ a.translation))


def apply(a: RigidTransform, p: np.ndarray) -> np.ndarray:
    """Apply to one point (3,) or a stack (..., 3)."""
    return transform_points(a.rotation, a.translation, p)


def transform_points(R: np.ndarray, t: np.ndarray, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ R.T + t


@dataclass(frozen=True)
class DepthFrame:
    timestamp: float
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        if depth.shape != self.intrinsics.shape:
            raise ValueError(
                f"depth shape {depth.shape} does not match intrinsics {self.intrinsics.shape}"
            )
        finite = np.isfinite(depth)
        if np.any(depth[finite] < 0):
            raise ValueError("negative depth values")
        depth[~finite] = 0.0
        depth.flags.writeable = False
        object.__setattr__(self, "depth", depth)

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @cached_property
    def vertex_map(self) -> np.ndarray:
        """(H, W, 3) camera-frame vertices; zero where depth is invalid."""
        return self.intrinsics.pixel_rays() * self.depth[..., None]

    @cached_property
    def normal_map(self) -> np.ndarray:
        """(H, W, 3) unit normals; NaN where undefined."""
        return compute_normals(self)


@dataclass(frozen=True)
class PointCloud:
    vertices: np.ndarray
    normals: np.ndarray
    pixel_origin: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(v) != len(n):
            raise ValueError("vertex and normal counts differ")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "normals", n)
        if self.pixel_origin is not None:
            object.__setattr__(
                self, "pixel_origin", np.asarray(self.pixel_origin, dtype=np.int64).reshape(-1, 2)
            )

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def has_normal(self) -> np.ndarray:
        return np.all(np.isfinite(self.normals), axis=1)

    def subset(self, keep: np.ndarray) -> "PointCloud":
        origin = None if self.pixel_origin is None else self.pixel_origin[keep]
        return PointCloud(self.vertices[keep], self.normals[keep], origin)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        if self.colors is not None:
            object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3))

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.vertices)

    def area(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


def concatenate_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    meshes = [m for m in meshes if len(m)]
    if not meshes:
        return TriangleMesh.empty()
    offsets = np.cumsum([0] + [len(m) for m in meshes[:-1]])
    verts = np.concatenate([m.vertices for m in meshes])
    tris = np.concatenate([m.triangles + o for m, o in zip(meshes, offsets)])
    colors = None
    if all(m.colors is not None for m in meshes):
        colors = np.concatenate([m.colors for m in meshes])
    return TriangleMesh(verts, tris, colors)


def compute_normals(frame: DepthFrame, max_depth_jump: float = 0.05) -> np.ndarray:
    """Per-pixel normals from central differences of the vertex map.

    A pixel gets a normal only if it and its four neighbours are valid and no
    neighbour's depth differs by more than ``max_depth_jump`` times the
    centre depth. Normals face the camera.
    """
    depth = frame.depth
    V = frame.vertex_map
    H, W = depth.shape
    normals = np.full((H, W, 3), np.nan)
    if H < 3 or W < 3:
        return normals
    d = depth[1:-1, 1:-1]
    left, right = depth[1:-1, :-2], depth[1:-1, 2:]
    up, down = depth[:-2, 1:-1], depth[2:, 1:-1]
    ok = (d > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    limit = max_depth_jump * d
    for nb in (left, right, up, down):
        ok &= np.abs(nb - d) <= limit
    du = V[1:-1, 2:] - V[1:-1, :-2]
    dv = V[2:, 1:-1] - V[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    flip = np.einsum("ijk,ijk->ij", n, V[1:-1, 1:-1]) > 0
    n[flip] *= -1.0
    inner = normals[1:-1, 1:-1]
    inner[ok] = n[ok]
    return normals


def backproject(frame: DepthFrame, mask: Optional[np.ndarray] = None) -> PointCloud:
    """Point cloud of valid (and masked) pixels, row-major pixel order."""
    valid = frame.valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != valid.shape:
            raise ValueError("mask shape does not match the frame")
        valid = valid & mask
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        return PointCloud.empty()
    return PointCloud(
        frame.vertex_map[rows, cols],
        frame.normal_map[rows, cols],
        np.stack([rows, cols], axis=1),
    )


def rigid_fit(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst (no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = 1.0 if np.linalg.det(Vt.T @ U.T) > 0 else -1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)
