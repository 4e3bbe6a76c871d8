"""TUM RGB-D sequences, instance masks, trajectories and PLY export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, DepthFrame, RigidTransform, TriangleMesh

log = logging.getLogger(__name__)

DEFAULT_ASSOCIATION_TOL = 0.02

# Freiburg "ROS default" calibration; synthetic exports write their own.
TUM_DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480, 5000.0)


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class FrameEntry:
    timestamp: float
    stamp: str
    depth_path: Path
    color_path: Optional[Path] = None
    mask_path: Optional[Path] = None


@dataclass(frozen=True)
class SequenceManifest:
    root: Path
    entries: tuple[FrameEntry, ...]
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        ts = [e.timestamp for e in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DatasetError("manifest timestamps must be strictly increasing")

    @property
    def depth_scale(self) -> float:
        return self.intrinsics.depth_scale

    def __len__(self) -> int:
        return len(self.entries)

    def load_frame(self, index: int) -> DepthFrame:
        entry = self.entries[index]
        raw = np.asarray(Image.open(entry.depth_path))
        depth = raw.astype(np.float64) / self.depth_scale
        color = None
        if entry.color_path is not None and entry.color_path.exists():
            color = np.asarray(Image.open(entry.color_path).convert("RGB"))
        return DepthFrame(entry.timestamp, depth, self.intrinsics, color)


@dataclass(frozen=True)
class InstanceMaskFrame:
    labels: np.ndarray
    classes: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(np.int64)
        object.__setattr__(self, "labels", labels)
        present = set(np.unique(labels).tolist()) - {0}
        missing = present - set(self.classes)
        if missing:
            raise DatasetError(f"instance ids {sorted(missing)} have no class entry")

    @classmethod
    def background(cls, shape: tuple[int, int]) -> "InstanceMaskFrame":
        return cls(np.zeros(shape, dtype=np.int64), {})

    def instance_ids(self) -> list[int]:
        return sorted(self.classes)


def read_index(path: Path) -> list[tuple[float, str, str]]:
    """Parse a TUM "timestamp filename" index file."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DatasetError(f"malformed index line in {path}: {line!r}")
        rows.append((float(parts[0]), parts[0], parts[1]))
    return rows


def associate(
    first: Sequence[float], second: Sequence[float], tol: float = DEFAULT_ASSOCIATION_TOL
) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp matching within ``tol``.

    Candidate pairs are taken in order of increasing time difference, the
    convention of the TUM benchmark's associate.py.
    """
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    ii, jj = np.nonzero(diff < tol)
    order = np.lexsort((jj, ii, diff[ii, jj]))
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def load_intrinsics(root: Path) -> Optional[CameraIntrinsics]:
    path = Path(root) / "intrinsics.json"
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    return CameraIntrinsics(**data)


def load_tum_sequence(
    root, tol: float = DEFAULT_ASSOCIATION_TOL, intrinsics: Optional[CameraIntrinsics] = None
) -> SequenceManifest:
    root = Path(root)
    depth_index, rgb_index = root / "depth.txt", root / "rgb.txt"
    for p in (depth_index, rgb_index):
        if not p.exists():
            raise DatasetError(f"missing index file {p}")
    depth_rows = read_index(depth_index)
    rgb_rows = read_index(rgb_index)
    pairs = associate([r[0] for r in depth_rows], [r[0] for r in rgb_rows], tol)
    if not pairs:
        raise DatasetError(f"no depth/color frames could be paired in {root}")
    entries = []
    for i, j in pairs:
        ts, stamp, dpath = depth_rows[i]
        depth_path = root / dpath
        color_path = root / rgb_rows[j][2]
        for p in (depth_path, color_path):
            if not p.exists():
                raise DatasetError(f"referenced file {p} does not exist")
        entries.append(FrameEntry(ts, stamp, depth_path, color_path))
    if intrinsics is None:
        intrinsics = load_intrinsics(root) or TUM_DEFAULT_INTRINSICS
    return SequenceManifest(root, tuple(entries), intrinsics)


def load_mask(png_path: Path, json_path: Path, shape: tuple[int, int], frame_name: str) -> InstanceMaskFrame:
    labels = np.asarray(Image.open(png_path))
    if labels.shape != tuple(shape):
        raise DatasetError(
            f"mask for frame {frame_name} has shape {labels.shape}, expected {tuple(shape)}"
        )
    classes: dict[int, str] = {}
    if json_path.exists():
        table = json.loads(json_path.read_text()).get("instances", {})
        classes = {int(k): str(v) for k, v in table.items()}
    return InstanceMaskFrame(labels, classes)


def load_masks(manifest: SequenceManifest, mask_dir) -> list[InstanceMaskFrame]:
    """One mask frame per manifest entry; missing files mean all background."""
    mask_dir = Path(mask_dir) if mask_dir is not None else None
    shape = manifest.intrinsics.shape
    out = []
    for entry in manifest.entries:
        png = mask_dir / f"{entry.stamp}.png" if mask_dir else None
        if png is None or not png.exists():
            out.append(InstanceMaskFrame.background(shape))
            continue
        out.append(load_mask(png, png.with_suffix(".json"), shape, entry.stamp))
    return out


def write_mask(labels: np.ndarray, classes: dict[int, str], mask_dir, stamp: str) -> None:
    mask_dir = Path(mask_dir)
    mask_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint16)).save(mask_dir / f"{stamp}.png")
    payload = {"instances": {str(k): v for k, v in sorted(classes.items())}}
    (mask_dir / f"{stamp}.json").write_text(json.dumps(payload, sort_keys=True) + "\n")


@dataclass(frozen=True)
class Trajectory:
    timestamps: tuple[float, ...]
    poses: tuple[RigidTransform, ...]

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp and pose counts differ")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


def _fmt(x: float) -> str:
    """Shortest repr that round-trips exactly; integers lose the trailing '.0'."""
    if x == 0:
        return "0"
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def format_pose_line(timestamp: float, pose: RigidTransform) -> str:
    q = pose.quaternion()
    values = list(pose.translation) + list(q)
    return f"{timestamp:.6f} " + " ".join(_fmt(float(v)) for v in values)


def write_trajectory(traj: Trajectory, path) -> None:
    lines = [format_pose_line(t, p) for t, p in zip(traj.timestamps, traj.poses)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_trajectory(path) -> Trajectory:
    stamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise DatasetError(f"malformed trajectory line in {path}: {line!r}")
        stamps.append(vals[0])
        poses.append(RigidTransform.from_quaternion(vals[4:8], vals[1:4]))
    return Trajectory(tuple(stamps), tuple(poses))


def write_mesh(mesh: TriangleMesh, path) -> None:
    """ASCII PLY, optional per-vertex uchar colours."""
    has_color = mesh.colors is not None
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    out = header
    if has_color:
        for v, c in zip(mesh.vertices, mesh.colors):
            out.append(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}")
    else:
        out.extend(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}" for v in mesh.vertices)
    out.extend(f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.triangles)
    Path(path).write_text("\n".join(out) + "\n")


def read_mesh(path) -> TriangleMesh:
    lines = Path(path).read_text().splitlines()
    n_vert = n_face = 0
    has_color = False
    i = 0
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:2] == ["property", "uchar"] and parts[2] == "red":
            has_color = True
        i += 1
    body = lines[i + 1 :]
    vrows = [list(map(float, body[k].split())) for k in range(n_vert)]
    frows = [list(map(int, body[n_vert + k].split()))[1:4] for k in range(n_face)]
    verts = np.array(vrows).reshape(-1, 6 if has_color else 3)
    colors = verts[:, 3:6].astype(np.uint8) if has_color else None
    return TriangleMesh(verts[:, :3], np.array(frows, dtype=np.int64).reshape(-1, 3), colors)
