"""Trajectory alignment and absolute trajectory error (ATE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import Trajectory, associate
from .geometry import RigidTransform, rigid_fit

MATCH_TOLERANCE = 0.02
MIN_MATCHES = 3


class EvaluationError(ValueError):
    pass


def matched_positions(estimated: Trajectory, reference: Trajectory,
                      tol: float = MATCH_TOLERANCE) -> tuple[np.ndarray, np.ndarray]:
    """Positions of timestamp-matched pose pairs, in estimated-trajectory order."""
    pairs = associate(list(estimated.timestamps), list(reference.timestamps), tol)
    if len(pairs) < MIN_MATCHES:
        raise EvaluationError(f"only {len(pairs)} matched poses, need at least {MIN_MATCHES}")
    ei = np.array([i for i, _ in pairs])
    ri = np.array([j for _, j in pairs])
    return estimated.positions()[ei], reference.positions()[ri]


def _align_positions(est: np.ndarray, ref: np.ndarray) -> RigidTransform:
    if np.array_equal(est, ref):
        return RigidTransform.identity()
    return rigid_fit(est, ref)


def align(estimated: Trajectory, reference: Trajectory) -> RigidTransform:
    """Closed-form rigid alignment (no scale) of estimated positions onto the reference."""
    return _align_positions(*matched_positions(estimated, reference))


@dataclass(frozen=True)
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    errors: tuple
    alignment: RigidTransform

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "n": len(self.errors),
            "errors": list(self.errors),
            "alignment": self.alignment.matrix().tolist(),
        }


def ate_from_positions(est: np.ndarray, ref: np.ndarray) -> AteReport:
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if est.shape != ref.shape or len(est) < MIN_MATCHES:
        raise EvaluationError("need at least three paired positions")
    T = _align_positions(est, ref)
    aligned = est if np.array_equal(est, ref) else est @ T.rotation.T + T.translation
    err = np.linalg.norm(aligned - ref, axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mean=float(err.mean()),
        median=float(np.median(err)),
        max=float(err.max()),
        errors=tuple(float(e) for e in err),
        alignment=T,
    )


def ate_rmse(estimated: Trajectory, reference: Trajectory) -> AteReport:
    """ATE after timestamp matching and rigid alignment."""
    return ate_from_positions(*matched_positions(estimated, reference))


def deformation_error(graph, canonical: np.ndarray, live: np.ndarray) -> float:
    """RMS distance between warped canonical samples and their true live positions.

    Both point sets are in the frames the graph maps between (canonical to
    live camera); samples are bound to the graph from scratch.
    """
    from .deformation import bind_points, warp_points

    canonical = np.asarray(canonical, dtype=np.float64)
    est = warp_points(canonical, bind_points(canonical, graph), graph)
    return float(np.sqrt(np.mean(np.sum((est - np.asarray(live)) ** 2, axis=1))))
