"""Rigid and non-rigid point-to-plane ICP over a deformation graph.

Energy: E = sum (n~^T (v~ - v_t))^2 + lambda * sum_ij eps_ij |(g_j + t_j) - (g_i + t_i) - R_i (g_j - g_i)|^2
where v~, n~ are the model vertex and normal warped by the graph. Each node
is linearized with a left-multiplied axis-angle increment omega and a
translation increment dt; unknowns are ordered [omega_i, dt_i] per node.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .deformation import (
    BlendBinding,
    DeformationGraph,
    bind_points,
    rigid_graph,
    warp_normals,
    warp_points,
)
from .geometry import DepthFrame, PointCloud, RigidTransform, project_to_rotation, so3_exp
from .solver import NormalEquations, PcgResult, pcg_solve

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 10


class TrackingLost(RuntimeError):
    pass


class SolverDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class EnergyParams:
    lam: float = 0.1
    delta_d: float = 0.10
    delta_n: float = math.cos(math.radians(60.0))

    def __post_init__(self):
        if self.lam < 0 or self.delta_d <= 0 or not -1 <= self.delta_n <= 1:
            raise ValueError("invalid energy parameters")


@dataclass(frozen=True)
class SolverConfig:
    outer: int = 4
    inner: int = 3
    pcg_max: int = 200
    pcg_tol: float = 1e-6
    mu0: float = 1e-4
    max_retries: int = 5

    def __post_init__(self):
        if min(self.outer, self.inner, self.pcg_max) < 1 or self.pcg_tol <= 0 or self.mu0 < 0:
            raise ValueError("invalid solver configuration")


@dataclass(frozen=True)
class Correspondences:
    """Model-to-frame pairs; model quantities stay in canonical coordinates."""

    v_m: np.ndarray
    n_m: np.ndarray
    v_t: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    pixels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.v_m)

    @classmethod
    def from_arrays(cls, v_m, n_m, v_t, binding: BlendBinding) -> "Correspondences":
        return cls(
            np.asarray(v_m, dtype=np.float64).reshape(-1, 3),
            np.asarray(n_m, dtype=np.float64).reshape(-1, 3),
            np.asarray(v_t, dtype=np.float64).reshape(-1, 3),
            binding.nodes,
            binding.weights,
        )

    @property
    def binding(self) -> BlendBinding:
        return BlendBinding(self.nodes, self.weights, np.zeros(len(self)))


def find_correspondences(
    model: PointCloud,
    binding: BlendBinding,
    graph: DeformationGraph,
    frame: DepthFrame,
    params: EnergyParams = EnergyParams(),
    mask: Optional[np.ndarray] = None,
) -> Correspondences:
    """Projective association of the warped model into the live frame."""
    if len(model) == 0:
        raise TrackingLost("empty model")
    vw = warp_points(model.vertices, binding, graph)
    nw = warp_normals(model.normals, binding, graph)
    intr = frame.intrinsics
    u, v = intr.project(vw)
    ok = (vw[:, 2] > 0) & np.isfinite(u) & np.isfinite(v) & np.all(np.isfinite(nw), axis=1)
    ui = np.floor(np.where(ok, u, -1.0) + 0.5).astype(np.int64)
    vi = np.floor(np.where(ok, v, -1.0) + 0.5).astype(np.int64)
    ok &= (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    idx = np.flatnonzero(ok)
    ui, vi = ui[idx], vi[idx]
    live_ok = frame.valid[vi, ui]
    if mask is not None:
        live_ok &= np.asarray(mask, dtype=bool)[vi, ui]
    live_n = frame.normal_map[vi, ui]
    live_ok &= np.all(np.isfinite(live_n), axis=1)
    live_v = frame.vertex_map[vi, ui]
    dist = np.linalg.norm(vw[idx] - live_v, axis=1)
    cos = np.einsum("ij,ij->i", nw[idx], np.where(np.isfinite(live_n), live_n, 0.0))
    accept = live_ok & (dist < params.delta_d) & (cos > params.delta_n)
    sel = idx[accept]
    if sel.size < MIN_CORRESPONDENCES:
        raise TrackingLost(f"only {sel.size} correspondences")
    return Correspondences(
        model.vertices[sel],
        model.normals[sel],
        live_v[accept],
        binding.nodes[sel],
        binding.weights[sel],
        np.stack([vi[accept], ui[accept]], axis=1),
    )


def _warped(corrs: Correspondences, graph: DeformationGraph):
    b = corrs.binding
    return warp_points(corrs.v_m, b, graph), warp_normals(corrs.n_m, b, graph)


def data_residuals(corrs: Correspondences, graph: DeformationGraph) -> np.ndarray:
    vw, nw = _warped(corrs, graph)
    return np.einsum("ij,ij->i", nw, vw - corrs.v_t)


def arap_residuals(graph: DeformationGraph) -> np.ndarray:
    """(m, 3) unscaled residuals, one per directed edge."""
    if graph.edges.shape[1] == 0:
        return np.zeros((0, 3))
    i, j = graph.edges
    g, t = graph.positions, graph.translations
    rot = np.einsum("nab,nb->na", graph.rotations[i], g[j] - g[i])
    return (g[j] + t[j]) - (g[i] + t[i]) - rot


def energy_data(corrs: Correspondences, graph: DeformationGraph) -> float:
    r = data_residuals(corrs, graph)
    return float(r @ r)


def energy_arap(graph: DeformationGraph) -> float:
    e = arap_residuals(graph)
    return float(np.sum(graph.edge_weights * np.einsum("ij,ij->i", e, e)))


def energy_total(corrs: Correspondences, graph: DeformationGraph, lam: float) -> float:
    return energy_data(corrs, graph) + lam * energy_arap(graph)


def residual_vector(corrs: Correspondences, graph: DeformationGraph, lam: float) -> np.ndarray:
    scale = np.sqrt(lam * graph.edge_weights)[:, None]
    return np.concatenate([data_residuals(corrs, graph), (scale * arap_residuals(graph)).ravel()])


def jacobian(corrs: Correspondences, graph: DeformationGraph, lam: float) -> sp.csr_matrix:
    """Analytic d(residual_vector)/d(increments), shape (n + 3m, 6k)."""
    n, S = corrs.weights.shape
    k = graph.k
    rows, cols, vals = [], [], []

    vw, nw = _warped(corrs, graph)
    e = vw - corrs.v_t
    # Unnormalized blended normal m = sum w R n, needed for d(n~)/d(omega).
    m = np.zeros((n, 3))
    for s in range(S):
        m += corrs.weights[:, s, None] * np.einsum("nij,nj->ni", graph.rotations[corrs.nodes[:, s]], corrs.n_m)
    m_norm = np.linalg.norm(m, axis=1)
    e_perp = (e - np.einsum("ij,ij->i", e, nw)[:, None] * nw) / m_norm[:, None]
    r_idx = np.arange(n)
    for s in range(S):
        node = corrs.nodes[:, s]
        w = corrs.weights[:, s, None]
        R = graph.rotations[node]
        a = np.einsum("nij,nj->ni", R, corrs.v_m - graph.positions[node])
        rn = np.einsum("nij,nj->ni", R, corrs.n_m)
        d_omega = w * (np.cross(a, nw) + np.cross(rn, e_perp))
        d_t = w * nw
        block = np.concatenate([d_omega, d_t], axis=1)
        rows.append(np.repeat(r_idx, 6))
        cols.append((6 * node[:, None] + np.arange(6)).ravel())
        vals.append(block.ravel())

    mE = graph.edges.shape[1]
    if mE:
        i, j = graph.edges
        c = np.sqrt(lam * graph.edge_weights)
        b = np.einsum("nab,nb->na", graph.rotations[i], graph.positions[j] - graph.positions[i])
        Kb = np.zeros((mE, 3, 3))
        Kb[:, 0, 1], Kb[:, 0, 2] = -b[:, 2], b[:, 1]
        Kb[:, 1, 0], Kb[:, 1, 2] = b[:, 2], -b[:, 0]
        Kb[:, 2, 0], Kb[:, 2, 1] = -b[:, 1], b[:, 0]
        base = n + 3 * np.arange(mE)
        for axis in range(3):
            row = base + axis
            rows.append(np.repeat(row, 3))
            cols.append((6 * i[:, None] + np.arange(3)).ravel())
            vals.append((c[:, None] * Kb[:, axis, :]).ravel())
            rows.append(row)
            cols.append(6 * i + 3 + axis)
            vals.append(-c)
            rows.append(row)
            cols.append(6 * j + 3 + axis)
            vals.append(c)
    J = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n + 3 * mE, 6 * k),
    )
    return J.tocsr()


def build_normal_equations(
    corrs: Correspondences, graph: DeformationGraph, params: EnergyParams, mu: float = 0.0
) -> NormalEquations:
    J = jacobian(corrs, graph, params.lam)
    r = residual_vector(corrs, graph, params.lam)
    JT = J.T.tocsr()
    return NormalEquations((JT @ J).tocsr(), JT @ r, mu)


def apply_increment(graph: DeformationGraph, delta: np.ndarray) -> DeformationGraph:
    """R_i <- exp([omega_i]x) R_i (re-orthonormalized), t_i <- t_i + dt_i."""
    d = np.asarray(delta, dtype=np.float64).reshape(graph.k, 6)
    out = graph.copy()
    R = so3_exp(d[:, :3]) @ graph.rotations
    out.rotations = np.array([project_to_rotation(r) for r in R]).reshape(-1, 3, 3)
    out.translations = graph.translations + d[:, 3:]
    return out


@dataclass
class WarpDiagnostics:
    surface_id: int = 0
    iterations: list[dict] = field(default_factory=list)
    outer_start: list[dict] = field(default_factory=list)
    initial_e_data: float = float("nan")
    final_e_data: float = float("nan")
    final_e_prior: float = float("nan")
    n_corr: int = 0

    def json_lines(self) -> list[str]:
        return [json.dumps(it, sort_keys=True) for it in self.iterations]


def solve_warp(
    model: PointCloud,
    graph: DeformationGraph,
    frame: DepthFrame,
    params: EnergyParams = EnergyParams(),
    config: SolverConfig = SolverConfig(),
    mask: Optional[np.ndarray] = None,
    binding: Optional[BlendBinding] = None,
    surface_id: int = 0,
) -> tuple[DeformationGraph, WarpDiagnostics]:
    """Damped Gauss-Newton over projective correspondences.

    Raises TrackingLost when association fails and SolverDivergence on
    non-finite energies. The input graph is not modified.
    """
    graph = graph.copy()
    if binding is None:
        binding = bind_points(model.vertices, graph)
    keep = binding.bound & model.has_normal
    model = model.subset(keep)
    binding = binding.subset(keep)
    diag = WarpDiagnostics(surface_id)
    lam = params.lam
    mu = config.mu0

    for outer in range(config.outer):
        corrs = find_correspondences(model, binding, graph, frame, params, mask)
        e_data, e_prior = energy_data(corrs, graph), energy_arap(graph)
        if not (math.isfinite(e_data) and math.isfinite(e_prior)):
            raise SolverDivergence(f"non-finite energy at outer iteration {outer}")
        if outer == 0:
            diag.initial_e_data = e_data
        diag.outer_start.append({"outer": outer, "e_data": e_data, "e_prior": e_prior, "n_corr": len(corrs)})
        any_accepted = False
        for inner in range(config.inner):
            energy = e_data + lam * e_prior
            eqns = build_normal_equations(corrs, graph, params, mu)
            if not np.all(np.isfinite(eqns.b)):
                raise SolverDivergence("non-finite gradient")
            accepted, step_norm = False, 0.0
            if np.linalg.norm(eqns.b) > 0.0:
                for _ in range(config.max_retries + 1):
                    res: PcgResult = pcg_solve(eqns, config.pcg_tol, config.pcg_max)
                    step_norm = float(np.linalg.norm(res.x))
                    candidate = apply_increment(graph, -res.x)
                    cd, cp = energy_data(corrs, candidate), energy_arap(candidate)
                    if not (math.isfinite(cd) and math.isfinite(cp)):
                        raise SolverDivergence("non-finite energy for a candidate step")
                    if cd + lam * cp < energy:
                        graph, e_data, e_prior, accepted = candidate, cd, cp, True
                        break
                    mu *= 10.0
                    eqns = eqns.with_damping(mu)
            record = {
                "surface_id": surface_id, "outer": outer, "inner": inner,
                "e_data": e_data, "e_prior": e_prior, "n_corr": len(corrs),
                "step_norm": step_norm, "accepted": accepted,
            }
            diag.iterations.append(record)
            log.debug(json.dumps(record, sort_keys=True))
            if not accepted:
                break
            any_accepted = True
            mu = max(mu / 10.0, config.mu0)
        diag.final_e_data, diag.final_e_prior, diag.n_corr = e_data, e_prior, len(corrs)
        if not any_accepted:
            # Graph unchanged, so re-association would repeat this outer pass.
            break
    return graph, diag


def rigid_icp(
    model: PointCloud,
    frame: DepthFrame,
    initial: RigidTransform = RigidTransform(),
    params: EnergyParams = EnergyParams(),
    config: SolverConfig = SolverConfig(),
    mask: Optional[np.ndarray] = None,
    surface_id: int = 0,
) -> tuple[RigidTransform, WarpDiagnostics]:
    """Point-to-plane ICP: the single-node case of solve_warp without ARAP."""
    graph, diag = solve_warp(
        model, rigid_graph(initial), frame, EnergyParams(0.0, params.delta_d, params.delta_n),
        config, mask, surface_id=surface_id,
    )
    return graph.as_rigid_transform(), diag
