import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL, jacobian_relative_error, plane_frame, random_problem, random_transform
from splitfusion.deformation import DeformationGraph, bind_points, premultiply, rigid_graph, sample_nodes
from splitfusion.geometry import DepthFrame, PointCloud, RigidTransform, backproject, compose, invert, so3_exp
from splitfusion.icp import (
    Correspondences,
    EnergyParams,
    SolverConfig,
    TrackingLost,
    apply_increment,
    build_normal_equations,
    data_residuals,
    energy_arap,
    energy_data,
    energy_total,
    find_correspondences,
    rigid_icp,
    solve_warp,
)
from splitfusion.synthetic import CameraPath, rigid_room_script, render

seeds = st.integers(0, 2**32 - 1)


def room_pair(first: RigidTransform, second: RigidTransform, noise=0.0):
    """Two renders of the rigid room from world-from-camera poses ``first`` and ``second``."""
    script = rigid_room_script(frames=2, noise_sigma=noise)
    frames = []
    for pose in (first, second):
        script.camera = CameraPath("static", position=list(pose.translation),
                                   rotation=list(_rotvec(pose.rotation)))
        frames.append(render(script, 0).frame)
    return frames


def _rotvec(R):
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(R).as_rotvec()


def model_of(frame: DepthFrame, stride=2) -> PointCloud:
    cloud = backproject(frame)
    keep = cloud.has_normal & (cloud.pixel_origin[:, 0] % stride == 0) & (cloud.pixel_origin[:, 1] % stride == 0)
    return cloud.subset(keep)


def angle_between(R1, R2) -> float:
    c = (np.trace(R1.T @ R2) - 1) / 2
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


# -- energies -----------------------------------------------------------------

def test_aligned_correspondences_have_zero_energy(rng):
    g = rigid_graph()
    v = rng.normal(size=(20, 3))
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    c = Correspondences.from_arrays(v, n, v, bind_points(v, g))
    assert energy_data(c, g) == 0.0


def test_single_offset_energy():
    g = rigid_graph()
    c = Correspondences.from_arrays([[0, 0, 1.0]], [[0, 0, -1.0]], [[0, 0, 1.01]], bind_points(np.zeros(3), g))
    assert energy_data(c, g) == pytest.approx(1e-4, rel=1e-12)


@given(seeds)
def test_energy_data_matches_term_by_term(seed):
    rng = np.random.default_rng(seed)
    g, c = random_problem(rng)
    W = c.binding.dense(g.k)
    total = 0.0
    for j in range(len(c)):
        v = sum(W[j, i] * (g.rotations[i] @ (c.v_m[j] - g.positions[i]) + g.translations[i] + g.positions[i])
                for i in range(g.k))
        n = sum(W[j, i] * g.rotations[i] @ c.n_m[j] for i in range(g.k))
        n = n / np.linalg.norm(n)
        total += float(n @ (v - c.v_t[j])) ** 2
    assert energy_data(c, g) == pytest.approx(total, rel=1e-10, abs=1e-15)


def test_arap_identity_and_two_node_expansion():
    g = DeformationGraph.from_nodes(np.array([[0.0, 0, 0], [0.1, 0, 0]]))
    assert energy_arap(g) == 0.0
    g.translations = np.array([[0.0, 0.0, 0.0], [0.01, -0.02, 0.03]])
    d = g.translations[1] - g.translations[0]
    assert energy_arap(g) == pytest.approx(2 * (d @ d), rel=1e-12)


@given(seeds)
def test_arap_null_space(seed):
    rng = np.random.default_rng(seed)
    g = DeformationGraph.from_nodes(rng.uniform(-0.5, 0.5, (15, 3)))
    T = random_transform(rng)
    g.rotations = np.tile(T.rotation, (g.k, 1, 1))
    g.translations = g.positions @ T.rotation.T + T.translation - g.positions
    assert energy_arap(g) <= 1e-12


# -- Jacobian and normal equations ------------------------------------------

@given(seeds, st.sampled_from([0.0, 1.0, 5.0]))
def test_jacobian_matches_finite_differences(seed, lam):
    rng = np.random.default_rng(seed)
    g, c = random_problem(rng)
    assert jacobian_relative_error(c, g, lam) <= 1e-4


def test_zero_residuals_give_zero_gradient():
    g = rigid_graph(RigidTransform.from_rotvec([0.1, 0.2, 0.3], [0.1, 0, 0]))
    v = np.random.default_rng(0).normal(size=(30, 3))
    b = bind_points(v, g)
    from splitfusion.deformation import warp_points

    c = Correspondences.from_arrays(v, np.tile([0, 0, 1.0], (30, 1)), warp_points(v, b, g), b)
    eq = build_normal_equations(c, g, EnergyParams(lam=0.0))
    assert np.abs(eq.b).max() < 1e-15


def test_single_node_gram_is_psd(rng):
    g, c = random_problem(rng, k=1, n=30)
    eq = build_normal_equations(c, g, EnergyParams(0.0))
    A = eq.A.toarray()
    assert A.shape == (6, 6)
    np.testing.assert_allclose(A, A.T)
    assert np.linalg.eigvalsh(A).min() >= -1e-12


def test_block_sparsity_follows_edges_and_co_binding(rng):
    g, c = random_problem(rng, k=10, n=40)
    A = build_normal_equations(c, g, EnergyParams(5.0)).A.tocoo()
    allowed = {(i, i) for i in range(g.k)} | set(map(tuple, g.edges.T.tolist()))
    for row in c.nodes:
        allowed |= {(int(a), int(b)) for a in row for b in row}
    for r, col, val in zip(A.row, A.col, A.data):
        if val != 0:
            assert (r // 6, col // 6) in allowed


# -- correspondences ----------------------------------------------------------

def test_self_correspondence_has_zero_residual():
    frame = plane_frame(SMALL, [0.1, 0.2, 1.0], 1.2)
    model = model_of(frame, 1)
    g = rigid_graph()
    c = find_correspondences(model, bind_points(model.vertices, g), g, frame)
    assert len(c) == len(model)
    np.testing.assert_array_equal(c.v_m, c.v_t)
    assert np.abs(data_residuals(c, g)).max() == 0.0


def test_all_invalid_live_frame_is_lost():
    model = model_of(plane_frame(SMALL, [0, 0, 1.0], 1.0))
    g = rigid_graph()
    with pytest.raises(TrackingLost):
        find_correspondences(model, bind_points(model.vertices, g), g, DepthFrame(0, np.zeros(SMALL.shape), SMALL))


def test_plane_shifted_along_normal():
    model = model_of(plane_frame(SMALL, [0, 0, 1.0], 1.0), 1)
    live = plane_frame(SMALL, [0, 0, 1.0], 1.01)
    g = rigid_graph()
    c = find_correspondences(model, bind_points(model.vertices, g), g, live, EnergyParams(5.0, 0.1, 0.5))
    assert len(c) == len(model)
    np.testing.assert_allclose(np.abs(data_residuals(c, g)), 0.01, atol=1e-12)


def test_gates_reject_far_and_misoriented(rng):
    model = model_of(plane_frame(SMALL, [0, 0, 1.0], 1.0), 1)
    g = rigid_graph()
    b = bind_points(model.vertices, g)
    with pytest.raises(TrackingLost):
        find_correspondences(model, b, g, plane_frame(SMALL, [0, 0, 1.0], 1.2), EnergyParams(5.0, 0.1, 0.5))
    tilted = plane_frame(SMALL, [np.sin(1.2), 0, np.cos(1.2)], 1.0)
    with pytest.raises(TrackingLost):
        find_correspondences(model, b, g, tilted, EnergyParams(5.0, 1.0, 0.5))


# -- solvers ------------------------------------------------------------------

def test_fixed_point_converges_immediately():
    frame = room_pair(RigidTransform(), RigidTransform())[0]
    model = model_of(frame)
    nodes = sample_nodes(model.vertices, 0.3)
    g = DeformationGraph.from_nodes(nodes, r_node=0.3)
    out, diag = solve_warp(model, g, frame)
    # A round-off step may still be accepted when it lowers E by round-off.
    assert max(it["step_norm"] for it in diag.iterations) < 1e-12
    np.testing.assert_allclose(out.translations, g.translations, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.rotations, g.rotations, rtol=0, atol=1e-12)
    assert diag.final_e_data < 1e-20  # blend-weight rounding only


def test_rigid_icp_identical_frames():
    frame = room_pair(RigidTransform(), RigidTransform())[0]
    T, _ = rigid_icp(model_of(frame), frame)
    np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-9)


@pytest.mark.parametrize("second, max_t, max_deg", [
    (RigidTransform(np.eye(3), [0.0, 0.0, 0.02]), 1e-3, 0.1),
    (RigidTransform(np.eye(3), [0.01, 0.0, 0.0]), 1e-3, 0.1),
    (RigidTransform.from_rotvec([0.0, math.radians(5), 0.0]), 1e-3, 0.2),
])
def test_rigid_icp_recovers_camera_motion(second, max_t, max_deg):
    a, b = room_pair(RigidTransform(), second)
    truth = invert(second)  # canonical (first camera) -> second camera
    T, diag = rigid_icp(model_of(a), b)
    assert np.linalg.norm(T.translation - truth.translation) <= max_t
    assert angle_between(T.rotation, truth.rotation) <= max_deg
    g, _ = solve_warp(model_of(a), rigid_graph(), b, EnergyParams(0.0))
    assert np.linalg.norm(g.translations[0] - truth.translation) <= max_t


def test_accepted_iterations_never_increase_energy():
    a, b = room_pair(RigidTransform(), RigidTransform.from_rotvec([0.02, -0.03, 0.01], [0.02, -0.01, 0.03]))
    model = model_of(a)
    g = DeformationGraph.from_nodes(sample_nodes(model.vertices, 0.4), r_node=0.4)
    params = EnergyParams(5.0)
    _, diag = solve_warp(model, g, b, params)
    for start in diag.outer_start:
        energies = [start["e_data"] + 5.0 * start["e_prior"]]
        energies += [it["e_data"] + 5.0 * it["e_prior"] for it in diag.iterations
                     if it["outer"] == start["outer"] and it["accepted"]]
        assert all(y <= x for x, y in zip(energies, energies[1:]))
    assert diag.final_e_data <= 0.1 * diag.initial_e_data


def test_gauge_freedom_stays_finite(rng):
    g, c = random_problem(rng, k=8, n=5)
    eq = build_normal_equations(c, g, EnergyParams(0.0), mu=1e-4)
    from splitfusion.solver import pcg_solve

    assert np.all(np.isfinite(pcg_solve(eq).x))


def test_apply_increment_keeps_rotations_orthonormal(rng):
    g, _ = random_problem(rng, k=5, n=5)
    out = apply_increment(g, rng.normal(scale=0.5, size=30))
    for R in out.rotations:
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_single_node_reduction_matches_rigid_icp(rng):
    for _ in range(3):
        motion = random_transform(rng, angle=0.03, shift=0.02)
        a, b = room_pair(RigidTransform(), motion)
        init = random_transform(rng, angle=0.005, shift=0.005)
        T, _ = rigid_icp(model_of(a), b, init)
        g, _ = solve_warp(model_of(a), rigid_graph(init), b, EnergyParams(0.0))
        np.testing.assert_allclose(g.as_rigid_transform().matrix(), T.matrix(), atol=1e-12, rtol=0)
