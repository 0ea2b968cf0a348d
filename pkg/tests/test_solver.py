"""Frame solves on analytic plane observations.

Planes give exact depth maps without a renderer: depth along the pixel ray
(dx, dy, 1) satisfying n . p = n . c is z = (n . c) / (n . ray). Pure
point-to-plane data leaves in-plane motion unconstrained on a plane, so
ICP-only tests measure distance to the true plane; point-to-point recovery
tests add feature matches to pin the tangential directions.
"""

import numpy as np
import pytest

from deformtrack.correspond import Observation
from deformtrack.energy import EnergyWeights
from deformtrack.geometry import (
    PinholeCamera,
    back_project,
    dq_from_transform,
    quat_from_axis_angle,
    quat_to_matrix,
)
from deformtrack.matching import MatchSet
from deformtrack.solver import (
    SolverConfig,
    apply_step,
    chunk_slices,
    _solve_damped,
    solve_frame,
)
from deformtrack.warpfield import Template, bind_template, sample_control_points, warp_all

Z0 = 300.0


def make_camera(hw=48, f=600.0):
    return PinholeCamera(
        fx=f, fy=f, cx=(hw - 1) / 2.0, cy=(hw - 1) / 2.0, width=hw, height=hw
    )


def plane_depth(camera, normal, point):
    """Exact per-pixel depth of the plane through `point` with `normal`."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
    dx = (u - camera.cx) / camera.fx
    dy = (v - camera.cy) / camera.fy
    denom = normal[0] * dx + normal[1] * dy + normal[2]
    return float(np.dot(normal, point)) / denom


def plane_template(camera, margin=6, step=2):
    """Grid of flat-plane points at depth Z0 away from the image border."""
    rows = np.arange(margin, camera.height - margin, step, dtype=np.float64)
    cols = np.arange(margin, camera.width - margin, step, dtype=np.float64)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    pts = back_project(
        camera, uu.ravel(), vv.ravel(), np.full(uu.size, Z0)
    )
    normals = np.tile([0.0, 0.0, -1.0], (pts.shape[0], 1))
    return Template(points=pts, normals=normals)


def plane_scene(rigid=None, radius=4.0):
    """Template at Z0 plus the observation of its rigidly moved copy."""
    camera = make_camera()
    template = plane_template(camera)
    graph = sample_control_points(template, radius=radius)
    template = bind_template(template, graph)
    if rigid is None:
        R, t = np.eye(3), np.zeros(3)
    else:
        R, t = rigid
    center = np.array([0.0, 0.0, Z0])
    n = R @ np.array([0.0, 0.0, -1.0])
    c = R @ center + t
    depth = plane_depth(camera, n, c)
    obs = Observation.from_depth(depth, camera)
    truth = template.points @ R.T + t
    return template, graph, obs, truth, (n, c)


def small_rigid(angle=0.02, axis=(1.0, 0.0, 0.0), t=(0.0, 0.0, 2.0)):
    axis = np.asarray(axis) / np.linalg.norm(axis)
    R = quat_to_matrix(quat_from_axis_angle(axis * angle))
    # rotate about the plane center, not the camera origin
    center = np.array([0.0, 0.0, Z0])
    t_full = np.asarray(t, dtype=np.float64) + center - R @ center
    return R, t_full


def test_chunk_slices_partition():
    for n, c in [(0, 4), (3, 8), (8, 8), (17, 4), (100, 8)]:
        slices = chunk_slices(n, c)
        assert len(slices) <= c
        covered = []
        for s in slices:
            assert s.stop > s.start
            covered.extend(range(s.start, s.stop))
        assert covered == list(range(n))
    assert chunk_slices(5, 1) == [slice(0, 5)]


def test_solve_damped_matches_dense_reference():
    rng = np.random.default_rng(0)
    m = 12
    J = rng.normal(size=(m, 40, 6))
    A = np.einsum("mre,mrf->mef", J, J)
    b = rng.normal(size=(m, 6))
    lam = rng.uniform(1e-3, 1e-1, size=m)
    delta, ok = _solve_damped(A, b, lam)
    assert bool(np.all(ok))
    for i in range(m):
        M = A[i] + lam[i] * np.diag(np.maximum(np.diag(A[i]), 1e-12))
        np.testing.assert_allclose(delta[i], np.linalg.solve(M, b[i]), rtol=1e-9, atol=1e-12)


def test_solve_damped_isolates_indefinite_control():
    # one bad block must not poison the healthy one
    good = np.eye(6) * 4.0
    A = np.stack([-np.eye(6), good])
    b = np.ones((2, 6))
    delta, ok = _solve_damped(A, b, np.full(2, 1e-3))
    assert ok.tolist() == [False, True]
    np.testing.assert_array_equal(delta[0], np.zeros(6))
    np.testing.assert_allclose(delta[1], np.full(6, 1.0 / (4.0 * 1.001)), rtol=1e-12)


def test_apply_step_zero_delta_keeps_identity():
    warps = np.tile([1.0, 0, 0, 0, 0, 0, 0, 0], (3, 1))
    out = apply_step(warps, np.zeros((3, 6)))
    np.testing.assert_array_equal(out, warps)


def test_apply_step_translation():
    warps = np.tile([1.0, 0, 0, 0, 0, 0, 0, 0], (1, 1))
    delta = np.array([[0.0, 0, 0, 1.0, 2.0, 3.0]])
    out = apply_step(warps, delta)
    expected = dq_from_transform(np.eye(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out[0], expected, atol=1e-15)


def test_fixed_point_leaves_warps_unchanged():
    template, graph, obs, _, _ = plane_scene(rigid=None)
    cfg = SolverConfig()
    out, report = solve_frame(template, graph, obs, None, EnergyWeights(), cfg)
    assert report.converged and not report.stalled
    assert report.accepted_steps == 0
    assert report.cost_history == []
    np.testing.assert_allclose(out.warps, graph.warps, atol=1e-10)


def test_translation_recovered_in_normal_direction():
    rigid = (np.eye(3), np.array([0.0, 0.0, 2.0]))
    template, graph, obs, truth, (n, c) = plane_scene(rigid=rigid)
    # block-coordinate steps contract the error linearly; give them room
    cfg = SolverConfig(max_outer_iters=60)
    out, report = solve_frame(template, graph, obs, None, EnergyWeights(), cfg)
    warped, _ = warp_all(template, out)
    plane_dist = (warped - c) @ n
    assert float(np.sqrt(np.mean(plane_dist**2))) < 0.05
    assert report.accepted_steps >= 1
    for before, after in report.cost_history:
        assert after < before


def test_rigid_recovery_with_matches():
    rigid = small_rigid(angle=0.03, axis=(1.0, 0.5, 0.0), t=(1.0, -0.5, 2.0))
    template, graph, obs, truth, _ = plane_scene(rigid=rigid)
    rng = np.random.default_rng(7)
    sel = rng.choice(len(template), size=30, replace=False)
    matches = MatchSet(
        template_points=template.points[sel],
        observed_points=truth[sel],
        weights=np.ones(sel.size),
        preselected=np.ones(sel.size, dtype=bool),
    )
    cfg = SolverConfig(max_outer_iters=120)
    out, report = solve_frame(template, graph, obs, matches, EnergyWeights(), cfg)
    warped, _ = warp_all(template, out)
    rmse = float(np.sqrt(np.mean(np.sum((warped - truth) ** 2, axis=1))))
    assert rmse < 0.05
    assert report.n_matches == 30
    for before, after in report.cost_history:
        assert after < before


def test_thread_count_does_not_change_results():
    rigid = small_rigid(angle=0.03, axis=(0.3, 1.0, 0.0), t=(0.5, 0.5, 1.5))
    template, graph, obs, truth, _ = plane_scene(rigid=rigid)
    sel = np.arange(0, len(template), 17)
    matches = MatchSet(
        template_points=template.points[sel],
        observed_points=truth[sel],
        weights=np.ones(sel.size),
        preselected=np.ones(sel.size, dtype=bool),
    )
    results = []
    for threads in (1, 2, 4):
        cfg = SolverConfig(n_threads=threads)
        out, report = solve_frame(template, graph, obs, matches, EnergyWeights(), cfg)
        results.append((out.warps, report))
    base_warps, base_report = results[0]
    base_dict = base_report.to_dict()
    for warps, report in results[1:]:
        np.testing.assert_array_equal(warps, base_warps)
        assert report.to_dict() == base_dict
    assert base_report.cost_history  # the comparison covered accepted steps


def test_no_data_converges_without_moving():
    camera = make_camera()
    template = plane_template(camera)
    graph = sample_control_points(template, radius=4.0)
    template = bind_template(template, graph)
    obs = Observation.from_depth(np.zeros((camera.height, camera.width)), camera)
    out, report = solve_frame(template, graph, obs, None, EnergyWeights(), SolverConfig())
    assert report.converged
    assert report.n_correspondences == 0
    np.testing.assert_array_equal(out.warps, graph.warps)


def test_fully_occluded_keeps_previous_warps():
    # no depth anywhere: the rigidity term alone holds the warm start,
    # which is already its exact minimum for a shared rigid motion
    camera = make_camera()
    template = plane_template(camera)
    graph = sample_control_points(template, radius=4.0)
    template = bind_template(template, graph)
    R = quat_to_matrix(quat_from_axis_angle(np.array([0.0, 0.02, 0.01])))
    prev = dq_from_transform(R, np.array([1.5, -0.5, 2.0]))
    graph = graph.with_warps(np.tile(prev, (len(graph), 1)))
    obs = Observation.from_depth(np.zeros((camera.height, camera.width)), camera)
    out, report = solve_frame(template, graph, obs, None, EnergyWeights(), SolverConfig())
    assert report.converged
    assert report.n_correspondences == 0
    np.testing.assert_allclose(out.warps, graph.warps, atol=1e-6)


def test_unbound_template_raises():
    camera = make_camera()
    template = plane_template(camera)
    graph = sample_control_points(template, radius=4.0)
    obs = Observation.from_depth(np.full((camera.height, camera.width), Z0), camera)
    with pytest.raises(ValueError):
        solve_frame(template, graph, obs, None, EnergyWeights(), SolverConfig())
