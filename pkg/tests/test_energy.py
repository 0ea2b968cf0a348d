"""Residual values against hand computations, Jacobians against finite
differences.

The finite-difference oracle perturbs one control at a time through the
same left-composed increment the solver uses, with robust weights and
correspondence linkage frozen, and compares the change of each row's
weighted value against the row's analytic Jacobian in that control's bin.
"""

import numpy as np
import pytest

from deformtrack.correspond import CorrespondenceSet
from deformtrack.energy import (
    EnergyReport,
    EnergyWeights,
    ResidualBlocks,
    arap_residuals,
    balance_arap_weight,
    blend_apply_jacobian,
    feature_residuals,
    icp_residuals,
    total_cost,
    tukey_weight,
    warp_increment_basis,
)
from deformtrack.geometry import (
    dq_apply_batch,
    dq_exp,
    dq_from_transform,
    dq_mul,
    quat_to_matrix,
    quat_from_axis_angle,
)
from deformtrack.matching import MatchSet
from deformtrack.warpfield import (
    ControlGraph,
    Template,
    bind_points,
    build_connections,
    warp_all,
)

FD_EPS = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-6


def random_warps(rng, m, angle=0.3, translation=8.0):
    out = np.zeros((m, 8))
    for i in range(m):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = quat_to_matrix(quat_from_axis_angle(axis * rng.uniform(0.0, angle)))
        t = rng.uniform(-translation, translation, size=3)
        out[i] = dq_from_transform(R, t)
    return out


def random_scene(seed=0, m=6, n=40, k=4):
    """Small generic scene: bound template + connected control graph."""
    rng = np.random.default_rng(seed)
    ctrl_pts = rng.uniform(0.0, 80.0, size=(m, 3))
    radius = 40.0
    edges, edge_w = build_connections(ctrl_pts, sigma=2.0 * radius)
    warps = random_warps(rng, m)
    graph = ControlGraph(
        points=ctrl_pts,
        warps=warps,
        edges=edges,
        edge_weights=edge_w,
        sampling_radius=radius,
    )
    pts = rng.uniform(0.0, 80.0, size=(n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    idx, w = bind_points(pts, ctrl_pts, k=k, sigma=radius)
    template = Template(
        points=pts, normals=normals, bind_indices=idx, bind_weights=w
    )
    return template, graph, rng


def synthetic_correspondences(template, graph, rng, miss=0.2):
    """Observed points near the warped template with random unit normals."""
    n = template.points.shape[0]
    warped, _ = warp_all(template, graph)
    obs_pts = warped + rng.normal(scale=1.5, size=(n, 3))
    obs_n = rng.normal(size=(n, 3))
    obs_n /= np.linalg.norm(obs_n, axis=1, keepdims=True)
    valid = rng.uniform(size=n) > miss
    valid[:2] = True
    return CorrespondenceSet(
        valid=valid,
        points=obs_pts,
        normals=obs_n,
        pixels=np.zeros((n, 2), dtype=np.int64),
    )


def perturb(warps, c, delta):
    out = warps.copy()
    out[c] = dq_mul(dq_exp(delta[:3], delta[3:]), out[c])
    return out


def fd_check(build, graph, eps=FD_EPS):
    """Compare analytic bin Jacobians with central differences.

    build(warps, jacobian) must emit rows in a fixed order.
    """
    base = build(graph.warps, True)
    assert base.jacobian is not None
    assert base.jacobian.shape == (base.values.shape[0], 6)
    checked = 0
    for c in range(graph.points.shape[0]):
        rows = base.ctrl == c
        if not np.any(rows):
            continue
        for a in range(6):
            delta = np.zeros(6)
            delta[a] = eps
            fp = build(perturb(graph.warps, c, delta), False).weighted_values
            fm = build(perturb(graph.warps, c, -delta), False).weighted_values
            fd = (fp - fm) / (2.0 * eps)
            np.testing.assert_allclose(
                fd[rows], base.jacobian[rows, a], rtol=FD_RTOL, atol=FD_ATOL
            )
            checked += int(np.count_nonzero(rows))
    assert checked > 0


def test_tukey_weight_values():
    w = tukey_weight(np.array([0.0, 5.0, -5.0, 10.0, 12.0, -40.0]), 10.0)
    expected = np.array([1.0, 0.5625, 0.5625, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(w, expected, atol=1e-15)


def test_increment_basis_matches_finite_differences():
    rng = np.random.default_rng(3)
    warps = random_warps(rng, 5)
    K = warp_increment_basis(warps)
    eps = 1e-6
    for i in range(5):
        for a in range(6):
            delta = np.zeros(6)
            delta[a] = eps
            wp = dq_mul(dq_exp(delta[:3], delta[3:]), warps[i])
            wm = dq_mul(dq_exp(-delta[:3], -delta[3:]), warps[i])
            fd = (wp - wm) / (2.0 * eps)
            np.testing.assert_allclose(fd, K[i, :, a], rtol=1e-6, atol=1e-9)


def test_blend_apply_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    B = rng.normal(size=(7, 8))
    B[:, 0] += 2.0  # keep the real part well away from zero
    p = rng.uniform(-50.0, 50.0, size=(7, 3))
    G = blend_apply_jacobian(B, p)
    eps = 1e-6
    for e in range(8):
        dB = np.zeros(8)
        dB[e] = eps
        fd = (dq_apply_batch(B + dB, p) - dq_apply_batch(B - dB, p)) / (2.0 * eps)
        np.testing.assert_allclose(fd, G[:, :, e], rtol=1e-5, atol=1e-8)


def test_icp_cost_matches_direct_sum():
    template, graph, rng = random_scene(seed=1)
    corr = synthetic_correspondences(template, graph, rng)
    weights = EnergyWeights()
    blocks = icp_residuals(template, graph, corr, weights)
    warped, _ = warp_all(template, graph)
    vi = corr.valid
    r = np.sum(corr.normals[vi] * (warped[vi] - corr.points[vi]), axis=1)
    expected = np.sum(tukey_weight(r, weights.tukey_scale) * r * r)
    assert blocks.cost() == pytest.approx(expected, rel=1e-12)
    # binding weights sum to one, so supports add up to the robust weights
    per_point = np.bincount(
        np.repeat(np.arange(r.size), template.bind_indices.shape[1]),
        weights=blocks.support,
    )
    np.testing.assert_allclose(per_point, tukey_weight(r, weights.tukey_scale))


def test_icp_jacobian_matches_finite_differences():
    template, graph, rng = random_scene(seed=2)
    corr = synthetic_correspondences(template, graph, rng)
    weights = EnergyWeights(tukey_scale=25.0)
    warped, _ = warp_all(template, graph)
    vi = corr.valid
    r0 = np.sum(corr.normals[vi] * (warped[vi] - corr.points[vi]), axis=1)
    frozen = np.sqrt(tukey_weight(r0, weights.tukey_scale))

    def build(warps, jacobian):
        return icp_residuals(
            template, graph, corr, weights,
            warps=warps, jacobian=jacobian, robust_sqrt=frozen,
        )

    fd_check(build, graph)


def test_icp_jacobian_with_negated_warp():
    # a sign-flipped warp encodes the same transform; rows must still
    # differentiate cleanly through the hemisphere alignment
    template, graph, rng = random_scene(seed=11)
    graph = graph.with_warps(graph.warps * np.where(np.arange(len(graph.points)) == 2, -1.0, 1.0)[:, None])
    corr = synthetic_correspondences(template, graph, rng)
    weights = EnergyWeights(tukey_scale=25.0)
    warped, _ = warp_all(template, graph)
    vi = corr.valid
    r0 = np.sum(corr.normals[vi] * (warped[vi] - corr.points[vi]), axis=1)
    frozen = np.sqrt(tukey_weight(r0, weights.tukey_scale))

    def build(warps, jacobian):
        return icp_residuals(
            template, graph, corr, weights,
            warps=warps, jacobian=jacobian, robust_sqrt=frozen,
        )

    fd_check(build, graph)


def test_feature_cost_matches_direct_sum():
    template, graph, rng = random_scene(seed=5)
    sel = np.arange(0, 12)
    obs = rng.uniform(0.0, 80.0, size=(sel.size, 3))
    wk = rng.uniform(0.2, 1.0, size=sel.size)
    wk[3] = 0.0  # dropped match
    matches = MatchSet(
        template_points=template.points[sel],
        observed_points=obs,
        weights=wk,
        preselected=wk >= 0.5,
    )
    weights = EnergyWeights(feature_weight=10.0)
    blocks = feature_residuals(
        graph, matches,
        template.bind_indices[sel], template.bind_weights[sel], weights,
    )
    warped, _ = warp_all(template, graph)
    gaps = warped[sel] - obs
    expected = np.sum(10.0 * wk * np.sum(gaps * gaps, axis=1))
    assert blocks.cost() == pytest.approx(expected, rel=1e-12)
    # support sums to feature_weight * match weight per match
    n_rows_per_match = template.bind_indices.shape[1] * 3
    active = wk > 0
    per_match = blocks.support.reshape(-1, n_rows_per_match).sum(axis=1)
    np.testing.assert_allclose(per_match, 10.0 * wk[active], rtol=1e-12)


def test_feature_jacobian_matches_finite_differences():
    template, graph, rng = random_scene(seed=6)
    sel = np.arange(0, 10)
    obs = rng.uniform(0.0, 80.0, size=(sel.size, 3))
    matches = MatchSet(
        template_points=template.points[sel],
        observed_points=obs,
        weights=rng.uniform(0.3, 1.0, size=sel.size),
        preselected=np.ones(sel.size, dtype=bool),
    )
    weights = EnergyWeights()

    def build(warps, jacobian):
        return feature_residuals(
            graph, matches,
            template.bind_indices[sel], template.bind_weights[sel], weights,
            warps=warps, jacobian=jacobian,
        )

    fd_check(build, graph)


def two_control_graph(d=30.0, edge_weight=1.0):
    pts = np.array([[0.0, 0.0, 0.0], [d, 0.0, 0.0]])
    return ControlGraph(
        points=pts,
        warps=np.tile(np.array([1.0, 0, 0, 0, 0, 0, 0, 0]), (2, 1)),
        edges=np.array([[0, 1]], dtype=np.int64),
        edge_weights=np.array([edge_weight]),
        sampling_radius=d,
    )


def test_arap_stretch_cost_hand_computed():
    d, t = 30.0, 4.0
    graph = two_control_graph(d)
    warps = graph.warps.copy()
    warps[1, 5] = 0.5 * t  # dual = 0.5 * (0, t) * identity: translate +x
    graph = graph.with_warps(warps)
    weights = EnergyWeights(angle_weight=20.0, rotation_weight=100.0)
    wa = np.array([2.0, 4.0])  # mean 3.0
    length, angle, rotation = arap_residuals(graph, wa, weights)
    assert length.cost() == pytest.approx(3.0 * t * t, rel=1e-12)
    assert angle.cost() == pytest.approx(0.0, abs=1e-20)
    assert rotation.cost() == pytest.approx(0.0, abs=1e-20)


def test_arap_poke_cost_hand_computed():
    d, t = 30.0, 4.0
    graph = two_control_graph(d)
    warps = graph.warps.copy()
    warps[1, 6] = 0.5 * t  # translate control 1 by t along +y
    graph = graph.with_warps(warps)
    weights = EnergyWeights(angle_weight=20.0, rotation_weight=100.0)
    length, angle, rotation = arap_residuals(graph, np.ones(2), weights)
    stretch = np.hypot(d, t) - d
    theta = np.arctan2(t, d)
    assert length.cost() == pytest.approx(stretch**2, rel=1e-12)
    assert angle.cost() == pytest.approx(20.0 * 2.0 * theta**2, rel=1e-12)
    assert rotation.cost() == pytest.approx(0.0, abs=1e-20)


def test_arap_rotation_cost_hand_computed():
    graph = two_control_graph(30.0)
    phi = 0.4
    warps = graph.warps.copy()
    warps[1, :4] = quat_from_axis_angle(np.array([0.0, 0.0, phi]))
    graph = graph.with_warps(warps)
    weights = EnergyWeights(rotation_weight=100.0)
    _, _, rotation = arap_residuals(graph, np.ones(2), weights)
    expected = 100.0 * (2.0 - 2.0 * np.cos(phi / 2.0))
    assert rotation.cost() == pytest.approx(expected, rel=1e-12)


def test_arap_invariant_under_global_rigid_motion():
    weights = EnergyWeights()
    for seed in range(50):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 9))
        pts = rng.uniform(-60.0, 60.0, size=(m, 3))
        edges, edge_w = build_connections(pts, sigma=80.0)
        if edges.shape[0] == 0:
            continue
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = quat_to_matrix(quat_from_axis_angle(axis * rng.uniform(0, np.pi)))
        t = rng.uniform(-500.0, 500.0, size=3)
        rigid = dq_from_transform(R, t)
        graph = ControlGraph(
            points=pts,
            warps=np.tile(rigid, (m, 1)),
            edges=edges,
            edge_weights=edge_w,
            sampling_radius=30.0,
        )
        blocks = arap_residuals(graph, rng.uniform(0.5, 20.0, size=m), weights)
        cost = sum(b.cost() for b in blocks)
        assert cost < 1e-12


def test_arap_jacobians_match_finite_differences():
    template, graph, rng = random_scene(seed=7, m=5)
    weights = EnergyWeights()
    wa = rng.uniform(0.5, 3.0, size=5)
    for pick in range(3):

        def build(warps, jacobian, pick=pick):
            return arap_residuals(
                graph, wa, weights, warps=warps, jacobian=jacobian
            )[pick]

        fd_check(build, graph)


def test_angle_rows_guard_degenerate_directions():
    # both controls at the same location: zero rest direction
    graph = two_control_graph(0.0)
    weights = EnergyWeights()
    length, angle, rotation = arap_residuals(graph, np.ones(2), weights)
    assert np.all(np.isfinite(angle.values))
    np.testing.assert_array_equal(angle.values, 0.0)
    np.testing.assert_array_equal(angle.jacobian, 0.0)

    # deformed gap collapses: control 1 translated onto control 0
    graph = two_control_graph(30.0)
    warps = graph.warps.copy()
    warps[1, 5] = -0.5 * 30.0
    graph = graph.with_warps(warps)
    length, angle, rotation = arap_residuals(graph, np.ones(2), weights)
    assert np.all(np.isfinite(angle.values))
    assert np.all(np.isfinite(angle.jacobian))
    np.testing.assert_array_equal(angle.values, 0.0)


def test_angle_rows_antipodal_keeps_value_zeroes_gradient():
    graph = two_control_graph(30.0)
    warps = graph.warps.copy()
    warps[1, 5] = -0.5 * 60.0  # p1 lands at -30 on the x axis
    graph = graph.with_warps(warps)
    length, angle, rotation = arap_residuals(graph, np.ones(2), EnergyWeights())
    np.testing.assert_allclose(angle.values, np.pi)
    np.testing.assert_array_equal(angle.jacobian, 0.0)
    assert np.all(np.isfinite(angle.jacobian))


def test_tukey_cutoff_removes_row_influence():
    template, graph, rng = random_scene(seed=8)
    corr = synthetic_correspondences(template, graph, rng, miss=0.0)
    corr.points[4] += 500.0  # residual far beyond the cutoff
    weights = EnergyWeights(tukey_scale=10.0)
    blocks = icp_residuals(template, graph, corr, weights)
    k = template.bind_indices.shape[1]
    rows = slice(4 * k, 5 * k)
    np.testing.assert_array_equal(blocks.sqrt_weights[rows], 0.0)
    np.testing.assert_array_equal(blocks.support[rows], 0.0)
    np.testing.assert_array_equal(blocks.jacobian[rows], 0.0)
    assert blocks.weighted_values[rows] == pytest.approx(np.zeros(k))


def test_frozen_robust_sqrt_overrides_tukey():
    template, graph, rng = random_scene(seed=9)
    corr = synthetic_correspondences(template, graph, rng, miss=0.0)
    weights = EnergyWeights(tukey_scale=1e-6)  # would zero almost everything
    frozen = np.ones(int(np.count_nonzero(corr.valid)))
    blocks = icp_residuals(template, graph, corr, weights, robust_sqrt=frozen)
    warped, _ = warp_all(template, graph)
    r = np.sum(corr.normals * (warped - corr.points), axis=1)
    assert blocks.cost() == pytest.approx(np.sum(r * r), rel=1e-12)


def test_balance_weights_floor_and_proportionality():
    weights = EnergyWeights(arap_weight=2.0, data_floor=1.5)
    icp = ResidualBlocks(
        term="icp",
        ctrl=np.array([0, 0, 2], dtype=np.int64),
        values=np.zeros(3),
        sqrt_weights=np.zeros(3),
        support=np.array([0.5, 0.75, 4.0]),
    )
    feat = ResidualBlocks(
        term="feature",
        ctrl=np.array([2], dtype=np.int64),
        values=np.zeros(1),
        sqrt_weights=np.zeros(1),
        support=np.array([2.0]),
    )
    out = balance_arap_weight([icp, feat], weights, n_controls=4)
    # control 0: 1.25 below floor 1.5; control 2: 6.0; rest floored
    np.testing.assert_allclose(out, [3.0, 3.0, 12.0, 3.0])
    # doubling the support doubles the weight above the floor
    icp.support = icp.support * 2.0
    feat.support = feat.support * 2.0
    out2 = balance_arap_weight([icp, feat], weights, n_controls=4)
    assert out2[2] == pytest.approx(2.0 * out[2])


def test_empty_inputs_give_empty_blocks():
    template, graph, rng = random_scene(seed=10)
    corr = synthetic_correspondences(template, graph, rng)
    corr.valid[:] = False
    weights = EnergyWeights()
    blocks = icp_residuals(template, graph, corr, weights)
    assert blocks.values.shape == (0,)
    assert blocks.cost() == 0.0
    matches = MatchSet(
        template_points=template.points[:3],
        observed_points=template.points[:3],
        weights=np.zeros(3),
        preselected=np.zeros(3, dtype=bool),
    )
    fblocks = feature_residuals(
        graph, matches, template.bind_indices[:3], template.bind_weights[:3], weights
    )
    assert fblocks.values.shape == (0,)


def test_total_cost_report_split_and_dict():
    template, graph, rng = random_scene(seed=12)
    corr = synthetic_correspondences(template, graph, rng)
    weights = EnergyWeights()
    icp = icp_residuals(template, graph, corr, weights)
    wa = balance_arap_weight([icp], weights, len(graph.points))
    arap = arap_residuals(graph, wa, weights)
    report = total_cost([icp, *arap])
    assert report.icp_cost == pytest.approx(icp.cost())
    assert report.arap_cost == pytest.approx(sum(b.cost() for b in arap))
    assert report.total_cost == pytest.approx(report.icp_cost + report.arap_cost)
    d = report.to_dict()
    assert "timings" not in d
    assert d["energy"]["total"] == report.total_cost
    assert EnergyReport(timings={"x": 1.0}).to_dict() == EnergyReport().to_dict()
