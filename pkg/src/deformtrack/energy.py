"""Residual construction for the deformation energy.

The total cost is a robust least-squares sum over three term families:

* point-to-plane depth residuals (signed distance along the observed
  normal, Tukey-weighted),
* sparse feature-match residuals (3-vector gap between the warped
  reference point and its observed position),
* local rigidity residuals over the control-connection graph: length
  preservation, bending angle, and rotation consistency of neighboring
  warps.

Every residual is emitted as scalar rows tagged with the control point
whose local parameters it differentiates against, so the solver can bin
rows per control and update each warp independently. A row's weighted
value is ``sqrt_weights * values``; the cost of a block is the sum of
squared weighted values, and the row layout guarantees that summing the
costs of all blocks reproduces the underlying energy exactly (binding
weights form a partition of unity, and connection rows are duplicated
into both endpoint bins at half weight).

Jacobian rows differentiate the weighted value with respect to a 6-vector
local increment (rotation vector, translation) composed on the left of the
bin's control warp, holding every other warp and all robust weights fixed.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .correspond import CorrespondenceSet
from .geometry import cross3, dq_apply_batch, dq_to_transform_batch
from .matching import MatchSet
from .warpfield import ControlGraph, Template, blend_bound_warps

PARAM_DIM = 6

# Angle residuals are skipped (zero value and gradient) when a direction
# vector is shorter than this, and when the directions are collinear within
# ~1e-7 rad: acos rounding otherwise leaves O(1e-8) noise that would break
# exact rigid-motion invariance of the rigidity term.
ANGLE_MIN_NORM = 1e-6
ANGLE_COLLINEAR_EPS = 1e-14


@dataclass
class EnergyWeights:
    """Term weights and robust scales for the total energy."""

    feature_weight: float = 10.0  # sparse-match term multiplier
    arap_weight: float = 1.0  # rigidity base multiplier
    angle_weight: float = 20.0  # bending-angle multiplier inside rigidity
    rotation_weight: float = 100.0  # warp-consistency multiplier inside rigidity
    tukey_scale: float = 10.0  # mm, cutoff of the Tukey biweight
    data_floor: float = 1.0  # minimum per-control data weight for balancing

    def __post_init__(self) -> None:
        if self.tukey_scale <= 0.0:
            raise ValueError("tukey_scale must be positive")
        if min(self.feature_weight, self.arap_weight, self.angle_weight,
               self.rotation_weight, self.data_floor) < 0.0:
            raise ValueError("energy weights must be non-negative")


@dataclass
class ResidualBlocks:
    """Scalar residual rows binned by control point.

    values are the raw residuals; sqrt_weights the multiplicative square
    root weights (term, robust, attribution); jacobian rows differentiate
    the *weighted* value. support carries each row's contribution to the
    data-weight balance (zero for rigidity rows). row_group > 1 promises
    that every run of that many consecutive rows shares one control, which
    lets the solver fold their normal-equation products per run.
    """

    term: str
    ctrl: np.ndarray  # (rows,) int64
    values: np.ndarray  # (rows,)
    sqrt_weights: np.ndarray  # (rows,)
    jacobian: np.ndarray | None = None  # (rows, 6), d(weighted value)/d xi
    support: np.ndarray | None = None  # (rows,)
    row_group: int = 1

    @classmethod
    def empty(cls, term: str, jacobian: bool) -> "ResidualBlocks":
        return cls(
            term=term,
            ctrl=np.zeros(0, dtype=np.int64),
            values=np.zeros(0),
            sqrt_weights=np.zeros(0),
            jacobian=np.zeros((0, PARAM_DIM)) if jacobian else None,
            support=np.zeros(0),
        )

    @property
    def weighted_values(self) -> np.ndarray:
        return self.sqrt_weights * self.values

    def cost(self) -> float:
        return float(np.sum(self.weighted_values**2))


@dataclass
class EnergyReport:
    """Per-frame energy and solver diagnostics.

    ``timings`` is wall-clock bookkeeping and deliberately excluded from
    :meth:`to_dict` so serialized reports stay bit-reproducible.
    """

    frame_id: int = 0
    icp_cost: float = 0.0
    feature_cost: float = 0.0
    arap_cost: float = 0.0
    total_cost: float = 0.0
    n_correspondences: int = 0
    n_matches: int = 0
    n_preselected: int = 0
    match_weight_sum: float = 0.0
    match_support: float = 0.0
    outer_iterations: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    stalled: bool = False
    converged: bool = False
    final_step_norm: float = 0.0
    # accepted steps as [cost before, cost after] pairs under frozen weights
    cost_history: list[list[float]] = field(default_factory=list)
    # per outer iteration: [min, max] damping across the control points
    lambda_history: list[list[float]] = field(default_factory=list)
    control_data_weights: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        out = {
            "frame_id": self.frame_id,
            "energy": {
                "icp": self.icp_cost,
                "feature": self.feature_cost,
                "arap": self.arap_cost,
                "total": self.total_cost,
            },
            "counts": {
                "correspondences": self.n_correspondences,
                "matches": self.n_matches,
                "preselected": self.n_preselected,
            },
            "match_weight_sum": self.match_weight_sum,
            "match_support": self.match_support,
            "solver": {
                "outer_iterations": self.outer_iterations,
                "accepted_steps": self.accepted_steps,
                "rejected_steps": self.rejected_steps,
                "stalled": self.stalled,
                "converged": self.converged,
                "final_step_norm": self.final_step_norm,
                "cost_history": list(self.cost_history),
                "lambda_history": list(self.lambda_history),
            },
            "control_data_weights": list(self.control_data_weights),
            "warnings": list(self.warnings),
        }
        return out


def tukey_weight(residuals: np.ndarray, scale: float) -> np.ndarray:
    """Tukey biweight: (1 - (r/c)^2)^2 inside |r| < c, zero outside."""
    r = np.asarray(residuals, dtype=np.float64)
    u = r / scale
    w = (1.0 - u * u) ** 2
    return np.where(np.abs(u) < 1.0, w, 0.0)


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices [v]_x, shape (..., 3, 3)."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def _pure_left_mul(q: np.ndarray) -> np.ndarray:
    """Matrices M with M[:, a] = e_a * q (pure-imaginary left product).

    Shape (..., 4, 3); used for derivatives of quaternion products with
    respect to a rotation-vector increment.
    """
    w, u = q[..., 0], q[..., 1:]
    out = np.zeros(q.shape[:-1] + (4, 3))
    out[..., 0, :] = -u
    out[..., 1:, :] = w[..., None, None] * np.eye(3) - _skew(u)
    return out


def warp_increment_basis(warps: np.ndarray) -> np.ndarray:
    """d(increment * warp)/d(increment params) at the identity increment.

    For each warp W returns K of shape (8, 6): column a < 3 is the
    derivative along rotation axis a, column 3 + a along translation axis
    a, of the 8 components of ``exp(xi) * W``.
    """
    warps = np.asarray(warps, dtype=np.float64)
    real, dual = warps[..., :4], warps[..., 4:]
    K = np.zeros(warps.shape[:-1] + (8, PARAM_DIM))
    mp_real = 0.5 * _pure_left_mul(real)
    K[..., 0:4, 0:3] = mp_real
    K[..., 4:8, 0:3] = 0.5 * _pure_left_mul(dual)
    K[..., 4:8, 3:6] = mp_real
    return K


def blend_apply_jacobian(blended: np.ndarray, points: np.ndarray) -> np.ndarray:
    """d(apply(normalize(B), p))/dB for blended warp sums B, shape (n, 3, 8).

    The normalized action equals ``(q p q* + 2 vec(d q*)) / |q|^2`` for
    B = (q, d), which the quotient rule differentiates directly; the
    orthogonalization half of the normalization never reaches the applied
    point.
    """
    B = np.asarray(blended, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    q, d = B[..., :4], B[..., 4:]
    qw, qu = q[..., 0], q[..., 1:]
    dw, du = d[..., 0], d[..., 1:]
    s2 = np.sum(q * q, axis=-1)
    eye = np.eye(3)

    qu_dot_p = np.sum(qu * p, axis=-1)
    f_rot = (
        (qw**2 - np.sum(qu * qu, axis=-1))[..., None] * p
        + 2.0 * qu_dot_p[..., None] * qu
        + 2.0 * qw[..., None] * cross3(qu, p)
    )
    f_tr = 2.0 * (qw[..., None] * du - dw[..., None] * qu - cross3(du, qu))
    x = (f_rot + f_tr) / s2[..., None]

    dF_dqw = 2.0 * qw[..., None] * p + 2.0 * cross3(qu, p) + 2.0 * du
    dF_dqu = (
        -2.0 * p[..., :, None] * qu[..., None, :]
        + 2.0 * qu[..., :, None] * p[..., None, :]
        + 2.0 * qu_dot_p[..., None, None] * eye
        - 2.0 * qw[..., None, None] * _skew(p)
        - 2.0 * dw[..., None, None] * eye
        - 2.0 * _skew(du)
    )
    dF_ddw = -2.0 * qu
    dF_ddu = 2.0 * qw[..., None, None] * eye + 2.0 * _skew(qu)

    G = np.zeros(B.shape[:-1] + (3, 8))
    G[..., :, 0] = (dF_dqw - 2.0 * x * qw[..., None]) / s2[..., None]
    G[..., :, 1:4] = (
        dF_dqu - 2.0 * x[..., :, None] * qu[..., None, :]
    ) / s2[..., None, None]
    G[..., :, 4] = dF_ddw / s2[..., None]
    G[..., :, 5:8] = dF_ddu / s2[..., None, None]
    return G


def _blend_rows_jacobian(
    gradient_rows: np.ndarray,  # (n, c, 8): residual gradient w.r.t. B
    bind_indices: np.ndarray,  # (n, k)
    bind_weights: np.ndarray,  # (n, k)
    signs: np.ndarray,  # (n, k)
    basis: np.ndarray,  # (m, 8, 6)
) -> np.ndarray:
    """Chain per-point blend gradients to per-slot control increments.

    Returns (n, k, c, 6): the derivative of each of the c residual
    components with respect to the 6 parameters of each bound control.
    """
    gathered = basis[bind_indices]  # (n, k, 8, 6)
    coef = bind_weights * signs  # (n, k)
    J = np.einsum("nce,nkef->nkcf", gradient_rows, gathered)
    return coef[..., None, None] * J


def icp_residuals(
    template: Template,
    graph: ControlGraph,
    corr: CorrespondenceSet,
    weights: EnergyWeights,
    *,
    warps: np.ndarray | None = None,
    jacobian: bool = True,
    robust_sqrt: np.ndarray | None = None,
    subset: slice | None = None,
) -> ResidualBlocks:
    """Point-to-plane rows: observed-normal dot (warped point - observed).

    Each valid correspondence contributes one row per bound control,
    scaled by sqrt(tukey * binding weight); the Tukey weight is computed
    from the residual at the current warps unless ``robust_sqrt`` (one
    entry per valid correspondence) pins it, which the solver uses to keep
    weights frozen across a tentative step. ``subset`` restricts the build
    to a slice of the valid correspondences (rows are local to their
    correspondence, so chunked builds concatenate to the full one).
    """
    if warps is None:
        warps = graph.warps
    vi = np.flatnonzero(corr.valid)
    if subset is not None:
        vi = vi[subset]
        if robust_sqrt is not None:
            robust_sqrt = robust_sqrt[subset]
    if vi.size == 0 or not template.is_bound:
        return ResidualBlocks.empty("icp", jacobian)
    idx = template.bind_indices[vi]
    alpha = template.bind_weights[vi]
    blended, signs = blend_bound_warps(warps, idx, alpha, return_signs=True)
    x = dq_apply_batch(blended, template.points[vi])
    n_obs = corr.normals[vi]
    r = np.sum(n_obs * (x - corr.points[vi]), axis=1)
    if robust_sqrt is None:
        robust_sqrt = np.sqrt(tukey_weight(r, weights.tukey_scale))
    k = idx.shape[1]
    sqrt_w = robust_sqrt[:, None] * np.sqrt(alpha)
    support = (robust_sqrt**2)[:, None] * alpha
    jac = None
    if jacobian:
        G = blend_apply_jacobian(blended, template.points[vi])
        gn = np.einsum("nc,nce->ne", n_obs, G)  # gradient of r w.r.t. B
        J = _blend_rows_jacobian(gn[:, None, :], idx, alpha, signs, warp_increment_basis(warps))
        jac = (sqrt_w[..., None] * J[:, :, 0, :]).reshape(-1, PARAM_DIM)
    return ResidualBlocks(
        term="icp",
        ctrl=idx.reshape(-1),
        values=np.repeat(r, k),
        sqrt_weights=sqrt_w.reshape(-1),
        jacobian=jac,
        support=support.reshape(-1),
    )


def feature_residuals(
    graph: ControlGraph,
    matches: MatchSet,
    bind_indices: np.ndarray,
    bind_weights: np.ndarray,
    weights: EnergyWeights,
    *,
    warps: np.ndarray | None = None,
    jacobian: bool = True,
    subset: slice | None = None,
) -> ResidualBlocks:
    """Sparse-match rows: 3-vector gap between warped and observed points.

    Rows are scaled by sqrt(feature_weight * match weight * binding
    weight); matches with zero weight are dropped entirely. ``subset``
    restricts the build to a slice of the active matches.
    """
    if warps is None:
        warps = graph.warps
    active = np.flatnonzero(matches.weights > 0.0)
    if subset is not None:
        active = active[subset]
    if active.size == 0:
        return ResidualBlocks.empty("feature", jacobian)
    idx = bind_indices[active]
    alpha = bind_weights[active]
    wk = matches.weights[active]
    blended, signs = blend_bound_warps(warps, idx, alpha, return_signs=True)
    x = dq_apply_batch(blended, matches.template_points[active])
    res = x - matches.observed_points[active]  # (a, 3)
    a, k = idx.shape
    w_pair = weights.feature_weight * wk[:, None] * alpha  # (a, k)
    sqrt_w = np.sqrt(w_pair)
    values = np.broadcast_to(res[:, None, :], (a, k, 3))
    jac = None
    if jacobian:
        G = blend_apply_jacobian(blended, matches.template_points[active])
        J = _blend_rows_jacobian(G, idx, alpha, signs, warp_increment_basis(warps))
        jac = (sqrt_w[..., None, None] * J).reshape(-1, PARAM_DIM)
    return ResidualBlocks(
        term="feature",
        ctrl=np.repeat(idx.reshape(-1), 3),
        values=values.reshape(-1),
        sqrt_weights=np.repeat(sqrt_w.reshape(-1), 3),
        jacobian=jac,
        support=np.repeat((w_pair / 3.0).reshape(-1), 3),
        row_group=3,
    )


def arap_weight_from_support(
    support: np.ndarray, weights: EnergyWeights
) -> np.ndarray:
    """Rigidity weight from per-control data support sums.

    Controls with little or no data support bottom out at
    ``data_floor * arap_weight`` so they stay coupled to their neighbors.
    """
    return weights.arap_weight * np.maximum(support, weights.data_floor)


def balance_arap_weight(
    data_blocks: "Sequence[ResidualBlocks]",
    weights: EnergyWeights,
    n_controls: int,
) -> np.ndarray:
    """Per-control rigidity weight proportional to the data weight sum.

    ``data_blocks`` are the depth and feature blocks (their support fields
    carry the robust and term weights).
    """
    data = np.zeros(n_controls)
    for blocks in data_blocks:
        if blocks.support is not None and blocks.ctrl.size:
            data += np.bincount(blocks.ctrl, weights=blocks.support, minlength=n_controls)
    return arap_weight_from_support(data, weights)


def arap_residuals(
    graph: ControlGraph,
    arap_weights: np.ndarray,
    weights: EnergyWeights,
    *,
    warps: np.ndarray | None = None,
    jacobian: bool = True,
    subset: slice | None = None,
) -> tuple[ResidualBlocks, ResidualBlocks, ResidualBlocks]:
    """Rigidity rows over the connection graph: length, angle, rotation.

    Per connection (i, j) with Gaussian weight w and mean per-control
    rigidity weight wa:

    * length: |p_j - p_i| - rest length, weight w * wa;
    * angle: angle between (W_i applied to j's rest position minus p_i)
      and (p_j - p_i), emitted for both directions, each weighted
      w * wa * angle_weight;
    * rotation: 4-vector difference of hemisphere-aligned real quaternion
      parts, weight w * wa * rotation_weight (squared sum equals the
      squared-norm form).

    Every row appears twice, once per endpoint bin, at half weight, so the
    summed cost equals the undirected connection energy exactly.
    """
    if warps is None:
        warps = graph.warps
    edges = graph.edges if subset is None else graph.edges[subset]
    edge_weights = graph.edge_weights if subset is None else graph.edge_weights[subset]
    e = edges.shape[0]
    if e == 0:
        empty = ResidualBlocks.empty
        return (
            empty("arap_length", jacobian),
            empty("arap_angle", jacobian),
            empty("arap_rotation", jacobian),
        )
    i0 = edges[:, 0]
    i1 = edges[:, 1]
    P = graph.points
    wa_edge = 0.5 * (np.asarray(arap_weights)[i0] + np.asarray(arap_weights)[i1])
    base = edge_weights * wa_edge  # (e,)

    # each warp is applied to several points, so convert once and gather
    R, t = dq_to_transform_batch(warps)
    own = np.einsum("mij,mj->mi", R, P) + t
    p0t = own[i0]
    p1t = own[i1]

    length = _length_rows(i0, i1, P, p0t, p1t, base, jacobian)
    c01 = np.einsum("eij,ej->ei", R[i0], P[i1]) + t[i0]
    c10 = np.einsum("eij,ej->ei", R[i1], P[i0]) + t[i1]
    ang01 = _angle_rows(i0, i1, c01, p0t, p1t, base * weights.angle_weight, jacobian)
    ang10 = _angle_rows(i1, i0, c10, p1t, p0t, base * weights.angle_weight, jacobian)
    angle = _concat_blocks("arap_angle", [ang01, ang10])
    rotation = _rotation_rows(
        i0, i1, warps[i0], warps[i1], base * weights.rotation_weight, jacobian
    )
    return length, angle, rotation


def _length_rows(i0, i1, P, p0t, p1t, base, jacobian) -> ResidualBlocks:
    rest = np.linalg.norm(P[i1] - P[i0], axis=1)
    b = p1t - p0t
    ln = np.linalg.norm(b, axis=1)
    val = ln - rest
    sqrt_w = np.sqrt(0.5 * base)
    ctrl = np.concatenate([i0, i1])
    values = np.concatenate([val, val])
    sw = np.concatenate([sqrt_w, sqrt_w])
    jac = None
    if jacobian:
        safe = ln > 1e-9
        bhat = np.where(safe[:, None], b / np.where(safe, ln, 1.0)[:, None], 0.0)
        # bin i0: gradient of |b| w.r.t. p0t is -bhat (rotation part via x cross g)
        j0 = np.concatenate([cross3(p0t, -bhat), -bhat], axis=1)
        j1 = np.concatenate([cross3(p1t, bhat), bhat], axis=1)
        jac = sw[:, None] * np.concatenate([j0, j1], axis=0)
    return ResidualBlocks("arap_length", ctrl.astype(np.int64), values, sw, jac, None)


def _angle_rows(ia, ib, cross_pt, pat, pbt, base, jacobian) -> ResidualBlocks:
    """Angle rows for direction a -> b.

    cross_pt is control a's warp applied to b's rest position; pat/pbt the
    endpoint positions under their own warps.
    """
    a_vec = cross_pt - pat
    b_vec = pbt - pat
    na = np.linalg.norm(a_vec, axis=1)
    nb = np.linalg.norm(b_vec, axis=1)
    ok = (na > ANGLE_MIN_NORM) & (nb > ANGLE_MIN_NORM)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    ahat = a_vec / na_s[:, None]
    bhat = b_vec / nb_s[:, None]
    c = np.clip(np.sum(ahat * bhat, axis=1), -1.0, 1.0)
    near_zero = (1.0 - c) < ANGLE_COLLINEAR_EPS
    near_pi = (1.0 + c) < ANGLE_COLLINEAR_EPS
    val = np.where(ok & ~near_zero, np.arccos(c), 0.0)

    sqrt_w = np.sqrt(0.5 * base)
    ctrl = np.concatenate([ia, ib])
    values = np.concatenate([val, val])
    sw = np.concatenate([sqrt_w, sqrt_w])
    jac = None
    if jacobian:
        grad_ok = ok & ~near_zero & ~near_pi
        inv_sin = np.where(grad_ok, -1.0 / np.sqrt(np.maximum(1.0 - c * c, 1e-300)), 0.0)
        ga = inv_sin[:, None] * (bhat - c[:, None] * ahat) / na_s[:, None]
        gb = inv_sin[:, None] * (ahat - c[:, None] * bhat) / nb_s[:, None]
        # bin a: a_vec rotates rigidly with W_a; b_vec loses p_at
        ja_omega = cross3(a_vec, ga) - cross3(pat, gb)
        ja = np.concatenate([ja_omega, -gb], axis=1)
        jb = np.concatenate([cross3(pbt, gb), gb], axis=1)
        jac = sw[:, None] * np.concatenate([ja, jb], axis=0)
    return ResidualBlocks("arap_angle", ctrl.astype(np.int64), values, sw, jac, None)


def _rotation_rows(i0, i1, W0, W1, base, jacobian) -> ResidualBlocks:
    q0, q1 = W0[:, :4], W1[:, :4]
    sign = np.where(np.sum(q0 * q1, axis=1) < 0.0, -1.0, 1.0)
    delta = q0 - sign[:, None] * q1  # (e, 4)
    e = q0.shape[0]
    sqrt_w = np.repeat(np.sqrt(0.5 * base), 4)
    ctrl = np.concatenate([np.repeat(i0, 4), np.repeat(i1, 4)])
    values = np.concatenate([delta.reshape(-1), delta.reshape(-1)])
    sw = np.concatenate([sqrt_w, sqrt_w])
    jac = None
    if jacobian:
        j0 = np.zeros((e, 4, PARAM_DIM))
        j1 = np.zeros((e, 4, PARAM_DIM))
        j0[:, :, 0:3] = 0.5 * _pure_left_mul(q0)
        j1[:, :, 0:3] = -sign[:, None, None] * 0.5 * _pure_left_mul(q1)
        jac = sw[:, None] * np.concatenate(
            [j0.reshape(-1, PARAM_DIM), j1.reshape(-1, PARAM_DIM)], axis=0
        )
    return ResidualBlocks(
        "arap_rotation", ctrl.astype(np.int64), values, sw, jac, None, row_group=4
    )


def _concat_blocks(term: str, blocks: list[ResidualBlocks]) -> ResidualBlocks:
    jac = None
    if all(b.jacobian is not None for b in blocks):
        jac = np.concatenate([b.jacobian for b in blocks], axis=0)
    return ResidualBlocks(
        term=term,
        ctrl=np.concatenate([b.ctrl for b in blocks]),
        values=np.concatenate([b.values for b in blocks]),
        sqrt_weights=np.concatenate([b.sqrt_weights for b in blocks]),
        jacobian=jac,
        support=None,
    )


def total_cost(blocks: list[ResidualBlocks]) -> EnergyReport:
    """Sum block costs into a report (icp / feature / arap split)."""
    report = EnergyReport()
    for b in blocks:
        c = b.cost()
        if b.term == "icp":
            report.icp_cost += c
        elif b.term == "feature":
            report.feature_cost += c
        else:
            report.arap_cost += c
    report.total_cost = report.icp_cost + report.feature_cost + report.arap_cost
    return report
