"""Compiled inner loops for the frame solver.

These kernels mirror the residual builders in :mod:`deformtrack.energy`
row for row (tests/test_kernels.py pins the two against each other). They
exist because the solver evaluates the same rows dozens of times per
frame, and at that granularity the numpy builders spend more time in
dispatch than in arithmetic.

Each kernel carves its row range into ``n_chunks`` contiguous chunks,
accumulates every chunk into a private slab, and folds the slabs in chunk
order afterwards, so results are bitwise identical for any worker-pool
size. fastmath stays off: IEEE evaluation order is part of the
determinism contract.

Outputs are per-control reductions:

* ``partial`` (m, 27): 21 upper-triangle entries of sum J^T J followed by
  the 6 entries of sum J^T (weighted value), both over the rows binned to
  that control;
* ``support`` (m,): data-balance contributions (depth and feature only);
* ``cost`` (m,): sum of squared weighted values.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from numba import njit, prange

from .energy import ANGLE_COLLINEAR_EPS, ANGLE_MIN_NORM

# harmless on hosts whose TBB predates the parallel backend; numba falls
# back to its other threading layers
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB")

N_COLS = 27


@njit(cache=True, inline="always")
def _triu_col(i, j):
    # flat index of (i, j), i <= j, in row-major upper-triangle order
    return 6 * i - i * (i + 1) // 2 + j


@njit(cache=True, inline="always")
def _fold_row(partial, ci, J, wv):
    # one scalar row: rank-1 update of the control's normal equations
    for i in range(6):
        for j in range(i, 6):
            partial[ci, _triu_col(i, j)] += J[i] * J[j]
        partial[ci, 21 + i] += J[i] * wv

@njit(cache=True, inline="always")
def _blend_at(warps, bind_idx, alpha, c, B, sgn):
    # sign-aligned weighted warp sum for row c; fills B (8,) and sgn (k,)
    k = bind_idx.shape[1]
    i0 = bind_idx[c, 0]
    rw = warps[i0, 0]
    rx = warps[i0, 1]
    ry = warps[i0, 2]
    rz = warps[i0, 3]
    for e in range(8):
        B[e] = 0.0
    for s in range(k):
        ci = bind_idx[c, s]
        dot = (
            warps[ci, 0] * rw
            + warps[ci, 1] * rx
            + warps[ci, 2] * ry
            + warps[ci, 3] * rz
        )
        sg = -1.0 if dot < 0.0 else 1.0
        sgn[s] = sg
        coef = alpha[c, s] * sg
        for e in range(8):
            B[e] += coef * warps[ci, e]


@njit(cache=True, inline="always")
def _apply_blend(B, px, py, pz):
    # normalized dual-quaternion action of the (unnormalized) sum B
    qw, qx, qy, qz = B[0], B[1], B[2], B[3]
    dw, dx, dy, dz = B[4], B[5], B[6], B[7]
    s2 = qw * qw + qx * qx + qy * qy + qz * qz
    uu = qx * qx + qy * qy + qz * qz
    qup = qx * px + qy * py + qz * pz
    cx = qy * pz - qz * py
    cy = qz * px - qx * pz
    cz = qx * py - qy * px
    tx = dy * qz - dz * qy
    ty = dz * qx - dx * qz
    tz = dx * qy - dy * qx
    x0 = ((qw * qw - uu) * px + 2.0 * qup * qx + 2.0 * qw * cx
          + 2.0 * (qw * dx - dw * qx - tx)) / s2
    x1 = ((qw * qw - uu) * py + 2.0 * qup * qy + 2.0 * qw * cy
          + 2.0 * (qw * dy - dw * qy - ty)) / s2
    x2 = ((qw * qw - uu) * pz + 2.0 * qup * qz + 2.0 * qw * cz
          + 2.0 * (qw * dz - dw * qz - tz)) / s2
    return x0, x1, x2, s2


@njit(cache=True, inline="always")
def _blend_gradient(B, px, py, pz, x0, x1, x2, s2, G):
    # d(action)/dB via the quotient rule; fills G (3, 8)
    qw, qx, qy, qz = B[0], B[1], B[2], B[3]
    dw, dx, dy, dz = B[4], B[5], B[6], B[7]
    qup = qx * px + qy * py + qz * pz
    G[0, 0] = (2.0 * qw * px + 2.0 * (qy * pz - qz * py) + 2.0 * dx
               - 2.0 * x0 * qw) / s2
    G[1, 0] = (2.0 * qw * py + 2.0 * (qz * px - qx * pz) + 2.0 * dy
               - 2.0 * x1 * qw) / s2
    G[2, 0] = (2.0 * qw * pz + 2.0 * (qx * py - qy * px) + 2.0 * dz
               - 2.0 * x2 * qw) / s2
    G[0, 1] = (-2.0 * px * qx + 2.0 * qx * px + 2.0 * qup - 2.0 * dw
               - 2.0 * x0 * qx) / s2
    G[1, 1] = (-2.0 * py * qx + 2.0 * qy * px - 2.0 * qw * pz - 2.0 * dz
               - 2.0 * x1 * qx) / s2
    G[2, 1] = (-2.0 * pz * qx + 2.0 * qz * px + 2.0 * qw * py + 2.0 * dy
               - 2.0 * x2 * qx) / s2
    G[0, 2] = (-2.0 * px * qy + 2.0 * qx * py + 2.0 * qw * pz + 2.0 * dz
               - 2.0 * x0 * qy) / s2
    G[1, 2] = (-2.0 * py * qy + 2.0 * qy * py + 2.0 * qup - 2.0 * dw
               - 2.0 * x1 * qy) / s2
    G[2, 2] = (-2.0 * pz * qy + 2.0 * qz * py - 2.0 * qw * px - 2.0 * dx
               - 2.0 * x2 * qy) / s2
    G[0, 3] = (-2.0 * px * qz + 2.0 * qx * pz - 2.0 * qw * py - 2.0 * dy
               - 2.0 * x0 * qz) / s2
    G[1, 3] = (-2.0 * py * qz + 2.0 * qy * pz + 2.0 * qw * px + 2.0 * dx
               - 2.0 * x1 * qz) / s2
    G[2, 3] = (-2.0 * pz * qz + 2.0 * qz * pz + 2.0 * qup - 2.0 * dw
               - 2.0 * x2 * qz) / s2
    G[0, 4] = -2.0 * qx / s2
    G[1, 4] = -2.0 * qy / s2
    G[2, 4] = -2.0 * qz / s2
    G[0, 5] = 2.0 * qw / s2
    G[1, 5] = 2.0 * qz / s2
    G[2, 5] = -2.0 * qy / s2
    G[0, 6] = -2.0 * qz / s2
    G[1, 6] = 2.0 * qw / s2
    G[2, 6] = 2.0 * qx / s2
    G[0, 7] = 2.0 * qy / s2
    G[1, 7] = -2.0 * qx / s2
    G[2, 7] = 2.0 * qw / s2


@njit(cache=True, parallel=True)
def icp_reduce(points, obs_normals, obs_points, bind_idx, alpha, warps,
               basis, tukey_scale, frozen, use_frozen, want_jac,
               n_chunks, m):
    """Point-to-plane rows reduced per control.

    Returns (partial, support, cost, r) with r the raw signed distances
    (one per correspondence), used by the caller to freeze robust weights.
    When ``use_frozen`` is set the per-row robust factors come from
    ``frozen`` instead of the Tukey weight at the current residual.
    """
    n = points.shape[0]
    k = bind_idx.shape[1]
    partial = np.zeros((n_chunks, m, N_COLS))
    support = np.zeros((n_chunks, m))
    cost = np.zeros((n_chunks, m))
    r_out = np.zeros(n)
    for chunk in prange(n_chunks):
        lo = n * chunk // n_chunks
        hi = n * (chunk + 1) // n_chunks
        B = np.zeros(8)
        sgn = np.zeros(k)
        G = np.zeros((3, 8))
        gn = np.zeros(8)
        J = np.zeros(6)
        for c in range(lo, hi):
            _blend_at(warps, bind_idx, alpha, c, B, sgn)
            px, py, pz = points[c, 0], points[c, 1], points[c, 2]
            x0, x1, x2, s2 = _apply_blend(B, px, py, pz)
            n0 = obs_normals[c, 0]
            n1 = obs_normals[c, 1]
            n2 = obs_normals[c, 2]
            r = (n0 * (x0 - obs_points[c, 0])
                 + n1 * (x1 - obs_points[c, 1])
                 + n2 * (x2 - obs_points[c, 2]))
            r_out[c] = r
            if use_frozen:
                rs = frozen[c]
            else:
                u = r / tukey_scale
                if abs(u) < 1.0:
                    w = 1.0 - u * u
                    rs = math.sqrt(w * w)
                else:
                    rs = 0.0
            rs2 = rs * rs
            if want_jac:
                _blend_gradient(B, px, py, pz, x0, x1, x2, s2, G)
                for e in range(8):
                    gn[e] = n0 * G[0, e] + n1 * G[1, e] + n2 * G[2, e]
            for s in range(k):
                ci = bind_idx[c, s]
                a = alpha[c, s]
                support[chunk, ci] += rs2 * a
                sw = rs * math.sqrt(a)
                wv = sw * r
                cost[chunk, ci] += wv * wv
                if want_jac:
                    coef = sw * a * sgn[s]
                    for d in range(6):
                        acc = 0.0
                        for e in range(8):
                            acc += gn[e] * basis[ci, e, d]
                        J[d] = coef * acc
                    _fold_row(partial[chunk], ci, J, wv)
    out_partial = np.zeros((m, N_COLS))
    out_support = np.zeros(m)
    out_cost = np.zeros(m)
    for chunk in range(n_chunks):
        out_partial += partial[chunk]
        out_support += support[chunk]
        out_cost += cost[chunk]
    return out_partial, out_support, out_cost, r_out

@njit(cache=True, parallel=True)
def feature_reduce(points, obs_points, match_w, bind_idx, alpha, warps,
                   basis, feature_weight, want_jac, n_chunks, m):
    """Sparse-match rows (3 components each) reduced per control."""
    n = points.shape[0]
    k = bind_idx.shape[1]
    partial = np.zeros((n_chunks, m, N_COLS))
    support = np.zeros((n_chunks, m))
    cost = np.zeros((n_chunks, m))
    for chunk in prange(n_chunks):
        lo = n * chunk // n_chunks
        hi = n * (chunk + 1) // n_chunks
        B = np.zeros(8)
        sgn = np.zeros(k)
        G = np.zeros((3, 8))
        GK = np.zeros((3, 6))
        J = np.zeros(6)
        for c in range(lo, hi):
            _blend_at(warps, bind_idx, alpha, c, B, sgn)
            px, py, pz = points[c, 0], points[c, 1], points[c, 2]
            x0, x1, x2, s2 = _apply_blend(B, px, py, pz)
            r0 = x0 - obs_points[c, 0]
            r1 = x1 - obs_points[c, 1]
            r2 = x2 - obs_points[c, 2]
            if want_jac:
                _blend_gradient(B, px, py, pz, x0, x1, x2, s2, G)
            for s in range(k):
                ci = bind_idx[c, s]
                a = alpha[c, s]
                w_pair = feature_weight * match_w[c] * a
                support[chunk, ci] += w_pair
                sw = math.sqrt(w_pair)
                wv0 = sw * r0
                wv1 = sw * r1
                wv2 = sw * r2
                cost[chunk, ci] += wv0 * wv0 + wv1 * wv1 + wv2 * wv2
                if want_jac:
                    coef = sw * a * sgn[s]
                    for comp in range(3):
                        for d in range(6):
                            acc = 0.0
                            for e in range(8):
                                acc += G[comp, e] * basis[ci, e, d]
                            GK[comp, d] = coef * acc
                    # fold the 3 component rows of this slot in one pass
                    for i in range(6):
                        for j in range(i, 6):
                            partial[chunk, ci, _triu_col(i, j)] += (
                                GK[0, i] * GK[0, j]
                                + GK[1, i] * GK[1, j]
                                + GK[2, i] * GK[2, j]
                            )
                        partial[chunk, ci, 21 + i] += (
                            GK[0, i] * wv0 + GK[1, i] * wv1 + GK[2, i] * wv2
                        )
    out_partial = np.zeros((m, N_COLS))
    out_support = np.zeros(m)
    out_cost = np.zeros(m)
    for chunk in range(n_chunks):
        out_partial += partial[chunk]
        out_support += support[chunk]
        out_cost += cost[chunk]
    return out_partial, out_support, out_cost


@njit(cache=True, inline="always")
def _angle_fold(ia, ib, ax, ay, az, bx, by, bz, patx, paty, patz,
                pbtx, pbty, pbtz, sw, partial, cost, want_jac):
    # one bending-angle row: directions a (cross-warped) and b (positions)
    # both measured from pat; bins ia (rotates with a) and ib (moves pbt)
    na = math.sqrt(ax * ax + ay * ay + az * az)
    nb = math.sqrt(bx * bx + by * by + bz * bz)
    ok = na > ANGLE_MIN_NORM and nb > ANGLE_MIN_NORM
    na_s = na if ok else 1.0
    nb_s = nb if ok else 1.0
    ahx, ahy, ahz = ax / na_s, ay / na_s, az / na_s
    bhx, bhy, bhz = bx / nb_s, by / nb_s, bz / nb_s
    cth = ahx * bhx + ahy * bhy + ahz * bhz
    if cth > 1.0:
        cth = 1.0
    elif cth < -1.0:
        cth = -1.0
    near_zero = (1.0 - cth) < ANGLE_COLLINEAR_EPS
    near_pi = (1.0 + cth) < ANGLE_COLLINEAR_EPS
    val = math.acos(cth) if (ok and not near_zero) else 0.0
    wv = sw * val
    cost[ia] += wv * wv
    cost[ib] += wv * wv
    if not want_jac:
        return
    grad_ok = ok and not near_zero and not near_pi
    if grad_ok:
        inv_sin = -1.0 / math.sqrt(max(1.0 - cth * cth, 1e-300))
    else:
        inv_sin = 0.0
    gax = inv_sin * (bhx - cth * ahx) / na_s
    gay = inv_sin * (bhy - cth * ahy) / na_s
    gaz = inv_sin * (bhz - cth * ahz) / na_s
    gbx = inv_sin * (ahx - cth * bhx) / nb_s
    gby = inv_sin * (ahy - cth * bhy) / nb_s
    gbz = inv_sin * (ahz - cth * bhz) / nb_s
    J = np.empty(6)
    # bin a: a_vec rotates rigidly with W_a; b_vec loses pat
    J[0] = sw * ((ay * gaz - az * gay) - (paty * gbz - patz * gby))
    J[1] = sw * ((az * gax - ax * gaz) - (patz * gbx - patx * gbz))
    J[2] = sw * ((ax * gay - ay * gax) - (patx * gby - paty * gbx))
    J[3] = sw * (-gbx)
    J[4] = sw * (-gby)
    J[5] = sw * (-gbz)
    _fold_row(partial, ia, J, wv)
    J[0] = sw * (pbty * gbz - pbtz * gby)
    J[1] = sw * (pbtz * gbx - pbtx * gbz)
    J[2] = sw * (pbtx * gby - pbty * gbx)
    J[3] = sw * gbx
    J[4] = sw * gby
    J[5] = sw * gbz
    _fold_row(partial, ib, J, wv)


@njit(cache=True, parallel=True)
def arap_reduce(ctrl_points, R, t, warps, edges, edge_weights, wa,
                angle_weight, rotation_weight, want_jac, n_chunks, m):
    """Rigidity rows (length, angle both ways, rotation) per connection."""
    ne = edges.shape[0]
    partial = np.zeros((n_chunks, m, N_COLS))
    cost = np.zeros((n_chunks, m))
    for chunk in prange(n_chunks):
        lo = ne * chunk // n_chunks
        hi = ne * (chunk + 1) // n_chunks
        J = np.zeros(6)
        J4 = np.zeros((4, 3))
        for ed in range(lo, hi):
            i0 = edges[ed, 0]
            i1 = edges[ed, 1]
            base = edge_weights[ed] * 0.5 * (wa[i0] + wa[i1])
            p0x, p0y, p0z = ctrl_points[i0, 0], ctrl_points[i0, 1], ctrl_points[i0, 2]
            p1x, p1y, p1z = ctrl_points[i1, 0], ctrl_points[i1, 1], ctrl_points[i1, 2]
            p0tx = R[i0, 0, 0] * p0x + R[i0, 0, 1] * p0y + R[i0, 0, 2] * p0z + t[i0, 0]
            p0ty = R[i0, 1, 0] * p0x + R[i0, 1, 1] * p0y + R[i0, 1, 2] * p0z + t[i0, 1]
            p0tz = R[i0, 2, 0] * p0x + R[i0, 2, 1] * p0y + R[i0, 2, 2] * p0z + t[i0, 2]
            p1tx = R[i1, 0, 0] * p1x + R[i1, 0, 1] * p1y + R[i1, 0, 2] * p1z + t[i1, 0]
            p1ty = R[i1, 1, 0] * p1x + R[i1, 1, 1] * p1y + R[i1, 1, 2] * p1z + t[i1, 1]
            p1tz = R[i1, 2, 0] * p1x + R[i1, 2, 1] * p1y + R[i1, 2, 2] * p1z + t[i1, 2]

            # length preservation
            rx = p1x - p0x
            ry = p1y - p0y
            rz = p1z - p0z
            rest = math.sqrt(rx * rx + ry * ry + rz * rz)
            bx = p1tx - p0tx
            by = p1ty - p0ty
            bz = p1tz - p0tz
            ln = math.sqrt(bx * bx + by * by + bz * bz)
            val = ln - rest
            sw = math.sqrt(0.5 * base)
            wv = sw * val
            cost[chunk, i0] += wv * wv
            cost[chunk, i1] += wv * wv
            if want_jac:
                if ln > 1e-9:
                    bhx, bhy, bhz = bx / ln, by / ln, bz / ln
                else:
                    bhx = bhy = bhz = 0.0
                J[0] = sw * (p0ty * (-bhz) - p0tz * (-bhy))
                J[1] = sw * (p0tz * (-bhx) - p0tx * (-bhz))
                J[2] = sw * (p0tx * (-bhy) - p0ty * (-bhx))
                J[3] = sw * (-bhx)
                J[4] = sw * (-bhy)
                J[5] = sw * (-bhz)
                _fold_row(partial[chunk], i0, J, wv)
                J[0] = sw * (p1ty * bhz - p1tz * bhy)
                J[1] = sw * (p1tz * bhx - p1tx * bhz)
                J[2] = sw * (p1tx * bhy - p1ty * bhx)
                J[3] = sw * bhx
                J[4] = sw * bhy
                J[5] = sw * bhz
                _fold_row(partial[chunk], i1, J, wv)

            # bending angle, both directions
            sw_a = math.sqrt(0.5 * base * angle_weight)
            c01x = R[i0, 0, 0] * p1x + R[i0, 0, 1] * p1y + R[i0, 0, 2] * p1z + t[i0, 0]
            c01y = R[i0, 1, 0] * p1x + R[i0, 1, 1] * p1y + R[i0, 1, 2] * p1z + t[i0, 1]
            c01z = R[i0, 2, 0] * p1x + R[i0, 2, 1] * p1y + R[i0, 2, 2] * p1z + t[i0, 2]
            _angle_fold(i0, i1,
                        c01x - p0tx, c01y - p0ty, c01z - p0tz,
                        p1tx - p0tx, p1ty - p0ty, p1tz - p0tz,
                        p0tx, p0ty, p0tz, p1tx, p1ty, p1tz,
                        sw_a, partial[chunk], cost[chunk], want_jac)
            c10x = R[i1, 0, 0] * p0x + R[i1, 0, 1] * p0y + R[i1, 0, 2] * p0z + t[i1, 0]
            c10y = R[i1, 1, 0] * p0x + R[i1, 1, 1] * p0y + R[i1, 1, 2] * p0z + t[i1, 1]
            c10z = R[i1, 2, 0] * p0x + R[i1, 2, 1] * p0y + R[i1, 2, 2] * p0z + t[i1, 2]
            _angle_fold(i1, i0,
                        c10x - p1tx, c10y - p1ty, c10z - p1tz,
                        p0tx - p1tx, p0ty - p1ty, p0tz - p1tz,
                        p1tx, p1ty, p1tz, p0tx, p0ty, p0tz,
                        sw_a, partial[chunk], cost[chunk], want_jac)

            # rotation consistency of the real quaternion parts
            sw_r = math.sqrt(0.5 * base * rotation_weight)
            q0w, q0x, q0y, q0z = warps[i0, 0], warps[i0, 1], warps[i0, 2], warps[i0, 3]
            q1w, q1x, q1y, q1z = warps[i1, 0], warps[i1, 1], warps[i1, 2], warps[i1, 3]
            dq = q0w * q1w + q0x * q1x + q0y * q1y + q0z * q1z
            sg = -1.0 if dq < 0.0 else 1.0
            d0 = q0w - sg * q1w
            d1 = q0x - sg * q1x
            d2 = q0y - sg * q1y
            d3 = q0z - sg * q1z
            comp_cost = sw_r * sw_r * (d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3)
            cost[chunk, i0] += comp_cost
            cost[chunk, i1] += comp_cost
            if want_jac:
                # bin i0: 0.5 * pure-imaginary left product of q0,
                # rotation columns only
                J4[0, 0] = -0.5 * q0x
                J4[0, 1] = -0.5 * q0y
                J4[0, 2] = -0.5 * q0z
                J4[1, 0] = 0.5 * q0w
                J4[1, 1] = 0.5 * q0z
                J4[1, 2] = -0.5 * q0y
                J4[2, 0] = -0.5 * q0z
                J4[2, 1] = 0.5 * q0w
                J4[2, 2] = 0.5 * q0x
                J4[3, 0] = 0.5 * q0y
                J4[3, 1] = -0.5 * q0x
                J4[3, 2] = 0.5 * q0w
                _fold_quad(partial[chunk], i0, J4, d0, d1, d2, d3, sw_r)
                h = -sg * 0.5
                J4[0, 0] = h * q1x * -1.0
                J4[0, 1] = h * q1y * -1.0
                J4[0, 2] = h * q1z * -1.0
                J4[1, 0] = h * q1w
                J4[1, 1] = h * q1z
                J4[1, 2] = h * -q1y
                J4[2, 0] = h * -q1z
                J4[2, 1] = h * q1w
                J4[2, 2] = h * q1x
                J4[3, 0] = h * q1y
                J4[3, 1] = h * -q1x
                J4[3, 2] = h * q1w
                _fold_quad(partial[chunk], i1, J4, d0, d1, d2, d3, sw_r)
    out_partial = np.zeros((m, N_COLS))
    out_cost = np.zeros(m)
    for chunk in range(n_chunks):
        out_partial += partial[chunk]
        out_cost += cost[chunk]
    return out_partial, out_cost


@njit(cache=True, inline="always")
def _fold_quad(partial, ci, J4, d0, d1, d2, d3, sw):
    # four quaternion-component rows sharing one bin; rotation columns only
    for i in range(3):
        for j in range(i, 3):
            acc = (J4[0, i] * J4[0, j] + J4[1, i] * J4[1, j]
                   + J4[2, i] * J4[2, j] + J4[3, i] * J4[3, j])
            partial[ci, _triu_col(i, j)] += sw * sw * acc
        partial[ci, 21 + i] += sw * sw * (
            J4[0, i] * d0 + J4[1, i] * d1 + J4[2, i] * d2 + J4[3, i] * d3
        )


@njit(cache=True, parallel=True)
def warp_and_rasterize(points, normals, bind_idx, alpha, warps,
                       depth, depth_valid, obs_normals,
                       fx, fy, cx, cy, gate_distance, cos_gate, n_chunks):
    """Warp the template and find its projective associations in one pass.

    Per point: blend-and-apply for the position, rotate-and-renormalize for
    the normal, then project into the depth image, read the hit pixel back,
    and apply the distance and normal-angle gates. Row-parallel with no
    cross-row accumulation, so the chunking only spreads the work; results
    never depend on it.

    Returns (warped_points, warped_normals, valid, obs_points, obs_norms,
    pixels); pixels are (u, v), -1 where the point found no valid pair.
    """
    n = points.shape[0]
    k = bind_idx.shape[1]
    height, width = depth.shape
    out_p = np.empty((n, 3))
    out_n = np.empty((n, 3))
    valid = np.zeros(n, dtype=np.bool_)
    obs_p = np.zeros((n, 3))
    obs_n = np.zeros((n, 3))
    pixels = np.full((n, 2), -1, dtype=np.int64)
    for chunk in prange(n_chunks):
        lo = n * chunk // n_chunks
        hi = n * (chunk + 1) // n_chunks
        B = np.zeros(8)
        sgn = np.zeros(k)
        for c in range(lo, hi):
            _blend_at(warps, bind_idx, alpha, c, B, sgn)
            x0, x1, x2, _ = _apply_blend(B, points[c, 0], points[c, 1], points[c, 2])
            out_p[c, 0] = x0
            out_p[c, 1] = x1
            out_p[c, 2] = x2
            qw, qx, qy, qz = B[0], B[1], B[2], B[3]
            s2 = qw * qw + qx * qx + qy * qy + qz * qz
            uu = qx * qx + qy * qy + qz * qz
            vx, vy, vz = normals[c, 0], normals[c, 1], normals[c, 2]
            quv = qx * vx + qy * vy + qz * vz
            r0 = ((qw * qw - uu) * vx + 2.0 * quv * qx
                  + 2.0 * qw * (qy * vz - qz * vy)) / s2
            r1 = ((qw * qw - uu) * vy + 2.0 * quv * qy
                  + 2.0 * qw * (qz * vx - qx * vz)) / s2
            r2 = ((qw * qw - uu) * vz + 2.0 * quv * qz
                  + 2.0 * qw * (qx * vy - qy * vx)) / s2
            ln = math.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
            if ln > 0.0:
                r0 /= ln
                r1 /= ln
                r2 /= ln
            out_n[c, 0] = r0
            out_n[c, 1] = r1
            out_n[c, 2] = r2
            if x2 <= 0.0:
                continue
            ui = int(np.rint(fx * x0 / x2 + cx))
            vi = int(np.rint(fy * x1 / x2 + cy))
            if ui < 0 or ui >= width or vi < 0 or vi >= height:
                continue
            if not depth_valid[vi, ui]:
                continue
            d = depth[vi, ui]
            ox = (ui - cx) / fx * d
            oy = (vi - cy) / fy * d
            gx = obs_normals[vi, ui, 0]
            gy = obs_normals[vi, ui, 1]
            gz = obs_normals[vi, ui, 2]
            if gx * gx + gy * gy + gz * gz <= 0.25:  # valid normals are unit
                continue
            dx = ox - x0
            dy = oy - x1
            dz = d - x2
            if math.sqrt(dx * dx + dy * dy + dz * dz) >= gate_distance:
                continue
            if gx * r0 + gy * r1 + gz * r2 <= cos_gate:
                continue
            valid[c] = True
            obs_p[c, 0] = ox
            obs_p[c, 1] = oy
            obs_p[c, 2] = d
            obs_n[c, 0] = gx
            obs_n[c, 1] = gy
            obs_n[c, 2] = gz
            pixels[c, 0] = ui
            pixels[c, 1] = vi
    return out_p, out_n, valid, obs_p, obs_n, pixels
