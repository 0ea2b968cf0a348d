"""Quaternion / dual-quaternion arithmetic, rigid transforms, pinhole camera.

Conventions used package-wide:

* Quaternions are scalar-first ``(w, x, y, z)`` float64 arrays encoding
  right-handed rotations acting as ``q (0, v) q*``.
* Dual quaternions are flat arrays of length 8: real part ``[0:4]`` (the
  rotation), dual part ``[4:8]`` (carries the translation). Batches stack
  along leading axes, e.g. ``(n, 8)``.
* A unit dual quaternion satisfies ``|real| == 1`` and ``dot(real, dual) == 0``
  (both within 1e-9 after :func:`dq_normalize`). The canonical double-cover
  representative has ``real[0] >= 0``.
* Rigid transforms are ``(R, t)`` pairs: ``R`` 3x3 with det +1, ``t`` in mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import AllZeroWeights, BehindCamera, NotPositiveDefinite

# ---------------------------------------------------------------------------
# quaternions


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of scalar-first quaternions. Broadcasts."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis (length 3). Broadcasts.

    Same arithmetic as np.cross, minus its axis bookkeeping, which
    dominates the runtime for the small batches the solver feeds it.
    """
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors by unit quaternions (``q (0, v) q*``). Broadcasts."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * cross3(u, v)
    return v + w * t + cross3(u, t)


def quat_from_axis_angle(omega: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (radians) to unit quaternion."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = np.linalg.norm(omega, axis=-1, keepdims=True)
    # sin(a/2)/a, continuous through a = 0 via np.sinc
    half_sinc = 0.5 * np.sinc(angle / (2.0 * np.pi))
    w = np.cos(0.5 * angle)
    return np.concatenate([w, omega * half_sinc], axis=-1)


def axis_angle_from_quat(q: np.ndarray) -> np.ndarray:
    """Log map: unit quaternion to rotation vector (shortest arc)."""
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., :1] < 0.0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    scale = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return q[..., 1:] * scale


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to 3x3 rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion, canonical hemisphere (w >= 0).

    Uses the largest-pivot branch (Shepperd's method) for stability across
    the full rotation range.
    """
    R = np.asarray(R, dtype=np.float64)
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    trace = m00 + m11 + m22
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


def _pure(v: np.ndarray) -> np.ndarray:
    """Vectors to pure quaternions (0, v)."""
    v = np.asarray(v, dtype=np.float64)
    return np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)


# ---------------------------------------------------------------------------
# dual quaternions


def dq_identity() -> np.ndarray:
    out = np.zeros(8)
    out[0] = 1.0
    return out


def dq_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dual-quaternion product. Broadcasts."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    real = quat_mul(a[..., :4], b[..., :4])
    dual = quat_mul(a[..., :4], b[..., 4:]) + quat_mul(a[..., 4:], b[..., :4])
    return np.concatenate([real, dual], axis=-1)


def dq_normalize(dq: np.ndarray) -> np.ndarray:
    """Restore the unit invariants exactly.

    Divides both parts by the real norm, then removes the component of the
    dual part parallel to the real part.
    """
    dq = np.asarray(dq, dtype=np.float64)
    norm = np.linalg.norm(dq[..., :4], axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise AllZeroWeights("dual quaternion has zero real part")
    out = dq / norm
    real, dual = out[..., :4], out[..., 4:]
    dot = np.sum(real * dual, axis=-1, keepdims=True)
    out = np.concatenate([real, dual - dot * real], axis=-1)
    return out


def dq_canonicalize(dq: np.ndarray) -> np.ndarray:
    """Flip sign so the real scalar part is non-negative (double cover)."""
    dq = np.asarray(dq, dtype=np.float64)
    return np.where(dq[..., :1] < 0.0, -dq, dq)


def dq_from_transform(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Rigid transform (R, t) to unit dual quaternion."""
    real = quat_from_matrix(R)
    dual = 0.5 * quat_mul(_pure(np.asarray(t, dtype=np.float64)), real)
    return np.concatenate([real, dual])


def dq_to_transform(dq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit dual quaternion to (R, t)."""
    dq = dq_normalize(dq)
    real, dual = dq[:4], dq[4:]
    R = quat_to_matrix(real)
    t = 2.0 * quat_mul(dual, quat_conjugate(real))[1:]
    return R, t


def dq_translation(dqs: np.ndarray) -> np.ndarray:
    """Translation part of unit dual quaternions. Broadcasts."""
    dqs = np.asarray(dqs, dtype=np.float64)
    return 2.0 * quat_mul(dqs[..., 4:], quat_conjugate(dqs[..., :4]))[..., 1:]


def dq_apply(dq: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply one unit dual quaternion to points (n, 3)."""
    R, t = dq_to_transform(np.asarray(dq, dtype=np.float64))
    return np.asarray(points, dtype=np.float64) @ R.T + t


def dq_apply_batch(dqs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply dual quaternions to paired points; both broadcast to (..., 3).

    The dual quaternions need not be unit: the action of ``normalize(dq)``
    is evaluated directly, which is exact for any nonzero real part. This is
    what makes blended (unnormalized) warp sums cheap to apply.
    """
    dqs = np.asarray(dqs, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    q = dqs[..., :4]
    d = dqs[..., 4:]
    s2 = np.sum(q * q, axis=-1, keepdims=True)
    qw, qu = q[..., :1], q[..., 1:]
    dw, du = d[..., :1], d[..., 1:]
    rotated = (
        (qw * qw - np.sum(qu * qu, axis=-1, keepdims=True)) * p
        + 2.0 * np.sum(qu * p, axis=-1, keepdims=True) * qu
        + 2.0 * qw * cross3(qu, p)
    )
    translated = 2.0 * (qw * du - dw * qu - cross3(du, qu))
    return (rotated + translated) / s2


def dq_to_transform_batch(dqs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dual quaternions (..., 8) to rotation matrices (..., 3, 3) and
    translations (..., 3).

    Evaluates the same normalized action as ``dq_apply_batch``; converting
    once pays off when each transform is applied to many points.
    """
    dqs = np.asarray(dqs, dtype=np.float64)
    q = dqs[..., :4]
    d = dqs[..., 4:]
    s2 = np.sum(q * q, axis=-1)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(dqs.shape[:-1] + (3, 3))
    R[..., 0, 0] = w * w + x * x - y * y - z * z
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = w * w - x * x + y * y - z * z
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = w * w - x * x - y * y + z * z
    R /= s2[..., None, None]
    qw, qu = q[..., :1], q[..., 1:]
    dw, du = d[..., :1], d[..., 1:]
    t = 2.0 * (qw * du - dw * qu - cross3(du, qu)) / s2[..., None]
    return R, t


def dq_rotate_batch(dqs: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Rotate direction vectors by the real parts (no translation)."""
    dqs = np.asarray(dqs, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    q = dqs[..., :4]
    s2 = np.sum(q * q, axis=-1, keepdims=True)
    qw, qu = q[..., :1], q[..., 1:]
    rotated = (
        (qw * qw - np.sum(qu * qu, axis=-1, keepdims=True)) * v
        + 2.0 * np.sum(qu * v, axis=-1, keepdims=True) * qu
        + 2.0 * qw * cross3(qu, v)
    )
    return rotated / s2


def dq_blend(dqs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Blend unit dual quaternions with non-negative weights.

    Each entry is sign-aligned to the first (real-part dot test) before the
    weighted component sum, then the sum is renormalized.
    """
    dqs = np.atleast_2d(np.asarray(dqs, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if dqs.shape[0] != weights.shape[0]:
        raise ValueError("one weight per dual quaternion required")
    if not np.any(weights != 0.0):
        raise AllZeroWeights("all blend weights are zero")
    dots = dqs[:, :4] @ dqs[0, :4]
    signs = np.where(dots < 0.0, -1.0, 1.0)
    blended = (weights * signs) @ dqs
    return dq_normalize(blended)


def dq_exp(omega: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rigid increment (rotation vector, translation) to unit dual quaternion."""
    real = quat_from_axis_angle(omega)
    dual = 0.5 * quat_mul(_pure(v), real)
    return np.concatenate([real, dual], axis=-1)


def dq_log(dq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`dq_exp` for unit dual quaternions."""
    dq = np.asarray(dq, dtype=np.float64)
    return axis_angle_from_quat(dq[..., :4]), dq_translation(dq)


def dq_inverse(dq: np.ndarray) -> np.ndarray:
    """Inverse of a unit dual quaternion (conjugate both parts)."""
    dq = np.asarray(dq, dtype=np.float64)
    return np.concatenate(
        [quat_conjugate(dq[..., :4]), quat_conjugate(dq[..., 4:])], axis=-1
    )


# ---------------------------------------------------------------------------
# small SPD solves


def cholesky_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for a small symmetric positive-definite ``A``.

    Raises NotPositiveDefinite when the factorization hits a pivot <= 0.
    Intended for the per-control-point normal equations (n <= 8).
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if b.shape != (A.shape[0],):
        raise ValueError(f"rhs shape {b.shape} does not match {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric within 1e-9")
    try:
        factor = cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from err
    x = cho_solve(factor, b, check_finite=False)
    assert float(np.linalg.norm(A @ x - b)) <= 1e-6 * max(
        1.0, float(np.linalg.norm(b))
    ), "cholesky_solve residual out of bounds"
    return x


# ---------------------------------------------------------------------------
# pinhole camera


@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics of an undistorted pinhole camera (pixel units)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


def project(camera: PinholeCamera, points: np.ndarray) -> np.ndarray:
    """Project points (..., 3) to pixel coordinates (..., 2).

    Raises BehindCamera when any point has z <= 0.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0.0):
        raise BehindCamera("point with z <= 0 cannot be projected")
    u = camera.fx * p[..., 0] / z + camera.cx
    v = camera.fy * p[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def back_project(
    camera: PinholeCamera, u: np.ndarray, v: np.ndarray, depth: np.ndarray
) -> np.ndarray:
    """Pixel coordinates plus depth (z, mm) to camera-frame points (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (u - camera.cx) / camera.fx * z
    y = (v - camera.cy) / camera.fy * z
    return np.stack([np.broadcast_to(x, z.shape), np.broadcast_to(y, z.shape), z], axis=-1)
