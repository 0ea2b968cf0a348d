"""Depth-map observations and projective (rasterized) ICP correspondences.

An observation wraps one depth frame: depth in mm (0 / NaN / out-of-range =
invalid), per-pixel normals from central differences of the back-projected
neighbors, and the camera. Correspondences are found by projecting deformed
template points into the depth image and reading the nearest pixel back, with
hard distance and normal-angle gates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PinholeCamera, back_project

DEFAULT_Z_MIN = 1.0
DEFAULT_Z_MAX = 1.0e5


def valid_depth_mask(depth: np.ndarray, z_min: float, z_max: float) -> np.ndarray:
    """Pixels with a usable depth value (finite and inside (z_min, z_max))."""
    depth = np.asarray(depth)
    return np.isfinite(depth) & (depth > z_min) & (depth < z_max)


def back_project_grid(depth: np.ndarray, camera: PinholeCamera) -> np.ndarray:
    """Back-project a full depth image to camera-frame points (h, w, 3)."""
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    return back_project(camera, u.astype(np.float64), v.astype(np.float64), depth)


def compute_observation_normals(
    depth: np.ndarray,
    camera: PinholeCamera,
    z_min: float = DEFAULT_Z_MIN,
    z_max: float = DEFAULT_Z_MAX,
) -> np.ndarray:
    """Per-pixel normals from central differences of back-projected points.

    A pixel's normal is valid only when the pixel and its four axis
    neighbors all carry valid depth; invalid entries are all-zero rows.
    Normals are oriented toward the camera (dot with the view ray < 0).
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = valid_depth_mask(depth, z_min, z_max)
    pts = back_project_grid(depth, camera)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return normals
    core = np.s_[1:-1, 1:-1]
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dx, dy)
    ok = (
        valid[core]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = np.where(ok[..., None], n / np.where(norm > 1e-12, norm, 1.0)[..., None], 0.0)
    # orient toward the camera: flip where n points along the viewing ray
    flip = np.sum(n * pts[core], axis=-1) > 0.0
    n = np.where(flip[..., None], -n, n)
    normals[core] = n
    return normals


@dataclass
class Observation:
    """One depth frame with precomputed normals and validity bounds."""

    depth: np.ndarray  # (h, w) mm
    normals: np.ndarray  # (h, w, 3); all-zero = invalid
    camera: PinholeCamera
    frame_id: int = 0
    z_min: float = DEFAULT_Z_MIN
    z_max: float = DEFAULT_Z_MAX

    @classmethod
    def from_depth(
        cls,
        depth: np.ndarray,
        camera: PinholeCamera,
        frame_id: int = 0,
        z_min: float = DEFAULT_Z_MIN,
        z_max: float = DEFAULT_Z_MAX,
    ) -> "Observation":
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (camera.height, camera.width):
            raise ValueError(
                f"depth shape {depth.shape} does not match camera "
                f"({camera.height}, {camera.width})"
            )
        normals = compute_observation_normals(depth, camera, z_min, z_max)
        return cls(depth, normals, camera, frame_id, z_min, z_max)

    @property
    def valid(self) -> np.ndarray:
        return valid_depth_mask(self.depth, self.z_min, self.z_max)


@dataclass
class CorrespondenceSet:
    """Per-template-point projective association with an observation."""

    valid: np.ndarray  # (n,) bool
    points: np.ndarray  # (n, 3) observed surface points (garbage where invalid)
    normals: np.ndarray  # (n, 3) observed normals
    pixels: np.ndarray  # (n, 2) int, (u, v) target pixel

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.valid))


def rasterize_correspondences(
    points: np.ndarray,
    normals: np.ndarray,
    observation: Observation,
    gate_distance: float = 20.0,
    gate_angle_deg: float = 60.0,
) -> CorrespondenceSet:
    """Project deformed template points into the depth image and gate.

    Each point with z > 0 is projected, rounded to the nearest pixel, and
    paired with that pixel's back-projected depth. Pairs survive when the
    pixel is in bounds and valid, the Euclidean distance is below
    ``gate_distance`` (mm), and the angle between the deformed template
    normal and the observed normal is below ``gate_angle_deg``.
    """
    pts = np.asarray(points, dtype=np.float64)
    nrm = np.asarray(normals, dtype=np.float64)
    cam = observation.camera
    n = pts.shape[0]
    valid = np.zeros(n, dtype=bool)
    obs_pts = np.zeros((n, 3))
    obs_nrm = np.zeros((n, 3))
    pixels = np.full((n, 2), -1, dtype=np.int64)

    z = pts[:, 2]
    front = z > 0.0
    if not np.any(front):
        return CorrespondenceSet(valid, obs_pts, obs_nrm, pixels)
    u = np.where(front, cam.fx * pts[:, 0] / np.where(front, z, 1.0) + cam.cx, -1.0)
    v = np.where(front, cam.fy * pts[:, 1] / np.where(front, z, 1.0) + cam.cy, -1.0)
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    inside = front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    uc = np.clip(ui, 0, cam.width - 1)
    vc = np.clip(vi, 0, cam.height - 1)

    depth_ok = observation.valid[vc, uc] & inside
    d = observation.depth[vc, uc]
    candidate = back_project(cam, uc.astype(np.float64), vc.astype(np.float64), d)
    cand_nrm = observation.normals[vc, uc]
    nrm_ok = np.linalg.norm(cand_nrm, axis=1) > 0.5  # valid normals are unit

    dist_ok = np.linalg.norm(candidate - pts, axis=1) < gate_distance
    cos_gate = np.cos(np.deg2rad(gate_angle_deg))
    angle_ok = np.sum(cand_nrm * nrm, axis=1) > cos_gate

    valid = depth_ok & nrm_ok & dist_ok & angle_ok
    obs_pts[valid] = candidate[valid]
    obs_nrm[valid] = cand_nrm[valid]
    pixels[valid, 0] = uc[valid]
    pixels[valid, 1] = vc[valid]
    return CorrespondenceSet(valid, obs_pts, obs_nrm, pixels)


def occlusion_mask(
    observation: Observation, region: tuple[int, int, int, int]
) -> Observation:
    """Invalidate depth inside a pixel rectangle (u0, v0, u1, v1], half-open.

    Returns a new observation with the masked depth and normals recomputed
    from it; the input is left untouched.
    """
    u0, v0, u1, v1 = region
    depth = np.array(observation.depth, dtype=np.float64, copy=True)
    depth[v0:v1, u0:u1] = 0.0
    return Observation.from_depth(
        depth,
        observation.camera,
        frame_id=observation.frame_id,
        z_min=observation.z_min,
        z_max=observation.z_max,
    )


def estimate_point_normals(points: np.ndarray, k: int = 12) -> np.ndarray:
    """Estimate unit normals for an unordered point cloud via local PCA.

    Used when a template file ships without normals. Normals are oriented
    toward the camera at the origin (n . p < 0).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    k = min(k, n)
    normals = np.tile([0.0, 0.0, -1.0], (n, 1))
    if n < 3 or k < 3:
        return normals
    _, idx = cKDTree(pts).query(pts, k=k)
    neigh = pts[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    # eigenvector of the smallest eigenvalue = local surface normal
    w, v = np.linalg.eigh(cov)
    candidates = v[:, :, 0]
    flip = np.sum(candidates * pts, axis=1) > 0.0
    candidates[flip] *= -1.0
    norms = np.linalg.norm(candidates, axis=1, keepdims=True)
    return candidates / np.where(norms > 0.0, norms, 1.0)
