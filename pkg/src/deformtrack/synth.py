"""Synthetic deforming-surface sequences with exact ground truth.

Surfaces are analytic height fields z = z0 + g(x, y) over a square patch,
optionally moved rigidly or displaced along z by a time-varying field
(sinusoidal bend or a Gaussian poke). Depth maps are rendered by Newton
iteration on the ray-surface equation, so rendered pixels back-project onto
the analytic surface to solver precision. Everything is seeded; the same
spec always yields the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .correspond import Observation
from .exceptions import SizeMismatch
from .geometry import PinholeCamera, dq_from_transform, project
from .matching import MatchSet
from .warpfield import Template

PATCH_DISTANCE = 300.0  # mm from camera to patch center
RENDER_SIZE = 96  # depth map side, pixels
_NEWTON_ITERS = 60

SURFACE_KINDS = ("plane", "height-field", "cylinder-patch")
DEFORMATION_KINDS = ("global-rigid", "sinusoidal-bend", "gaussian-poke")


@dataclass
class SceneSpec:
    """Recipe for one synthetic sequence."""

    surface: str = "height-field"
    resolution: tuple[int, int] = (40, 40)  # grid points (nx, ny)
    extent: float = 100.0  # patch side, mm
    deformation: str = "sinusoidal-bend"
    amplitude: float = 10.0  # bend amplitude / poke depth, mm
    period: float = 20.0  # frames per deformation cycle
    rigid_rotation_deg: float = 0.0
    rigid_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    rigid_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    poke_center: tuple[float, float] = (0.0, 0.0)  # patch coords, mm
    poke_sigma: float = 15.0
    noise_sigma: float = 0.0  # depth noise, mm
    n_matches: int = 100
    outlier_fraction: float = 0.0
    occlusion: tuple[int, int, int, int] | None = None  # (u0, v0, w, h) px
    seed: int = 0

    def __post_init__(self) -> None:
        if self.surface not in SURFACE_KINDS:
            raise ValueError(f"unknown surface kind {self.surface!r}")
        if self.deformation not in DEFORMATION_KINDS:
            raise ValueError(f"unknown deformation kind {self.deformation!r}")
        nx, ny = self.resolution
        if nx < 2 or ny < 2:
            raise ValueError("resolution must be at least 2x2")
        if self.extent <= 0.0:
            raise ValueError("extent must be positive")
        if self.amplitude < 0.0:
            raise ValueError("amplitude must be nonnegative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier fraction must lie in [0, 1)")
        if self.period <= 0.0:
            raise ValueError("period must be positive")
        if self.poke_sigma <= 0.0:
            raise ValueError("poke sigma must be positive")
        if self.noise_sigma < 0.0:
            raise ValueError("noise sigma must be nonnegative")
        if self.n_matches < 0:
            raise ValueError("match count must be nonnegative")
        if self.occlusion is not None:
            u0, v0, w, h = self.occlusion
            if min(u0, v0) < 0 or w <= 0 or h <= 0:
                raise ValueError("occlusion rectangle must be (u0, v0, w, h) with positive size")


@dataclass
class FrameTruth:
    """Exact per-frame ground truth kept alongside the rendered data."""

    points: np.ndarray  # (n, 3) deformed template positions
    displacements: np.ndarray  # (n, 3) points - template.points
    rigid_warp: np.ndarray | None  # (8,) dq when the motion is globally rigid
    match_indices: np.ndarray  # (k,) template indices backing the matches
    match_is_outlier: np.ndarray  # (k,) bool


@dataclass
class SynthFrame:
    frame_id: int
    observation: Observation
    matches: MatchSet
    truth: FrameTruth


@dataclass
class SynthSequence:
    spec: SceneSpec
    camera: PinholeCamera
    template: Template
    frames: list[SynthFrame]


@dataclass
class EvalMetrics:
    """Point-to-point error statistics over index-aligned surfaces (mm)."""

    rmse: float
    mean: float
    max: float
    std: float
    distances: np.ndarray = field(repr=False)

    def to_row(self) -> dict[str, float]:
        return {
            "rmse_mm": self.rmse,
            "mean_mm": self.mean,
            "max_mm": self.max,
            "std_mm": self.std,
        }


def scene_camera(
    spec: SceneSpec, width: int = RENDER_SIZE, height: int = RENDER_SIZE
) -> PinholeCamera:
    """Pinhole camera that frames the patch with a 10% margin."""
    f = 0.9 * min(width, height) * PATCH_DISTANCE / spec.extent
    return PinholeCamera(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )


def _rest_surface(spec: SceneSpec):
    """Returns g(x, y) -> (height, dg/dx, dg/dy) for the undeformed patch."""
    L = spec.extent
    if spec.surface == "plane":

        def g(x, y):
            zero = np.zeros_like(x)
            return zero, zero, np.zeros_like(y)

        return g
    if spec.surface == "height-field":
        relief = L / 20.0
        kx = 2.0 * np.pi / L
        ky = np.pi / L

        def g(x, y):
            h = relief * np.sin(kx * x) * np.cos(ky * y)
            return (
                h,
                relief * kx * np.cos(kx * x) * np.cos(ky * y),
                -relief * ky * np.sin(kx * x) * np.sin(ky * y),
            )

        return g
    # cylinder-patch: axis along y, gentle sag away from the camera
    R = spec.extent

    def g(x, y):
        root = np.sqrt(R * R - x * x)
        return R - root, x / root, np.zeros_like(y)

    return g


def _displacement_field(spec: SceneSpec, frame: int):
    """z-displacement d(x, y) -> (dz, ddz/dx, ddz/dy) for one frame."""
    phase = np.sin(2.0 * np.pi * frame / spec.period)
    if spec.deformation == "sinusoidal-bend":
        a = spec.amplitude * phase
        k = np.pi / spec.extent

        def d(x, y):
            return a * np.cos(k * x), -a * k * np.sin(k * x), np.zeros_like(y)

        return d
    if spec.deformation == "gaussian-poke":
        a = spec.amplitude * phase
        px, py = spec.poke_center
        s2 = spec.poke_sigma**2

        def d(x, y):
            bump = a * np.exp(-((x - px) ** 2 + (y - py) ** 2) / (2.0 * s2))
            return bump, -bump * (x - px) / s2, -bump * (y - py) / s2

        return d

    def d(x, y):
        zero = np.zeros_like(x)
        return zero, zero, np.zeros_like(y)

    return d


def _rigid_transform(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    axis = np.asarray(spec.rigid_axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValueError("rigid axis must be nonzero")
    angle = np.deg2rad(spec.rigid_rotation_deg)
    R = Rotation.from_rotvec(axis / norm * angle).as_matrix()
    return R, np.asarray(spec.rigid_translation, dtype=np.float64)


def make_template(spec: SceneSpec) -> Template:
    """Exact rest surface on the spec grid, normals facing the camera."""
    nx, ny = spec.resolution
    L = spec.extent
    xs = np.linspace(-L / 2.0, L / 2.0, nx)
    ys = np.linspace(-L / 2.0, L / 2.0, ny)
    X, Y = np.meshgrid(xs, ys)
    g = _rest_surface(spec)
    h, gx, gy = g(X, Y)
    pts = np.stack([X, Y, PATCH_DISTANCE + h], axis=-1).reshape(-1, 3)
    n = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return Template(points=pts, normals=n)


def _render_depth(
    camera: PinholeCamera,
    spec: SceneSpec,
    surface,
    rigid: tuple[np.ndarray, np.ndarray] | None,
) -> np.ndarray:
    """Depth map of the (possibly rigidly moved) height field.

    Newton iteration per pixel on psi_z(t) = z0 + g(psi_xy(t)) where psi
    maps the camera ray back to rest coordinates. Rays that land outside
    the patch get depth 0 (invalid).
    """
    h, w = camera.height, camera.width
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.stack(
        [(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)],
        axis=-1,
    )
    if rigid is None:
        rd = d
        off = np.zeros(3)
    else:
        R, tau = rigid
        rd = d @ R  # rows become R^T d
        off = -(R.T @ tau)
    t = np.full((h, w), PATCH_DISTANCE)
    for _ in range(_NEWTON_ITERS):
        x = t * rd[..., 0] + off[0]
        y = t * rd[..., 1] + off[1]
        z = t * rd[..., 2] + off[2]
        g, gx, gy = surface(x, y)
        phi = z - PATCH_DISTANCE - g
        dphi = rd[..., 2] - gx * rd[..., 0] - gy * rd[..., 1]
        step = phi / dphi
        t = t - step
        if np.max(np.abs(step)) < 1e-13:
            break
    x = t * rd[..., 0] + off[0]
    y = t * rd[..., 1] + off[1]
    half = spec.extent / 2.0
    inside = (np.abs(x) <= half) & (np.abs(y) <= half) & (t > 0.0)
    return np.where(inside, t * d[..., 2], 0.0)


def _deformed_surface(spec: SceneSpec, frame: int):
    g = _rest_surface(spec)
    disp = _displacement_field(spec, frame)

    def combined(x, y):
        h, gx, gy = g(x, y)
        dz, dzx, dzy = disp(x, y)
        return h + dz, gx + dzx, gy + dzy

    return combined


def _frame_truth(
    spec: SceneSpec, template: Template, frame: int
) -> tuple[np.ndarray, np.ndarray | None, tuple[np.ndarray, np.ndarray] | None]:
    """Deformed template points plus the rigid transform when applicable."""
    if spec.deformation == "global-rigid":
        if frame == 0:
            return template.points.copy(), None, None
        R, tau = _rigid_transform(spec)
        pts = template.points @ R.T + tau
        return pts, dq_from_transform(R, tau), (R, tau)
    disp = _displacement_field(spec, frame)
    dz, _, _ = disp(template.points[:, 0], template.points[:, 1])
    pts = template.points.copy()
    pts[:, 2] += dz
    return pts, None, None


def _sample_matches(
    spec: SceneSpec, truth_points: np.ndarray, frame: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Template indices, observed positions, and outlier labels for a frame."""
    n = truth_points.shape[0]
    count = min(spec.n_matches, n)
    pick = np.random.default_rng((spec.seed, frame, 1))
    idx = np.sort(pick.choice(n, size=count, replace=False))
    observed = truth_points[idx].copy()
    n_out = int(round(spec.outlier_fraction * count))
    is_outlier = np.zeros(count, dtype=bool)
    if n_out > 0:
        out_sel = np.random.default_rng((spec.seed, frame, 2)).choice(
            count, size=n_out, replace=False
        )
        is_outlier[out_sel] = True
        lo = truth_points.min(axis=0)
        hi = truth_points.max(axis=0)
        span = np.maximum(hi - lo, 5.0)
        lo = lo - 0.1 * span
        hi = hi + 0.1 * span
        uni = np.random.default_rng((spec.seed, frame, 3))
        observed[out_sel] = uni.uniform(lo, hi, size=(n_out, 3))
    return idx, observed, is_outlier


def _occlusion_filter(
    camera: PinholeCamera, rect: tuple[int, int, int, int], points: np.ndarray
) -> np.ndarray:
    """True for points whose projection falls outside the occluded rect."""
    if points.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    u0, v0, w, h = rect
    px = project(camera, points)
    inside = (
        (px[:, 0] >= u0 - 0.5)
        & (px[:, 0] < u0 + w - 0.5)
        & (px[:, 1] >= v0 - 0.5)
        & (px[:, 1] < v0 + h - 0.5)
    )
    return ~inside


def generate_sequence(
    spec: SceneSpec, n_frames: int, camera: PinholeCamera | None = None
) -> SynthSequence:
    """Render a deforming sequence with per-frame exact ground truth.

    Frame 0 is the rest pose (the template). Inlier matches satisfy the
    true deformation exactly; depth noise never touches them. The occlusion
    rectangle invalidates depth pixels and drops matches observed inside it.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if camera is None:
        camera = scene_camera(spec)
    template = make_template(spec)
    frames: list[SynthFrame] = []
    for f in range(n_frames):
        truth_points, rigid_warp, rigid = _frame_truth(spec, template, f)
        surface = (
            _rest_surface(spec) if rigid is not None else _deformed_surface(spec, f)
        )
        depth = _render_depth(camera, spec, surface, rigid)
        if spec.noise_sigma > 0.0:
            noise = np.random.default_rng((spec.seed, f, 0)).normal(
                0.0, spec.noise_sigma, size=depth.shape
            )
            depth = np.where(depth > 0.0, depth + noise, 0.0)
        if spec.occlusion is not None:
            u0, v0, w, h = spec.occlusion
            depth = depth.copy()
            depth[v0 : v0 + h, u0 : u0 + w] = 0.0

        idx, observed, is_outlier = _sample_matches(spec, truth_points, f)
        if spec.occlusion is not None and idx.size:
            keep = _occlusion_filter(camera, spec.occlusion, observed)
            idx, observed, is_outlier = idx[keep], observed[keep], is_outlier[keep]
        matches = MatchSet.from_pairs(template.points[idx], observed)

        frames.append(
            SynthFrame(
                frame_id=f,
                observation=Observation.from_depth(depth, camera, frame_id=f),
                matches=matches,
                truth=FrameTruth(
                    points=truth_points,
                    displacements=truth_points - template.points,
                    rigid_warp=rigid_warp,
                    match_indices=idx,
                    match_is_outlier=is_outlier,
                ),
            )
        )
    return SynthSequence(spec=spec, camera=camera, template=template, frames=frames)


def evaluate(recovered: np.ndarray, truth: np.ndarray) -> EvalMetrics:
    """Point-to-point distance statistics over index-aligned surfaces."""
    recovered = np.asarray(recovered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recovered.shape != truth.shape:
        raise SizeMismatch(
            f"recovered {recovered.shape} vs ground truth {truth.shape}"
        )
    if recovered.shape[0] == 0:
        return EvalMetrics(0.0, 0.0, 0.0, 0.0, np.zeros(0))
    d = np.linalg.norm(recovered - truth, axis=1)
    return EvalMetrics(
        rmse=float(np.sqrt(np.mean(d * d))),
        mean=float(np.mean(d)),
        max=float(np.max(d)),
        std=float(np.std(d)),
        distances=d,
    )


def surface_height_at(spec: SceneSpec, frame: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic z of the deformed (non-rigid) surface; test oracle hook."""
    g = _deformed_surface(spec, frame)
    h, _, _ = g(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return PATCH_DISTANCE + h


__all__ = [
    "SceneSpec",
    "FrameTruth",
    "SynthFrame",
    "SynthSequence",
    "EvalMetrics",
    "scene_camera",
    "make_template",
    "generate_sequence",
    "evaluate",
    "surface_height_at",
]
