"""Sparse control-point warp field over a template surface.

A template (points + normals captured at the reference frame) is bound to a
sparse set of control points, each carrying a dual-quaternion warp. Warping a
template point blends the warps of its k nearest controls with normalized
Gaussian weights; control points are connected to each other with Gaussian
edge weights that later drive the rigidity energy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import EmptyTemplate, SingleControlPointWarning
from .geometry import dq_apply_batch, dq_identity, dq_rotate_batch

# Edges with Gaussian weight below this are dropped from the graph.
CONNECTION_PRUNE = 0.01


@dataclass
class Template:
    """Reference-frame surface: positions, unit normals, control binding."""

    points: np.ndarray  # (n, 3) mm
    normals: np.ndarray  # (n, 3) unit
    bind_indices: np.ndarray | None = None  # (n, k) control ids, nearest first
    bind_weights: np.ndarray | None = None  # (n, k) convex weights

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if self.normals.shape != self.points.shape:
            raise ValueError("normals must match points shape")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_bound(self) -> bool:
        return self.bind_indices is not None


@dataclass
class ControlGraph:
    """Control points, their warps, and the weighted connection graph."""

    points: np.ndarray  # (m, 3) rest positions
    warps: np.ndarray  # (m, 8) dual quaternions
    edges: np.ndarray  # (e, 2) int64, first index < second
    edge_weights: np.ndarray  # (e,) in (0, 1]
    sampling_radius: float

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        self.warps = np.asarray(self.warps, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_warps(self, warps: np.ndarray) -> "ControlGraph":
        return replace(self, warps=np.asarray(warps, dtype=np.float64))

    def warped_points(self) -> np.ndarray:
        """Current position of each control point under its own warp."""
        return dq_apply_batch(self.warps, self.points)


def sample_control_points(
    template: Template, radius: float, connection_sigma: float | None = None
) -> ControlGraph:
    """Greedy radius thinning of the template into a control graph.

    Template points are visited in storage order; a point becomes a control
    point when it lies at least ``radius`` from every control accepted so
    far. Deterministic for a fixed template. Warps start at identity.
    """
    if len(template) == 0:
        raise EmptyTemplate("cannot sample control points from an empty template")
    if radius <= 0.0:
        raise ValueError("sampling radius must be positive")
    pts = template.points
    accepted = [0]
    chosen = pts[0][None]
    for i in range(1, len(pts)):
        d2 = np.sum((chosen - pts[i]) ** 2, axis=1)
        if np.min(d2) >= radius * radius:
            accepted.append(i)
            chosen = np.concatenate([chosen, pts[i][None]], axis=0)
    control_points = pts[np.asarray(accepted, dtype=np.int64)]
    warps = np.tile(dq_identity(), (len(accepted), 1))
    if connection_sigma is None:
        connection_sigma = 2.0 * radius
    edges, edge_weights = build_connections(control_points, connection_sigma)
    return ControlGraph(
        points=control_points,
        warps=warps,
        edges=edges,
        edge_weights=edge_weights,
        sampling_radius=radius,
    )


def build_connections(
    control_points: np.ndarray, sigma: float
) -> tuple[np.ndarray, np.ndarray]:
    """Dense Gaussian connections between control points.

    Every pair gets weight exp(-d^2 / (2 sigma^2)); pairs below
    ``CONNECTION_PRUNE`` are dropped. Returns (edges (e, 2), weights (e,))
    with edges ordered lexicographically.
    """
    pts = np.asarray(control_points, dtype=np.float64)
    m = pts.shape[0]
    if sigma <= 0.0:
        raise ValueError("connection sigma must be positive")
    if m < 2:
        warnings.warn(
            "control graph has fewer than two nodes; no connections",
            SingleControlPointWarning,
            stacklevel=2,
        )
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    ii, jj = np.triu_indices(m, k=1)
    d2 = np.sum((pts[ii] - pts[jj]) ** 2, axis=1)
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    keep = w >= CONNECTION_PRUNE
    edges = np.stack([ii[keep], jj[keep]], axis=1).astype(np.int64)
    return edges, w[keep]


def connected_components(n_nodes: int, edges: np.ndarray) -> int:
    """Number of connected components (union-find); 1 means fully connected."""
    parent = np.arange(n_nodes)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    return len({find(int(a)) for a in range(n_nodes)})


def bind_points(
    points: np.ndarray,
    control_points: np.ndarray,
    k: int,
    sigma: float,
) -> tuple[np.ndarray, np.ndarray]:
    """k-nearest-control binding with normalized Gaussian weights.

    Returns (indices (n, k), weights (n, k)); indices are sorted by distance
    (nearest first) and weights sum to one per row. When fewer than k
    controls exist the trailing slots repeat the nearest control with zero
    weight so shapes stay rectangular.
    """
    pts = np.asarray(points, dtype=np.float64)
    ctrl = np.asarray(control_points, dtype=np.float64)
    if ctrl.shape[0] == 0:
        raise EmptyTemplate("cannot bind to an empty control set")
    if sigma <= 0.0:
        raise ValueError("binding sigma must be positive")
    k_eff = min(k, ctrl.shape[0])
    dist, idx = cKDTree(ctrl).query(pts, k=k_eff)
    if k_eff == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    w = np.exp(-(dist**2) / (2.0 * sigma * sigma))
    row_sum = w.sum(axis=1)
    degenerate = row_sum <= 0.0
    if np.any(degenerate):
        # far outside the kernel support: fall back to the nearest control
        w[degenerate] = 0.0
        w[degenerate, 0] = 1.0
        row_sum = w.sum(axis=1)
    w = w / row_sum[:, None]
    if k_eff < k:
        pad = k - k_eff
        idx = np.concatenate([idx, np.repeat(idx[:, :1], pad, axis=1)], axis=1)
        w = np.concatenate([w, np.zeros((w.shape[0], pad))], axis=1)
    return idx.astype(np.int64), w


def bind_template(
    template: Template,
    graph: ControlGraph,
    k: int = 4,
    sigma: float | None = None,
) -> Template:
    """Bind every template point to its k nearest controls.

    ``sigma`` defaults to the graph's sampling radius.
    """
    if sigma is None:
        sigma = graph.sampling_radius
    idx, w = bind_points(template.points, graph.points, k, sigma)
    return replace(template, bind_indices=idx, bind_weights=w)


def blend_bound_warps(
    warps: np.ndarray,
    bind_indices: np.ndarray,
    bind_weights: np.ndarray,
    return_signs: bool = False,
):
    """Per-point weighted sum of bound control warps (not normalized).

    Each bound warp is sign-aligned against the point's first (nearest)
    control before summation, handling the quaternion double cover. The
    returned (n, 8) sums feed :func:`deformtrack.geometry.dq_apply_batch`,
    which evaluates the normalized action directly.
    """
    gathered = warps[bind_indices]  # (n, k, 8)
    ref = gathered[:, :1, :4]
    dots = np.sum(gathered[..., :4] * ref, axis=-1)
    signs = np.where(dots < 0.0, -1.0, 1.0)
    blended = np.einsum("nk,nke->ne", bind_weights * signs, gathered)
    if return_signs:
        return blended, signs
    return blended


def warp_all(
    template: Template, graph: ControlGraph
) -> tuple[np.ndarray, np.ndarray]:
    """Warp every template point and normal by the blended control warps.

    Normals are rotated only (no translation) and renormalized.
    """
    if not template.is_bound:
        raise ValueError("template must be bound to the control graph first")
    blended = blend_bound_warps(graph.warps, template.bind_indices, template.bind_weights)
    points = dq_apply_batch(blended, template.points)
    normals = dq_rotate_batch(blended, template.normals)
    norms = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = normals / np.where(norms > 0.0, norms, 1.0)
    return points, normals


def warp_point(template: Template, graph: ControlGraph, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Warp a single template point (same path as :func:`warp_all`)."""
    if not template.is_bound:
        raise ValueError("template must be bound to the control graph first")
    one = replace(
        template,
        points=template.points[index : index + 1],
        normals=template.normals[index : index + 1],
        bind_indices=template.bind_indices[index : index + 1],
        bind_weights=template.bind_weights[index : index + 1],
    )
    pts, nrm = warp_all(one, graph)
    return pts[0], nrm[0]
