"""Damped per-control updates minimizing the robust deformation energy.

Each outer iteration relinks correspondences at the current warps, freezes
the robust weights, linearizes every residual row against its bin's
control, and solves the resulting 6x6 normal equations per control with
Levenberg-Marquardt damping. The combined step is accepted only if it
lowers the frozen-weight cost; otherwise the damping grows and the solve
repeats, up to a retry budget.

Row evaluation runs in the compiled kernels of
:mod:`deformtrack.kernels`. Their work is carved into a fixed number of
chunks that does not depend on the thread count, and chunk results are
reduced in chunk order, so outputs are bitwise identical for any thread
count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from . import kernels
from .correspond import CorrespondenceSet, Observation
from .energy import (
    EnergyReport,
    EnergyWeights,
    arap_weight_from_support,
    tukey_weight,
    warp_increment_basis,
)
from .geometry import dq_exp, dq_mul, dq_normalize, dq_to_transform_batch
from .matching import MatchSet
from .warpfield import ControlGraph, Template, bind_points

_TRIU_R, _TRIU_C = np.triu_indices(6)
_N_COLS = 27  # 21 upper-triangle products + 6 gradient entries
_EMPTY = np.zeros(0)


@dataclass
class SolverConfig:
    """Iteration budget, damping schedule, gates, and parallelism."""

    max_outer_iters: int = 10
    lambda_init: float = 1e-3
    lambda_decrease: float = 0.1
    lambda_increase: float = 10.0
    lambda_min: float = 1e-9
    lambda_max: float = 1e9
    max_retries: int = 3
    step_tol: float = 1e-4  # max per-control step 6-norm marking convergence
    cost_tol: float = 1e-6  # relative cost decrease marking convergence
    gate_distance: float = 20.0  # mm, correspondence rejection
    gate_angle_deg: float = 60.0
    n_chunks: int = 8  # fixed row partitioning, independent of threads
    n_threads: int = 1

    def __post_init__(self) -> None:
        if self.max_outer_iters < 1 or self.max_retries < 0:
            raise ValueError("iteration budgets must be positive")
        if not (0.0 < self.lambda_min <= self.lambda_init <= self.lambda_max):
            raise ValueError("lambda_init must lie inside [lambda_min, lambda_max]")
        if self.lambda_decrease >= 1.0 or self.lambda_increase <= 1.0:
            raise ValueError("damping factors must shrink on accept and grow on reject")
        if self.n_chunks < 1 or self.n_threads < 1:
            raise ValueError("n_chunks and n_threads must be at least 1")
        if self.step_tol < 0.0 or self.cost_tol < 0.0:
            raise ValueError("tolerances must be non-negative")


def chunk_slices(n_items: int, n_chunks: int) -> list[slice]:
    """Contiguous, near-equal partition of range(n_items); empty chunks dropped."""
    bounds = [n_items * j // n_chunks for j in range(n_chunks + 1)]
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


@dataclass
class _EvalResult:
    """Per-control reductions of one full pass over the energy rows."""

    partials: list[np.ndarray]
    support: np.ndarray
    r_depth: np.ndarray
    wa: np.ndarray
    icp_cost: float
    feature_cost: float
    arap_cost: float

    @property
    def total_cost(self) -> float:
        return self.icp_cost + self.feature_cost + self.arap_cost


class _FrameData:
    """Kernel inputs gathered once per frame (matches) or per relink (depth)."""

    def __init__(self, template, graph, matches, match_bind, weights, config):
        self.weights = weights
        self.config = config
        self.n_chunks = config.n_chunks
        self.m = len(graph)
        self.ctrl_points = np.ascontiguousarray(graph.points)
        self.edges = np.ascontiguousarray(graph.edges)
        self.edge_weights = np.ascontiguousarray(graph.edge_weights)
        self.t_points = np.ascontiguousarray(template.points)
        self.t_normals = np.ascontiguousarray(template.normals)
        self.t_bind = np.ascontiguousarray(template.bind_indices, dtype=np.int64)
        self.t_alpha = np.ascontiguousarray(template.bind_weights)
        if match_bind is not None:
            active = np.flatnonzero(matches.weights > 0.0)
            idx, w = match_bind
            self.f_points = np.ascontiguousarray(matches.template_points[active])
            self.f_obs = np.ascontiguousarray(matches.observed_points[active])
            self.f_w = np.ascontiguousarray(matches.weights[active])
            self.f_bind = np.ascontiguousarray(idx[active], dtype=np.int64)
            self.f_alpha = np.ascontiguousarray(w[active])
        else:
            self.f_points = None
        self._obs_ref = None
        self._gather(None)

    def relink(self, warps, observation):
        """Warp the template, re-associate with the observation, regather."""
        if observation is not self._obs_ref:
            cam = observation.camera
            self._obs_ref = observation
            self._obs_depth = np.ascontiguousarray(observation.depth, dtype=np.float64)
            self._obs_valid = np.ascontiguousarray(observation.valid)
            self._obs_normals = np.ascontiguousarray(observation.normals, dtype=np.float64)
            self._intrinsics = (cam.fx, cam.fy, cam.cx, cam.cy)
        fx, fy, cx, cy = self._intrinsics
        _, _, valid, obs_p, obs_n, pixels = kernels.warp_and_rasterize(
            self.t_points, self.t_normals, self.t_bind, self.t_alpha, warps,
            self._obs_depth, self._obs_valid, self._obs_normals,
            fx, fy, cx, cy,
            self.config.gate_distance,
            float(np.cos(np.deg2rad(self.config.gate_angle_deg))),
            self.n_chunks,
        )
        corr = CorrespondenceSet(valid, obs_p, obs_n, pixels)
        self._gather(corr)
        return corr

    def _gather(self, corr):
        vi = np.flatnonzero(corr.valid) if corr is not None else np.zeros(0, dtype=np.int64)
        self.i_points = np.ascontiguousarray(self.t_points[vi])
        if corr is not None:
            self.i_normals = np.ascontiguousarray(corr.normals[vi])
            self.i_obs = np.ascontiguousarray(corr.points[vi])
        else:
            self.i_normals = self.i_points
            self.i_obs = self.i_points
        self.i_bind = np.ascontiguousarray(self.t_bind[vi])
        self.i_alpha = np.ascontiguousarray(self.t_alpha[vi])

    def evaluate(self, warps, *, jacobian, frozen=None, wa=None):
        """One pass over every row at ``warps``.

        With ``frozen`` the depth rows reuse pinned robust weights; with
        ``wa`` the rigidity weights are pinned too (both set for tentative
        steps so accept/reject compares the same weighted objective).
        """
        w = self.weights
        basis = warp_increment_basis(warps) if jacobian else np.zeros((self.m, 8, 6))
        icp_partial, icp_support, icp_cost, r_depth = kernels.icp_reduce(
            self.i_points, self.i_normals, self.i_obs, self.i_bind,
            self.i_alpha, warps, basis, w.tukey_scale,
            _EMPTY if frozen is None else frozen, frozen is not None,
            jacobian, self.n_chunks, self.m,
        )
        partials = [icp_partial]
        support = icp_support
        feature_cost = 0.0
        if self.f_points is not None:
            f_partial, f_support, f_cost = kernels.feature_reduce(
                self.f_points, self.f_obs, self.f_w, self.f_bind,
                self.f_alpha, warps, basis, w.feature_weight,
                jacobian, self.n_chunks, self.m,
            )
            partials.append(f_partial)
            support = support + f_support
            feature_cost = float(np.sum(f_cost))
        if wa is None:
            wa = arap_weight_from_support(support, w)
        R, t = dq_to_transform_batch(warps)
        arap_partial, arap_cost = kernels.arap_reduce(
            self.ctrl_points, R, t, warps, self.edges, self.edge_weights,
            wa, w.angle_weight, w.rotation_weight, jacobian,
            self.n_chunks, self.m,
        )
        partials.append(arap_partial)
        return _EvalResult(
            partials=partials,
            support=support,
            r_depth=r_depth,
            wa=wa,
            icp_cost=float(np.sum(icp_cost)),
            feature_cost=feature_cost,
            arap_cost=float(np.sum(arap_cost)),
        )


def _assemble(partials: list[np.ndarray], m: int) -> tuple[np.ndarray, np.ndarray]:
    total = np.zeros((m, _N_COLS))
    for p in partials:
        total += p
    A = np.zeros((m, 6, 6))
    A[:, _TRIU_R, _TRIU_C] = total[:, :21]
    A[:, _TRIU_C, _TRIU_R] = total[:, :21]
    b = -total[:, 21:27]
    return A, b


def _solve_damped(
    A: np.ndarray, b: np.ndarray, lam: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batched Cholesky solve of (A + lam_i * diag(A_i)) delta_i = b_i.

    ``lam`` holds one damping factor per control. Returns (delta, ok) where
    ``ok`` flags controls whose factorization succeeded; failed rows come
    back zero and the caller raises their damping before retrying.
    """
    m = A.shape[0]
    diag = np.maximum(np.diagonal(A, axis1=1, axis2=2), 1e-12)
    M = A.copy()
    idx = np.arange(6)
    M[:, idx, idx] += lam[:, None] * diag
    try:
        L = np.linalg.cholesky(M)
        ok = np.ones(m, dtype=bool)
    except np.linalg.LinAlgError:
        # isolate the offending controls so the rest still get a step
        L = np.empty_like(M)
        ok = np.zeros(m, dtype=bool)
        for i in range(m):
            try:
                L[i] = np.linalg.cholesky(M[i])
                ok[i] = True
            except np.linalg.LinAlgError:
                L[i] = np.eye(6)
    # forward then backward substitution, vectorized over the controls
    y = np.empty((m, 6))
    for i in range(6):
        acc = b[:, i].copy()
        for j in range(i):
            acc -= L[:, i, j] * y[:, j]
        y[:, i] = acc / L[:, i, i]
    x = np.empty((m, 6))
    for i in range(5, -1, -1):
        acc = y[:, i].copy()
        for j in range(i + 1, 6):
            acc -= L[:, j, i] * x[:, j]
        x[:, i] = acc / L[:, i, i]
    x[~ok] = 0.0
    return x, ok


def apply_step(warps: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Compose per-control increments on the left and renormalize."""
    stepped = dq_mul(dq_exp(delta[:, :3], delta[:, 3:]), warps)
    return dq_normalize(stepped)


def solve_frame(
    template: Template,
    graph: ControlGraph,
    observation: Observation,
    matches: MatchSet | None,
    weights: EnergyWeights,
    config: SolverConfig,
    frame_id: int = 0,
) -> tuple[ControlGraph, EnergyReport]:
    """Track one frame: returns the updated graph and its report.

    ``graph`` carries the warm-start warps (previous frame's solution or
    identity). The input graph is not modified.
    """
    t0 = time.perf_counter()
    if not template.is_bound:
        raise ValueError("template must be bound to the control graph first")
    m = len(graph)
    k = template.bind_indices.shape[1]
    warps = np.array(graph.warps, dtype=np.float64, copy=True)

    numba.set_num_threads(max(1, min(config.n_threads, numba.config.NUMBA_NUM_THREADS)))
    use_matches = matches is not None and len(matches) > 0 and bool(
        np.any(matches.weights > 0.0)
    )
    match_bind = None
    if use_matches:
        match_bind = bind_points(
            matches.template_points, graph.points, k=k, sigma=graph.sampling_radius
        )
    frame = _FrameData(
        template, graph, matches if use_matches else None, match_bind, weights, config
    )

    lam = np.full(m, config.lambda_init)
    report = EnergyReport(frame_id=frame_id)
    converged = False
    stalled = False
    for outer in range(config.max_outer_iters):
        report.outer_iterations = outer + 1
        frame.relink(warps, observation)

        # one fused pass builds values and Jacobians together; the robust
        # weights it computes at the current warps are frozen for the
        # whole step
        lin = frame.evaluate(warps, jacobian=True)
        frozen = np.sqrt(tukey_weight(lin.r_depth, weights.tukey_scale))
        cost_before = lin.total_cost
        A, b = _assemble(lin.partials, m)

        accepted = False
        cost_after = cost_before
        for _attempt in range(config.max_retries + 1):
            delta, ok = _solve_damped(A, b, lam)
            if not np.all(ok):
                lam = np.where(
                    ok, lam, np.minimum(lam * config.lambda_increase, config.lambda_max)
                )
                report.rejected_steps += 1
                continue
            step_norm = float(np.max(np.linalg.norm(delta, axis=1)))
            report.final_step_norm = step_norm
            if step_norm < config.step_tol:
                converged = True
                break
            tentative = apply_step(warps, delta)
            cost_after = frame.evaluate(
                tentative, jacobian=False, frozen=frozen, wa=lin.wa
            ).total_cost
            if cost_after < cost_before:
                warps = tentative
                lam = np.maximum(lam * config.lambda_decrease, config.lambda_min)
                report.accepted_steps += 1
                report.cost_history.append([cost_before, cost_after])
                accepted = True
                break
            lam = np.minimum(lam * config.lambda_increase, config.lambda_max)
            report.rejected_steps += 1
        report.lambda_history.append([float(np.min(lam)), float(np.max(lam))])
        if converged:
            break
        if not accepted:
            # keep going: lam stays raised, so the next outer iteration
            # resumes the retry ladder instead of giving up on the frame
            stalled = True
            report.warnings.append(
                f"lm step stalled at outer iteration {outer + 1}"
            )
            continue
        if cost_before - cost_after <= config.cost_tol * max(cost_before, 1e-30):
            converged = True
            break

    # final report from a fresh evaluation at the solution (robust and
    # rigidity weights recomputed there, matching a cold re-evaluation)
    out_graph = graph.with_warps(warps)
    corr = frame.relink(warps, observation)
    final = frame.evaluate(warps, jacobian=False)
    report.icp_cost = final.icp_cost
    report.feature_cost = final.feature_cost
    report.arap_cost = final.arap_cost
    report.total_cost = final.total_cost
    report.n_correspondences = int(corr.count)
    if matches is not None:
        report.n_matches = len(matches)
        report.n_preselected = int(np.count_nonzero(matches.preselected))
        report.match_weight_sum = float(np.sum(matches.weights))
    report.converged = converged
    report.stalled = stalled
    report.control_data_weights = [float(x) for x in final.wa]
    report.timings["solve_s"] = time.perf_counter() - t0
    return out_graph, report
