"""Frame-to-frame tracking: preselection, per-frame solves, warm starts.

The solver itself is stateless; this layer owns the sequence logic. Each
frame runs match preselection (when matches exist), then one solve warm
started from the previous frame's warps. A failed preselection drops the
feature term for that frame only and leaves a warning in the report.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .correspond import Observation
from .energy import EnergyReport
from .exceptions import NoValidHypothesis
from .matching import MatchSet, preselect_inliers
from .solver import solve_frame
from .warpfield import ControlGraph, Template, bind_template, sample_control_points, warp_all


@dataclass
class FrameResult:
    frame_id: int
    graph: ControlGraph  # solved warps for this frame
    points: np.ndarray  # (n, 3) warped template positions
    normals: np.ndarray  # (n, 3) warped template normals
    matches: MatchSet | None  # preselection-annotated matches used in the solve
    report: EnergyReport


def prepare_template(template: Template, config: RunConfig) -> tuple[Template, ControlGraph]:
    """Sample the control graph and bind the template to it."""
    graph = sample_control_points(
        template,
        config.sampling.radius,
        connection_sigma=config.sampling.effective_connection_sigma,
    )
    bound = bind_template(
        template, graph, k=config.sampling.bind_k, sigma=config.sampling.effective_bind_sigma
    )
    return bound, graph


def annotate_matches(
    matches: MatchSet | None, config: RunConfig
) -> tuple[MatchSet | None, str | None]:
    """Run preselection; on failure return zero-weight matches plus a warning."""
    if matches is None or len(matches) == 0:
        return matches, None
    try:
        return preselect_inliers(matches, config.make_preselect_config()).matches, None
    except NoValidHypothesis as exc:
        n = len(matches)
        dropped = MatchSet(
            matches.template_points,
            matches.observed_points,
            np.zeros(n),
            np.zeros(n, dtype=bool),
        )
        return dropped, f"match preselection failed ({exc}); feature term dropped"


def track_frame(
    template: Template,
    graph: ControlGraph,
    observation: Observation,
    matches: MatchSet | None,
    config: RunConfig,
) -> FrameResult:
    """One preselect + solve, warm started from the warps in ``graph``."""
    annotated, warning = annotate_matches(matches, config)
    out_graph, report = solve_frame(
        template,
        graph,
        observation,
        annotated,
        config.energy,
        config.make_solver_config(),
        frame_id=observation.frame_id,
    )
    if warning is not None:
        report.warnings.append(warning)
    points, normals = warp_all(template, out_graph)
    return FrameResult(
        frame_id=observation.frame_id,
        graph=out_graph,
        points=points,
        normals=normals,
        matches=annotated,
        report=report,
    )


def track_sequence(
    template: Template,
    observations: Sequence[Observation],
    matches_per_frame: Sequence[MatchSet | None] | None,
    config: RunConfig,
) -> list[FrameResult]:
    """Track a whole sequence in order, threading warps frame to frame."""
    bound, graph = prepare_template(template, config)
    results: list[FrameResult] = []
    for i, observation in enumerate(observations):
        matches = None if matches_per_frame is None else matches_per_frame[i]
        result = track_frame(bound, graph, observation, matches, config)
        graph = result.graph
        results.append(result)
    return results


__all__ = [
    "FrameResult",
    "prepare_template",
    "annotate_matches",
    "track_frame",
    "track_sequence",
]
