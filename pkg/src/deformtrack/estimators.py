"""Scikit-learn style facades over the tracking pipeline.

These wrap the functional API (prepare_template / track_frame /
preselect_inliers) behind fit/predict/transform so the tracker composes
with sklearn tooling (clone, get_params, pipelines). All heavy lifting
stays in the underlying modules; the estimators only translate parameters
and marshal arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import CameraSection, RunConfig
from .correspond import Observation, estimate_point_normals
from .geometry import PinholeCamera
from .matching import MatchSet, PreselectConfig, preselect_inliers
from .tracking import prepare_template, track_frame
from .warpfield import Template


class SurfaceDeformationTracker(BaseEstimator):
    """Track a deforming surface through a sequence of depth observations.

    fit() takes the reference-frame surface points (and optionally normals),
    samples the control graph, and binds the surface to it. predict() takes a
    sequence of depth maps or Observations plus optional per-frame sparse
    matches and returns the warped surface positions per frame, warm starting
    each frame from the previous one.

    Parameters mirror the run configuration; ``camera`` (a PinholeCamera) is
    only required when predict() receives raw depth arrays instead of
    Observations.
    """

    def __init__(
        self,
        sampling_radius: float = 7.0,
        bind_k: int = 4,
        feature_weight: float = 10.0,
        arap_weight: float = 1.0,
        angle_weight: float = 20.0,
        rotation_weight: float = 100.0,
        tukey_scale: float = 10.0,
        max_outer_iters: int = 10,
        gate_distance: float = 20.0,
        gate_angle_deg: float = 60.0,
        threads: int = 1,
        seed: int = 0,
        camera: PinholeCamera | None = None,
    ):
        self.sampling_radius = sampling_radius
        self.bind_k = bind_k
        self.feature_weight = feature_weight
        self.arap_weight = arap_weight
        self.angle_weight = angle_weight
        self.rotation_weight = rotation_weight
        self.tukey_scale = tukey_scale
        self.max_outer_iters = max_outer_iters
        self.gate_distance = gate_distance
        self.gate_angle_deg = gate_angle_deg
        self.threads = threads
        self.seed = seed
        self.camera = camera

    def _make_config(self) -> RunConfig:
        config = RunConfig(seed=self.seed, threads=self.threads)
        config.sampling.radius = self.sampling_radius
        config.sampling.bind_k = self.bind_k
        config.energy.feature_weight = self.feature_weight
        config.energy.arap_weight = self.arap_weight
        config.energy.angle_weight = self.angle_weight
        config.energy.rotation_weight = self.rotation_weight
        config.energy.tukey_scale = self.tukey_scale
        config.solver.max_outer_iters = self.max_outer_iters
        config.gates.distance_mm = self.gate_distance
        config.gates.angle_deg = self.gate_angle_deg
        if self.camera is not None:
            c = self.camera
            config.camera = CameraSection(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
        return config

    def fit(self, X, y=None, normals=None):
        """Bind the reference surface X (n, 3) to a freshly sampled graph.

        Normals default to a local PCA estimate oriented toward the camera.
        """
        points = np.asarray(X, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"X must be (n, 3) surface points, got {points.shape}")
        if normals is None:
            normals = estimate_point_normals(points)
        self.config_ = self._make_config()
        self.template_, self.graph_ = prepare_template(
            Template(points, np.asarray(normals, dtype=np.float64)), self.config_
        )
        return self

    def predict(self, X, matches=None):
        """Track the fitted surface through X and return positions (f, n, 3).

        X is a sequence of Observations or raw (h, w) depth arrays in mm
        (raw arrays require the ``camera`` parameter). ``matches`` is an
        optional per-frame sequence of MatchSet or None. Per-frame results
        and energy reports land in ``results_`` and ``reports_``.
        """
        if not hasattr(self, "graph_"):
            raise NotFittedError("fit the reference surface before predicting")
        observations = [self._as_observation(obs, i) for i, obs in enumerate(X)]
        if matches is not None and len(matches) != len(observations):
            raise ValueError("matches must align one-to-one with the frames")
        graph = self.graph_
        self.results_ = []
        for i, observation in enumerate(observations):
            frame_matches = None if matches is None else matches[i]
            result = track_frame(
                self.template_, graph, observation, frame_matches, self.config_
            )
            graph = result.graph
            self.results_.append(result)
        self.reports_ = [r.report for r in self.results_]
        return np.stack([r.points for r in self.results_])

    def fit_predict(self, X_reference, X, matches=None, normals=None):
        return self.fit(X_reference, normals=normals).predict(X, matches=matches)

    def _as_observation(self, obs, frame_id: int) -> Observation:
        if isinstance(obs, Observation):
            return obs
        if self.camera is None:
            raise ValueError(
                "raw depth arrays need the camera parameter; alternatively "
                "pass Observation objects"
            )
        return Observation.from_depth(
            np.asarray(obs, dtype=np.float64), self.camera, frame_id=frame_id
        )


class MatchInlierSelector(TransformerMixin, BaseEstimator):
    """Select the rigid-consensus inliers of a sparse match set.

    X stacks each match as a 6-vector [template xyz, observed xyz]. fit()
    runs the single-reference consensus search; transform() keeps the rows
    flagged as inliers. The fitted rotation, per-match weights, and flags
    are exposed for downstream use. fit() raises NoValidHypothesis when no
    reference survives (fewer than 3 matches or no consensus).
    """

    def __init__(
        self,
        distance_threshold: float = 5.0,
        n_references: int = 30,
        n_reweight_iters: int = 10,
        inlier_weight_min: float = 0.5,
        min_support: float = 0.2,
        seed: int = 0,
    ):
        self.distance_threshold = distance_threshold
        self.n_references = n_references
        self.n_reweight_iters = n_reweight_iters
        self.inlier_weight_min = inlier_weight_min
        self.min_support = min_support
        self.seed = seed

    def fit(self, X, y=None):
        pairs = self._check_pairs(X)
        config = PreselectConfig(
            distance_threshold=self.distance_threshold,
            n_references=self.n_references,
            n_reweight_iters=self.n_reweight_iters,
            inlier_weight_min=self.inlier_weight_min,
            min_support=self.min_support,
            seed=self.seed,
        )
        outcome = preselect_inliers(
            MatchSet.from_pairs(pairs[:, :3], pairs[:, 3:]), config
        )
        self.weights_ = outcome.matches.weights
        self.preselected_ = outcome.matches.preselected
        self.rotation_ = outcome.rotation
        self.reference_index_ = outcome.reference_index
        self.support_ = outcome.support
        self.n_samples_fit_ = pairs.shape[0]
        return self

    def transform(self, X):
        if not hasattr(self, "preselected_"):
            raise NotFittedError("fit the selector before transforming")
        pairs = self._check_pairs(X)
        if pairs.shape[0] != self.n_samples_fit_:
            raise ValueError(
                "the selector filters the match set it was fitted on; "
                f"expected {self.n_samples_fit_} rows, got {pairs.shape[0]}"
            )
        return pairs[self.preselected_]

    @staticmethod
    def _check_pairs(X) -> np.ndarray:
        pairs = np.asarray(X, dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 6:
            raise ValueError(
                f"X must be (n, 6) [template xyz, observed xyz], got {pairs.shape}"
            )
        return pairs


__all__ = ["SurfaceDeformationTracker", "MatchInlierSelector"]
