"""Sparse feature-match preselection by single-reference consensus search.

A match pairs a reference-frame surface point with its observed position.
Because subtracting one reference match from all others cancels any common
translation, each hypothesis needs only a single reference index: rectify
about it, then alternate weighted rotation fits (orthogonal Procrustes) with
residual-driven reweighting. The hypothesis with the largest weight sum wins;
matches above a weight threshold are flagged as preselected and the rest get
a softer residual-based weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateConfiguration, NoValidHypothesis, TooFewMatches


@dataclass
class MatchSet:
    """Point matches between the reference frame and one observation."""

    template_points: np.ndarray  # (n, 3) reference-frame positions
    observed_points: np.ndarray  # (n, 3) observed positions
    weights: np.ndarray  # (n,) in [0, 1]
    preselected: np.ndarray  # (n,) bool

    def __post_init__(self) -> None:
        self.template_points = np.asarray(self.template_points, dtype=np.float64)
        self.observed_points = np.asarray(self.observed_points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.preselected = np.asarray(self.preselected, dtype=bool)
        n = self.template_points.shape[0]
        if self.template_points.shape != (n, 3) or self.observed_points.shape != (n, 3):
            raise ValueError("match arrays must be (n, 3)")
        if self.weights.shape != (n,) or self.preselected.shape != (n,):
            raise ValueError("weights and flags must be (n,)")

    @classmethod
    def from_pairs(
        cls, template_points: np.ndarray, observed_points: np.ndarray
    ) -> "MatchSet":
        template_points = np.asarray(template_points, dtype=np.float64)
        n = template_points.shape[0]
        return cls(
            template_points,
            observed_points,
            weights=np.ones(n),
            preselected=np.zeros(n, dtype=bool),
        )

    def __len__(self) -> int:
        return self.template_points.shape[0]


@dataclass
class PreselectConfig:
    """Knobs for the consensus search.

    distance_threshold is the residual scale (mm) for both the reweighting
    rule and the soft fallback weight. min_support is a fraction of the match
    count below which a hypothesis is discarded.
    """

    distance_threshold: float = 5.0
    n_references: int = 30
    n_reweight_iters: int = 10
    inlier_weight_min: float = 0.5
    min_support: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.distance_threshold <= 0.0:
            raise ValueError("distance_threshold must be positive")
        if not 0.0 <= self.min_support <= 1.0:
            raise ValueError("min_support must lie in [0, 1]")
        if self.n_references < 1 or self.n_reweight_iters < 1:
            raise ValueError("n_references and n_reweight_iters must be >= 1")


@dataclass
class PreselectionResult:
    """Winning hypothesis plus the annotated match set."""

    matches: MatchSet
    rotation: np.ndarray  # (3, 3)
    reference_index: int
    support: float  # sum of final weights
    residuals: np.ndarray = field(repr=False)  # (n,) mm under the winning rotation


def rectify(
    template_points: np.ndarray, observed_points: np.ndarray, reference: int
) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the reference match from both sides, cancelling translation.

    Returns (n, 3) arrays; the reference row becomes exactly zero.
    """
    src = np.asarray(template_points, dtype=np.float64)
    dst = np.asarray(observed_points, dtype=np.float64)
    if src.shape[0] < 2:
        raise TooFewMatches("rectification needs at least two matches")
    return src - src[reference], dst - dst[reference]


def weighted_rotation(
    src: np.ndarray, dst: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """Rotation minimizing sum w_k |dst_k - R src_k|^2 (weighted Procrustes).

    SVD of the weighted covariance with the determinant sign fix, so the
    result is always a proper rotation. Raises DegenerateConfiguration when
    the weighted vectors span fewer than two dimensions.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    cov = (dst * w[:, None]).T @ src
    U, S, Vt = np.linalg.svd(cov)
    if S[0] <= 0.0 or S[1] <= 1e-9 * S[0]:
        raise DegenerateConfiguration("weighted matches span fewer than two dimensions")
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def rotation_residuals(src: np.ndarray, dst: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Per-match distances |dst_k - R src_k| in mm."""
    return np.linalg.norm(dst - src @ np.asarray(rotation).T, axis=1)


def reweight(residuals: np.ndarray, distance_threshold: float) -> np.ndarray:
    """Weights min(threshold / d, 1); a zero residual maps to weight 1."""
    d = np.asarray(residuals, dtype=np.float64)
    return np.where(d > distance_threshold, distance_threshold / np.maximum(d, 1e-300), 1.0)


def soft_weight(residuals: np.ndarray, distance_threshold: float) -> np.ndarray:
    """Linear falloff 1 - d/(5 threshold), clamped to [0, 1]."""
    d = np.asarray(residuals, dtype=np.float64)
    return np.clip(1.0 - d / (5.0 * distance_threshold), 0.0, 1.0)


def _evaluate_reference(
    src: np.ndarray,
    dst: np.ndarray,
    reference: int,
    config: PreselectConfig,
) -> tuple[float, np.ndarray, np.ndarray] | None:
    """Run the reweighting alternation for one reference index.

    Returns (support, rotation, residuals) or None when the hypothesis
    degenerates or falls below the support floor.
    """
    s1, s2 = rectify(src, dst, reference)
    n = src.shape[0]
    weights = np.ones(n)
    rotation = None
    residuals = None
    for _ in range(config.n_reweight_iters):
        try:
            rotation = weighted_rotation(s1, s2, weights)
        except DegenerateConfiguration:
            return None
        residuals = rotation_residuals(s1, s2, rotation)
        weights = reweight(residuals, config.distance_threshold)
    support = float(weights.sum())
    if support < config.min_support * n:
        return None
    return support, rotation, residuals


def preselect_inliers(matches: MatchSet, config: PreselectConfig) -> PreselectionResult:
    """Find the consensus rotation and annotate matches with weights/flags.

    Reference indices are drawn without replacement with the configured seed
    (all indices when there are fewer matches than ``n_references``). Every
    surviving hypothesis is scored by its weight sum; the best wins, ties
    broken by the lower reference index. Raises NoValidHypothesis when no
    hypothesis survives (including any input with fewer than 3 matches,
    where the rectified system cannot determine a rotation).
    """
    n = len(matches)
    if n < 3:
        raise NoValidHypothesis(f"{n} matches cannot support a rotation hypothesis")
    src = matches.template_points
    dst = matches.observed_points
    if n <= config.n_references:
        references = np.arange(n)
    else:
        rng = np.random.default_rng(config.seed)
        references = rng.choice(n, size=config.n_references, replace=False)

    best: tuple[float, int, np.ndarray, np.ndarray] | None = None
    for reference in references:
        outcome = _evaluate_reference(src, dst, int(reference), config)
        if outcome is None:
            continue
        support, rotation, residuals = outcome
        if (
            best is None
            or support > best[0]
            or (support == best[0] and int(reference) < best[1])
        ):
            best = (support, int(reference), rotation, residuals)
    if best is None:
        raise NoValidHypothesis("every reference hypothesis was discarded")

    support, reference, rotation, residuals = best
    final_weights = reweight(residuals, config.distance_threshold)
    flags = final_weights >= config.inlier_weight_min
    weights = np.where(flags, final_weights, soft_weight(residuals, config.distance_threshold))
    annotated = MatchSet(
        template_points=src.copy(),
        observed_points=dst.copy(),
        weights=weights,
        preselected=flags,
    )
    return PreselectionResult(
        matches=annotated,
        rotation=rotation,
        reference_index=reference,
        support=support,
        residuals=residuals,
    )
