"""sklearn facade: parameter plumbing and equivalence with the plain API."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deformtrack.config import RunConfig
from deformtrack.estimators import MatchInlierSelector, SurfaceDeformationTracker
from deformtrack.exceptions import NoValidHypothesis
from deformtrack.matching import MatchSet, PreselectConfig, preselect_inliers
from deformtrack.synth import SceneSpec, generate_sequence
from deformtrack.tracking import track_sequence


@pytest.fixture(scope="module")
def scene():
    spec = SceneSpec(
        resolution=(14, 14),
        extent=60.0,
        amplitude=4.0,
        period=10.0,
        n_matches=40,
        seed=5,
    )
    return generate_sequence(spec, 3)


def tracker_params():
    return dict(
        sampling_radius=9.0,
        arap_weight=0.25,
        max_outer_iters=6,
    )


def matching_config(params):
    config = RunConfig()
    config.sampling.radius = params["sampling_radius"]
    config.energy.arap_weight = params["arap_weight"]
    config.solver.max_outer_iters = params["max_outer_iters"]
    return config


def test_get_params_set_params_clone_roundtrip():
    tracker = SurfaceDeformationTracker(sampling_radius=12.0, threads=2)
    params = tracker.get_params()
    assert params["sampling_radius"] == 12.0
    assert params["threads"] == 2
    assert clone(tracker).get_params() == params
    tracker.set_params(arap_weight=0.5)
    assert tracker.get_params()["arap_weight"] == 0.5

    selector = MatchInlierSelector(distance_threshold=3.0)
    assert clone(selector).get_params()["distance_threshold"] == 3.0


def test_tracker_matches_plain_track_sequence(scene):
    params = tracker_params()
    tracker = SurfaceDeformationTracker(**params)
    obs = [f.observation for f in scene.frames]
    matches = [f.matches for f in scene.frames]
    predicted = tracker.fit(
        scene.template.points, normals=scene.template.normals
    ).predict(obs, matches=matches)

    reference = track_sequence(scene.template, obs, matches, matching_config(params))
    assert predicted.shape == (len(obs), scene.template.points.shape[0], 3)
    for frame, result in zip(predicted, reference):
        assert np.array_equal(frame, result.points)
    assert len(tracker.reports_) == len(obs)
    assert all(r.report.converged == p.converged
               for r, p in zip(reference, tracker.reports_))


def test_tracker_accepts_raw_depth_with_camera(scene):
    params = tracker_params()
    obs = [f.observation for f in scene.frames]
    from_obs = SurfaceDeformationTracker(**params).fit(
        scene.template.points, normals=scene.template.normals
    ).predict(obs)
    from_depth = SurfaceDeformationTracker(camera=scene.camera, **params).fit(
        scene.template.points, normals=scene.template.normals
    ).predict([o.depth for o in obs])
    assert np.array_equal(from_obs, from_depth)

    bare = SurfaceDeformationTracker(**params).fit(scene.template.points)
    with pytest.raises(ValueError, match="camera"):
        bare.predict([o.depth for o in obs])


def test_tracker_estimates_missing_normals(scene):
    tracker = SurfaceDeformationTracker(**tracker_params())
    tracker.fit(scene.template.points)
    # height-field patch faces the camera; estimated normals must too
    assert np.all(tracker.template_.normals[:, 2] < 0.0)
    dots = np.sum(tracker.template_.normals * scene.template.normals, axis=1)
    assert np.mean(dots) > 0.95


def test_tracker_requires_fit_and_checks_shapes(scene):
    tracker = SurfaceDeformationTracker()
    with pytest.raises(NotFittedError):
        tracker.predict([scene.frames[0].observation])
    with pytest.raises(ValueError):
        tracker.fit(np.zeros((4, 2)))
    tracker.fit(scene.template.points, normals=scene.template.normals)
    with pytest.raises(ValueError, match="one-to-one"):
        tracker.predict([scene.frames[0].observation], matches=[None, None])


def rigid_pairs(n=80, outlier_fraction=0.3, seed=2):
    rng = np.random.default_rng(seed)
    from scipy.spatial.transform import Rotation

    axis = rng.normal(size=3)
    R = Rotation.from_rotvec(np.deg2rad(15.0) * axis / np.linalg.norm(axis)).as_matrix()
    src = rng.uniform(-50.0, 50.0, (n, 3))
    dst = src @ R.T + np.array([4.0, -3.0, 8.0])
    n_out = round(n * outlier_fraction)
    dst[rng.choice(n, size=n_out, replace=False)] = rng.uniform(-50.0, 50.0, (n_out, 3))
    return np.hstack([src, dst])


def test_selector_matches_preselect_inliers():
    X = rigid_pairs()
    selector = MatchInlierSelector(seed=3).fit(X)
    reference = preselect_inliers(
        MatchSet.from_pairs(X[:, :3], X[:, 3:]), PreselectConfig(seed=3)
    )
    assert np.array_equal(selector.weights_, reference.matches.weights)
    assert np.array_equal(selector.preselected_, reference.matches.preselected)
    assert np.array_equal(selector.rotation_, reference.rotation)
    assert selector.reference_index_ == reference.reference_index
    assert selector.support_ == reference.support

    kept = selector.transform(X)
    assert np.array_equal(kept, X[reference.matches.preselected])
    assert np.array_equal(MatchInlierSelector(seed=3).fit_transform(X), kept)


def test_selector_guards():
    X = rigid_pairs(n=40)
    selector = MatchInlierSelector()
    with pytest.raises(NotFittedError):
        selector.transform(X)
    selector.fit(X)
    with pytest.raises(ValueError, match="rows"):
        selector.transform(X[:10])
    with pytest.raises(ValueError):
        selector.fit(np.zeros((5, 4)))
    with pytest.raises(NoValidHypothesis):
        MatchInlierSelector().fit(np.zeros((2, 6)))
