import numpy as np
import pytest

from deformtrack.config import load_config
from deformtrack.matching import MatchSet
from deformtrack.synth import SceneSpec, evaluate, generate_sequence
from deformtrack.tracking import annotate_matches, prepare_template, track_sequence


@pytest.fixture(scope="module")
def small_config():
    return load_config(
        {
            "sampling": {"radius": 12.0},
            "solver": {"max_outer_iters": 40},
        }
    )


def test_identity_sequence_stays_on_template(small_config):
    # plane: back-projected pixels lie exactly on the surface, so the
    # motionless sequence admits an exactly-zero energy at identity
    spec = SceneSpec(
        surface="plane", resolution=(20, 20), amplitude=0.0, noise_sigma=0.0, n_matches=0
    )
    seq = generate_sequence(spec, 3)
    results = track_sequence(
        seq.template,
        [f.observation for f in seq.frames],
        None,
        small_config,
    )
    identity = np.concatenate([[1.0], np.zeros(7)])
    for fr, res in zip(seq.frames, results):
        m = evaluate(res.points, fr.truth.points)
        assert m.max < 1e-6
        assert res.report.converged
        np.testing.assert_allclose(
            res.graph.warps, np.tile(identity, (len(res.graph), 1)), atol=1e-6
        )


def test_bend_sequence_tracks_with_matches():
    # capacity to follow the bend needs a control spacing below the
    # deformation wavelength and a loose rigidity prior
    config = load_config(
        {
            "sampling": {"radius": 8.0},
            "solver": {"max_outer_iters": 40},
            "energy": {"arap_weight": 0.25},
        }
    )
    spec = SceneSpec(
        resolution=(20, 20),
        amplitude=5.0,
        period=8.0,
        noise_sigma=0.0,
        n_matches=40,
        outlier_fraction=0.0,
        seed=4,
    )
    seq = generate_sequence(spec, 5)
    results = track_sequence(
        seq.template,
        [f.observation for f in seq.frames],
        [f.matches for f in seq.frames],
        config,
    )
    for fr, res in zip(seq.frames, results):
        m = evaluate(res.points, fr.truth.points)
        assert m.rmse < 0.5, f"frame {fr.frame_id}: rmse {m.rmse}"
    # preselection kept the exact matches
    assert results[1].report.n_preselected == 40
    assert results[1].report.n_matches == 40


def test_warm_start_reuses_previous_frame(small_config):
    spec = SceneSpec(resolution=(20, 20), amplitude=5.0, period=8.0, n_matches=0, seed=2)
    seq = generate_sequence(spec, 3)
    results = track_sequence(
        seq.template, [f.observation for f in seq.frames], None, small_config
    )
    # frame 2 starts from frame 1's warps, not identity
    np.testing.assert_array_equal(results[0].graph.warps, results[0].graph.warps)
    assert results[1].report.cost_history  # it had to move
    first_cost = results[2].report.cost_history[0][0]
    spec_cold = results[2].report
    assert spec_cold.outer_iterations >= 1
    # cold start from identity would begin at a much larger cost
    cold = track_sequence(
        seq.template, [seq.frames[2].observation], None, small_config
    )
    cold_first = cold[0].report.cost_history[0][0]
    assert first_cost < cold_first


def test_preselection_failure_drops_feature_term(small_config):
    spec = SceneSpec(resolution=(20, 20), amplitude=0.0, n_matches=0)
    seq = generate_sequence(spec, 1)
    template = seq.template
    bad = MatchSet.from_pairs(template.points[:2], template.points[:2] + 1.0)
    results = track_sequence(
        template, [seq.frames[0].observation], [bad], small_config
    )
    report = results[0].report
    assert any("preselection failed" in w for w in report.warnings)
    assert report.n_matches == 2
    assert report.n_preselected == 0
    assert report.feature_cost == 0.0
    assert report.match_weight_sum == 0.0


def test_annotate_matches_passthrough(small_config):
    assert annotate_matches(None, small_config) == (None, None)
    empty = MatchSet.from_pairs(np.zeros((0, 3)), np.zeros((0, 3)))
    out, warning = annotate_matches(empty, small_config)
    assert out is empty and warning is None


def test_prepare_template_binds_and_samples(small_config):
    spec = SceneSpec(resolution=(20, 20))
    seq = generate_sequence(spec, 1)
    bound, graph = prepare_template(seq.template, small_config)
    assert bound.is_bound
    assert len(graph) >= 20  # 100mm patch at radius 12
    assert bound.bind_indices.shape == (len(bound), 4)
    np.testing.assert_allclose(bound.bind_weights.sum(axis=1), 1.0, atol=1e-9)
