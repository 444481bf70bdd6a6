import itertools

import numpy as np
import pytest

from hydra_plan import infer
from hydra_plan import metrics as metrics_mod
from hydra_plan import vocab as vocab_mod
from hydra_plan import world as world_mod
from hydra_plan.errors import ConfigurationError
from hydra_plan.infer import (CostWeights, GridConfig, assemble_cost, baseline_select,
                              ensemble_subscores, grid_search_weights, load_weights,
                              reconstruct_perception, save_weights, select_trajectory)
from hydra_plan.model import PredictionBundle


def bundle_from(imitation, metric_scores):
    return PredictionBundle(imitation=np.asarray(imitation, float),
                            metric_scores=np.asarray(metric_scores, float))


def single_entry_vocab():
    poses = np.zeros((1, 4, 3))
    poses[0, :, 0] = np.arange(4.0)
    return vocab_mod.Vocabulary(poses, dt=0.1)


class TestAssembleCost:
    def test_all_ones_single_entry(self):
        bundle = bundle_from([1.0], np.ones((1, 5)))
        w = CostWeights(w1=0.1, w2=1.0, w3=1.0, w4=1.0)
        cost = assemble_cost(bundle, w)
        assert cost[0] == pytest.approx(-np.log(12.0))

    def test_collision_score_at_eps_dominates(self):
        ms = np.ones((2, 5))
        ms[1, 0] = 1e-6
        bundle = bundle_from([0.5, 0.5], ms)
        cost = assemble_cost(bundle, CostWeights())
        assert cost[1] > cost[0] + 10.0

    def test_monotone_in_imitation(self):
        ms = np.full((2, 5), 0.8)
        bundle = bundle_from([0.7, 0.3], ms)
        cost = assemble_cost(bundle, CostWeights())
        assert cost[0] < cost[1]

    def test_single_head_bundle_uses_aggregate_column(self):
        bundle = bundle_from([0.5, 0.5], [[0.9], [0.2]])
        cost = assemble_cost(bundle, CostWeights())
        assert cost[0] < cost[1]

    def test_weights_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            CostWeights(w1=0.0)


class TestSelectTrajectory:
    def test_single_entry(self):
        voc = single_entry_vocab()
        bundle = bundle_from([1.0], np.full((1, 5), 0.7))
        idx, traj = select_trajectory(bundle, CostWeights(), voc)
        assert idx == 0
        assert np.array_equal(traj.poses, voc.trajectories[0])

    def test_dominating_entry_wins(self, tiny_vocab):
        k = len(tiny_vocab)
        rng = np.random.default_rng(0)
        ms = rng.uniform(0.2, 0.8, (k, 5))
        ms[5] = 0.99
        im = np.full(k, 0.5 / (k - 1))
        im[5] = 0.5
        bundle = bundle_from(im, ms)
        idx, _ = select_trajectory(bundle, CostWeights(), tiny_vocab)
        assert idx == 5

    def test_tie_breaks_to_lowest_index(self, tiny_vocab):
        k = len(tiny_vocab)
        ms = np.full((k, 5), 0.1)
        ms[2] = 0.9
        ms[5] = 0.9
        im = np.full(k, 1.0 / k)
        bundle = bundle_from(im, ms)
        idx, _ = select_trajectory(bundle, CostWeights(), tiny_vocab)
        assert idx == 2

    def test_size_mismatch(self, tiny_vocab):
        bundle = bundle_from([1.0], np.full((1, 5), 0.5))
        with pytest.raises(ConfigurationError):
            select_trajectory(bundle, CostWeights(), tiny_vocab)

    def test_ordering_invariance_under_weight_scaling(self, tiny_vocab):
        rng = np.random.default_rng(1)
        k = len(tiny_vocab)
        for _ in range(20):
            im = rng.dirichlet(np.ones(k))
            ms = rng.uniform(0.05, 0.95, (k, 5))
            bundle = bundle_from(im, ms)
            w = CostWeights(*rng.uniform(0.05, 5.0, 4))
            scaled = CostWeights(*(3.7 * np.array(w.as_tuple())))
            a, _ = select_trajectory(bundle, w, tiny_vocab)
            b, _ = select_trajectory(bundle, scaled, tiny_vocab)
            assert a == b


class TestGridSearch:
    def test_single_point_grid_returns_that_point(self):
        rng = np.random.default_rng(2)
        bundles = [bundle_from(rng.dirichlet(np.ones(4)), rng.uniform(0.1, 0.9, (4, 5)))
                   for _ in range(3)]
        scores = rng.uniform(0, 1, (3, 4))
        grid = GridConfig(points=1)
        w = grid_search_weights(bundles, scores, grid)
        assert w.as_tuple() == (0.1, 1.0, 1.0, 10.0)

    def test_result_is_true_argmax_by_re_evaluation(self):
        rng = np.random.default_rng(3)
        k = 6
        bundles = [bundle_from(rng.dirichlet(np.ones(k)), rng.uniform(0.05, 0.95, (k, 5)))
                   for _ in range(10)]
        scores = rng.uniform(0, 1, (10, k))
        grid = GridConfig(points=3)
        best = grid_search_weights(bundles, scores, grid)

        def mean_score(w):
            picked = [int(np.argmin(assemble_cost(b, w))) for b in bundles]
            return float(np.mean([scores[i, j] for i, j in enumerate(picked)]))

        best_score = mean_score(best)
        for combo in itertools.product(*grid.axes()):
            assert mean_score(CostWeights(*combo)) <= best_score + 1e-12

    def test_weights_inside_configured_ranges(self):
        rng = np.random.default_rng(4)
        bundles = [bundle_from(rng.dirichlet(np.ones(4)), rng.uniform(0.1, 0.9, (4, 5)))
                   for _ in range(4)]
        scores = rng.uniform(0, 1, (4, 4))
        w = grid_search_weights(bundles, scores, GridConfig(points=4))
        for (name, (lo, hi)), value in zip(GridConfig().ranges, w.as_tuple()):
            assert lo - 1e-12 <= value <= hi + 1e-12

    def test_default_weights_are_grid_members(self):
        axes = GridConfig(points=4).axes()
        defaults = CostWeights().as_tuple()
        for axis, value in zip(axes, defaults):
            assert np.min(np.abs(axis - value)) < 1e-12

    def test_empty_validation_set_rejected(self):
        with pytest.raises(ConfigurationError):
            grid_search_weights([], np.zeros((0, 4)))


class TestEnsemble:
    def test_single_model_identity(self):
        rng = np.random.default_rng(5)
        bundle = bundle_from(rng.dirichlet(np.ones(4)), rng.uniform(0.1, 0.9, (4, 5)))
        out = ensemble_subscores([bundle], [1.0])
        assert np.allclose(out.imitation, bundle.imitation)
        assert np.array_equal(out.metric_scores, bundle.metric_scores)

    def test_identical_bundles_any_weights(self):
        rng = np.random.default_rng(6)
        bundle = bundle_from(rng.dirichlet(np.ones(4)), rng.uniform(0.1, 0.9, (4, 5)))
        out = ensemble_subscores([bundle, bundle, bundle], [0.2, 0.5, 0.3])
        assert np.allclose(out.imitation, bundle.imitation, atol=1e-12)
        assert np.allclose(out.metric_scores, bundle.metric_scores, atol=1e-12)

    def test_quarter_three_quarter_combination(self):
        rng = np.random.default_rng(7)
        a = bundle_from(rng.dirichlet(np.ones(4)), rng.uniform(0.1, 0.9, (4, 5)))
        b = bundle_from(rng.dirichlet(np.ones(4)), rng.uniform(0.1, 0.9, (4, 5)))
        out = ensemble_subscores([a, b], [0.25, 0.75])
        expected_ms = 0.25 * a.metric_scores + 0.75 * b.metric_scores
        assert np.allclose(out.metric_scores, expected_ms, atol=1e-12)
        mixed = 0.25 * a.imitation + 0.75 * b.imitation
        assert np.allclose(out.imitation, mixed / mixed.sum(), atol=1e-12)
        assert abs(out.imitation.sum() - 1.0) < 1e-9

    def test_shape_and_weight_validation(self):
        rng = np.random.default_rng(8)
        a = bundle_from(rng.dirichlet(np.ones(4)), rng.uniform(0.1, 0.9, (4, 5)))
        b = bundle_from(rng.dirichlet(np.ones(3)), rng.uniform(0.1, 0.9, (3, 5)))
        with pytest.raises(ConfigurationError):
            ensemble_subscores([a, b], [0.5, 0.5])
        with pytest.raises(ConfigurationError):
            ensemble_subscores([a, a], [0.5, 0.6])


class TestBaselines:
    def test_mode_a_one_hot(self, tiny_vocab):
        k = len(tiny_vocab)
        im = np.zeros(k)
        im[3] = 1.0
        bundle = bundle_from(im, np.full((k, 5), 0.5))
        idx, traj = baseline_select("A", bundle, None, tiny_vocab)
        assert idx == 3
        assert np.array_equal(traj.poses, tiny_vocab.trajectories[3])

    def test_mode_b_perfect_perception_matches_teacher_selection(self, scenarios, tiny_vocab):
        for scn in scenarios[:6]:
            labels = metrics_mod.simulate_vocabulary(scn, tiny_vocab)
            teacher_pick = int(np.argmax(metrics_mod.pdm_score_array(labels.scores)))
            idx, _ = baseline_select("B", None, scn, tiny_vocab)
            assert idx == teacher_pick

    def test_mode_b_noisy_perception_disagreement_logged(self, scenarios, tiny_vocab,
                                                         world_cfg):
        obs_cfg = world_mod.ObservationConfig(dropout=0.3)
        differs = 0
        for i, scn in enumerate(scenarios[:10]):
            obs = world_mod.render_observation(scn, obs_cfg, 500 + i)
            perception = reconstruct_perception(obs, scn.ego_start, scn.route_centerline)
            noisy_idx, _ = baseline_select("B", None, perception, tiny_vocab,
                                           ego_pose=scn.ego_start)
            clean_idx, _ = baseline_select("B", None, scn, tiny_vocab)
            differs += noisy_idx != clean_idx
        print(f"noisy post-processing changed the selection in {differs}/10 scenarios")

    def test_unknown_mode_rejected(self, tiny_vocab):
        with pytest.raises(ConfigurationError):
            baseline_select("C", None, None, tiny_vocab)


class TestReconstruction:
    def test_clean_raster_reconstruction_is_faithful(self, scenario):
        obs_cfg = world_mod.ObservationConfig(dropout=0.0, amplitude=0.0)
        obs = world_mod.render_observation(scenario, obs_cfg, 0)
        perception = reconstruct_perception(obs, scenario.ego_start,
                                            scenario.route_centerline)
        assert len(perception.agents) >= 1
        from hydra_plan import geometry as geo

        # reconstructed polygon covers the ego and most of the nearby true road
        assert geo.points_in_polygon(
            np.array([scenario.ego_start.x, scenario.ego_start.y]),
            perception.drivable_area,
        )
        probes = scenario.expert_trajectory.poses[:20, :2]
        inside = geo.points_in_polygon(probes, perception.drivable_area)
        assert inside.mean() > 0.8

    def test_empty_raster_falls_back(self, scenario):
        obs = world_mod.Observation(
            bev_raster=np.zeros((64, 64, 2)), cell_size=1.0,
            ego_status=np.zeros(4),
        )
        perception = reconstruct_perception(obs, scenario.ego_start,
                                            scenario.route_centerline)
        assert len(perception.drivable_area) >= 3
        assert perception.agents == ()


class TestWeightPersistence:
    def test_round_trip(self, tmp_path):
        w = CostWeights(w1=0.0464, w2=0.215, w3=1.0, w4=4.64)
        path = tmp_path / "w.weights"
        save_weights(path, w)
        assert load_weights(path) == w
