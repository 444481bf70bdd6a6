"""Scikit-learn style facade over the full training pipeline.

`HydraPlanner` behaves like an estimator: hyperparameters are constructor
arguments, `fit` consumes a list of ground-truth scenarios (building the
vocabulary, the teacher labels and the trained scorer), `predict` returns one
world-frame trajectory per scenario and `score` reports the mean teacher
driving score, so the planner slots into sklearn tooling (`clone`,
`get_params`, grid searches over its hyperparameters, ...).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import geometry as geo
from . import infer as infer_mod
from . import metrics as metrics_mod
from . import train as train_mod
from .errors import ConfigurationError
from .train import ExperimentConfig, OptimizerConfig
from .world import ObservationConfig, Scenario, WorldConfig


class HydraPlanner(BaseEstimator):
    """Multimodal trajectory planner with rule-based metric distillation.

    Parameters mirror the experiment config; `random_state` seeds model
    initialization, minibatch shuffling and raster noise.
    """

    def __init__(self, vocab_size=64, vocab_samples=4000, embed_dim=32,
                 encoder_hidden=64, traj_hidden=64, n_tokens=4, epochs=20,
                 batch_size=64, learning_rate=1e-4, kd_weight=1.0,
                 distillation="multi-target", inference="assembled-cost",
                 grid_size=32, cell_size=2.0, dropout=0.3, amplitude=0.15,
                 val_fraction=0.15, random_state=0):
        self.vocab_size = vocab_size
        self.vocab_samples = vocab_samples
        self.embed_dim = embed_dim
        self.encoder_hidden = encoder_hidden
        self.traj_hidden = traj_hidden
        self.n_tokens = n_tokens
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.kd_weight = kd_weight
        self.distillation = distillation
        self.inference = inference
        self.grid_size = grid_size
        self.cell_size = cell_size
        self.dropout = dropout
        self.amplitude = amplitude
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            base_seed=self.random_state,
            n_train=1, n_val=1, n_test=1,  # splits are provided explicitly here
            observation=ObservationConfig(grid_size=self.grid_size, cell_size=self.cell_size,
                                          dropout=self.dropout, amplitude=self.amplitude),
            vocab_samples=self.vocab_samples,
            vocab_size=self.vocab_size,
            vocab_seed=self.random_state,
            encoder_hidden=self.encoder_hidden,
            n_tokens=self.n_tokens,
            embed_dim=self.embed_dim,
            traj_hidden=self.traj_hidden,
            optimizer=OptimizerConfig(lr=self.learning_rate, epochs=self.epochs,
                                      batch_size=self.batch_size),
            kd_weight=self.kd_weight,
            distillation=self.distillation,
            inference=self.inference,
        )

    @staticmethod
    def _check_scenarios(scenarios):
        scenarios = list(scenarios)
        if not scenarios:
            raise ConfigurationError("HydraPlanner: at least one scenario is required")
        for s in scenarios:
            if not isinstance(s, Scenario):
                raise ConfigurationError(
                    f"HydraPlanner expects Scenario inputs, got {type(s).__name__}"
                )
        return scenarios

    def _split_arrays(self, config, scenarios, with_labels=True):
        rasters, statuses, targets, labels = [], [], [], []
        ego_dims = (config.world.ego_half_length, config.world.ego_half_width)
        sigma = train_mod.resolve_sigma(config, self.vocab_)
        for i, scenario in enumerate(scenarios):
            obs = train_mod.world_mod.render_observation(
                scenario, config.observation, self.random_state + i
            )
            rasters.append(obs.bev_raster)
            statuses.append(obs.ego_status)
            expert_ego = geo.transform_to_frame(
                scenario.expert_trajectory.poses, scenario.ego_start.as_array()
            )
            target = train_mod.model_mod.imitation_target(
                self.vocab_, train_mod.world_mod.Trajectory(expert_ego, self.vocab_.dt), sigma
            )
            targets.append(target.y)
            if with_labels:
                labels.append(metrics_mod.simulate_vocabulary(
                    scenario, self.vocab_, ego_dims=ego_dims,
                    limits=config.limits, tau=config.tau).scores)
        n, k = len(scenarios), len(self.vocab_)
        return train_mod.SplitData(
            split="user",
            scenarios=scenarios,
            rasters=np.stack(rasters),
            statuses=np.stack(statuses),
            targets=np.stack(targets),
            labels=np.stack(labels) if with_labels else np.zeros((n, k, 5)),
            vocab_hash=self.vocab_hash_,
            cell_size=config.observation.cell_size,
        )

    def fit(self, X, y=None):
        """Fit on a list of Scenario objects; y is ignored (present for API
        compatibility — supervision comes from the scenarios themselves)."""
        scenarios = self._check_scenarios(X)
        config = self._experiment_config()
        self.vocab_ = train_mod.build_vocabulary(config)
        self.vocab_hash_ = train_mod.vocab_mod.vocabulary_hash(self.vocab_)
        n_val = max(1, int(round(len(scenarios) * self.val_fraction))) \
            if len(scenarios) > 1 else 0
        train_scn = scenarios[:len(scenarios) - n_val] if n_val else scenarios
        val_scn = scenarios[len(scenarios) - n_val:] if n_val else scenarios
        train_data = self._split_arrays(config, train_scn)
        val_data = self._split_arrays(config, val_scn) if n_val else train_data
        result = train_mod.fit(config, train_data, val_data, self.vocab_,
                               seed=self.random_state)
        self.model_ = result.best
        self.curve_ = result.curve
        self.cost_weights_ = config.cost_weights
        if self.inference == "assembled-cost+grid":
            self.cost_weights_ = train_mod.search_weights(
                self.model_, val_data, self.vocab_, infer_mod.GridConfig()
            )
        self.config_ = config
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("HydraPlanner is not fitted; call fit first")

    def predict_bundle(self, X):
        """PredictionBundle per scenario (student scores for every entry)."""
        self._require_fitted()
        scenarios = self._check_scenarios(X)
        data = self._split_arrays(self.config_, scenarios, with_labels=False)
        return train_mod._bundles_for_split(self.model_, data, self.vocab_.flat())

    def predict(self, X):
        """Selected world-frame trajectory for each scenario."""
        self._require_fitted()
        scenarios = self._check_scenarios(X)
        bundles = self.predict_bundle(scenarios)
        out = []
        for scenario, bundle in zip(scenarios, bundles):
            if self.inference == "argmax-imitation" or self.distillation == "none":
                idx = int(np.argmax(bundle.imitation))
            else:
                idx, _ = infer_mod.select_trajectory(bundle, self.cost_weights_, self.vocab_)
            poses = geo.transform_to_world(
                self.vocab_.trajectories[idx], scenario.ego_start.as_array()
            )
            out.append(train_mod.world_mod.Trajectory(poses, self.vocab_.dt))
        return out

    def score(self, X, y=None):
        """Mean teacher driving score of the selected trajectories, in [0, 1]."""
        self._require_fitted()
        scenarios = self._check_scenarios(X)
        trajectories = self.predict(scenarios)
        config = self.config_
        ego_dims = (config.world.ego_half_length, config.world.ego_half_width)
        scores = []
        for scenario, traj in zip(scenarios, trajectories):
            sub = metrics_mod.subscores(scenario, traj, ego_dims=ego_dims,
                                        limits=config.limits, tau=config.tau)
            scores.append(metrics_mod.pdm_score(sub))
        return float(np.mean(scores))
