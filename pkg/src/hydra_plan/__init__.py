"""Trajectory-vocabulary planning with rule-based metric distillation."""

from .errors import ConfigurationError, IntegrityError, NumericalError, PipelineError
from .world import (Agent, Observation, ObservationConfig, Perception, Pose, Scenario,
                    Trajectory, WorldConfig, agent_pose_at, generate_scenario,
                    load_scenarios, render_observation, save_scenarios)
from .vocab import (KinematicConfig, Vocabulary, kmeans_cluster, load_vocabulary,
                    nearest_vocab_index, sample_trajectories, save_vocabulary,
                    vocabulary_hash)
from .metrics import (MetricLimits, SubScores, TeacherLabels, comfort,
                      drivable_area_compliance, ego_progress, no_collision, pdm_score,
                      simulate_vocabulary, time_to_collision)
from .model import (AdamState, ImitationTarget, ModelConfig, PredictionBundle,
                    StudentModel, distillation_loss, forward, imitation_loss,
                    imitation_target, init_model, load_checkpoint, save_checkpoint,
                    train_step)
from .infer import (CostWeights, GridConfig, assemble_cost, baseline_select,
                    ensemble_subscores, grid_search_weights, reconstruct_perception,
                    select_trajectory)
from .train import (EvalReport, ExperimentConfig, OptimizerConfig, build_split,
                    build_vocabulary, evaluate, fit, load_experiment_config,
                    save_experiment_config, search_weights)
from .pipeline import PipelineRun, run_pipeline
from .estimator import HydraPlanner

__version__ = "0.1.0"
