"""Dataset construction, training loop and evaluation harness.

A run is fully determined by its ExperimentConfig: scenario seeds are
consecutive disjoint blocks per split, every stochastic component draws from
its own salted generator, and all artifacts are written in formats with no
timestamps so identical configs reproduce byte-identical outputs.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import geometry as geo
from . import infer as infer_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import vocab as vocab_mod
from . import world as world_mod
from .errors import ConfigurationError
from .infer import CostWeights, GridConfig
from .metrics import METRIC_COLUMNS, MetricLimits, TeacherLabels
from .model import AdamState, ModelConfig, StudentModel, TrainBatch
from .vocab import KinematicConfig, Vocabulary
from .world import ObservationConfig, WorldConfig

_SHUFFLE_SALT = 0x5463F200

DISTILLATION_MODES = ("multi-target", "pdm-only", "none")
INFERENCE_MODES = ("argmax-imitation", "post-process", "assembled-cost",
                   "assembled-cost+grid", "oracle-best")

# report rows: name -> (distillation mode, inference mode)
ABLATION_ROWS = {
    "imitation-only": ("none", "argmax-imitation"),
    "post-process": ("none", "post-process"),
    "pdm-only": ("pdm-only", "assembled-cost"),
    "multi-target": ("multi-target", "assembled-cost"),
    "multi-target+w": ("multi-target", "assembled-cost+grid"),
    "multi-target+w+ens": ("multi-target", "assembled-cost+grid"),
}


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.weight_decay < 0:
            raise ConfigurationError("invalid optimizer configuration")


@dataclass(frozen=True)
class ExperimentConfig:
    base_seed: int = 0
    n_train: int = 800
    n_val: int = 100
    n_test: int = 200
    world: WorldConfig = field(default_factory=WorldConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    kinematics: KinematicConfig = field(default_factory=KinematicConfig)
    vocab_samples: int = 20000
    vocab_size: int = 256
    vocab_seed: int = 0
    heading_weight: float = 1.0
    kmeans_max_iters: int = 50
    kmeans_tol: float = 1e-6
    imitation_sigma: float | None = None  # None -> median pairwise vocab distance
    encoder_hidden: int = 128
    n_tokens: int = 4
    embed_dim: int = 64
    traj_hidden: int = 128
    pool: int = 2
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    kd_weight: float = 1.0
    distillation: str = "multi-target"
    inference: str = "assembled-cost"
    model_seeds: tuple = (0, 1, 2)
    cost_weights: CostWeights = field(default_factory=CostWeights)
    grid_points: int = 4
    ablations: tuple = tuple(ABLATION_ROWS)
    tau: float = 1.0
    limits: MetricLimits = field(default_factory=MetricLimits)

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError("split sizes must be positive")
        if self.distillation not in DISTILLATION_MODES:
            raise ConfigurationError(f"unknown distillation mode {self.distillation!r}")
        if self.inference not in INFERENCE_MODES:
            raise ConfigurationError(f"unknown inference mode {self.inference!r}")
        for row in self.ablations:
            if row not in ABLATION_ROWS:
                raise ConfigurationError(f"unknown ablation row {row!r}")
        if self.kinematics.horizon_steps != self.world.horizon_steps:
            raise ConfigurationError("kinematics and world disagree on horizon")
        object.__setattr__(self, "model_seeds", tuple(int(s) for s in self.model_seeds))
        object.__setattr__(self, "ablations", tuple(self.ablations))

    def split_seeds(self, split):
        sizes = {"train": self.n_train, "val": self.n_val, "test": self.n_test}
        offsets = {"train": 0, "val": self.n_train, "test": self.n_train + self.n_val}
        if split not in sizes:
            raise ConfigurationError(f"unknown split {split!r}")
        start = self.base_seed + offsets[split]
        return list(range(start, start + sizes[split]))

    def model_config(self, distillation=None) -> ModelConfig:
        mode = distillation or self.distillation
        heads = ("pdm",) if mode == "pdm-only" else METRIC_COLUMNS
        return ModelConfig(
            grid_size=self.observation.grid_size,
            pool=self.pool,
            encoder_hidden=self.encoder_hidden,
            n_tokens=self.n_tokens,
            embed_dim=self.embed_dim,
            traj_hidden=self.traj_hidden,
            horizon_steps=self.world.horizon_steps,
            vocab_size=self.vocab_size,
            heads=heads,
        )

    def to_dict(self):
        d = asdict(self)
        d["world"] = self.world.to_dict()
        d["observation"] = self.observation.to_dict()
        d["kinematics"] = self.kinematics.to_dict()
        d["optimizer"] = asdict(self.optimizer)
        d["cost_weights"] = self.cost_weights.to_dict()
        d["limits"] = asdict(self.limits)
        return d


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()
    ).hexdigest()


# ---------------------------------------------------------------------------
# structured text config (INI sections mirroring the dataclass groups)
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {"road_width", "segment_length", "agent_count", "agent_speed",
                 "ego_cruise_speed", "ego_start_speed", "accel", "initial_speed",
                 "model_seeds", "ablations"}


def _coerce(raw: str):
    raw = raw.strip()
    if "," in raw:
        return tuple(_coerce(part) for part in raw.split(","))
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", ""):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_experiment_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a key/value text file (INI sections)."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)

    def section(name):
        return {k: _coerce(v) for k, v in parser[name].items()} if parser.has_section(name) else {}

    kwargs = section("run")
    world_kwargs = section("world")
    obs_kwargs = section("observation")
    kin_kwargs = section("kinematics")
    opt_kwargs = section("optimizer")
    weight_kwargs = section("cost_weights")
    limit_kwargs = section("limits")
    for name in ("horizon_steps", "dt"):
        if name in world_kwargs and name not in kin_kwargs:
            kin_kwargs[name] = world_kwargs[name]
    if "model_seeds" in kwargs and not isinstance(kwargs["model_seeds"], tuple):
        kwargs["model_seeds"] = (kwargs["model_seeds"],)
    if "ablations" in kwargs and not isinstance(kwargs["ablations"], tuple):
        kwargs["ablations"] = (kwargs["ablations"],)
    return ExperimentConfig(
        world=WorldConfig(**world_kwargs),
        observation=ObservationConfig(**obs_kwargs),
        kinematics=KinematicConfig(**kin_kwargs),
        optimizer=OptimizerConfig(**opt_kwargs),
        cost_weights=CostWeights(**weight_kwargs) if weight_kwargs else CostWeights(),
        limits=MetricLimits(**limit_kwargs) if limit_kwargs else MetricLimits(),
        **kwargs,
    )


def save_experiment_config(path, config: ExperimentConfig) -> None:
    parser = configparser.ConfigParser()
    sections = ("world", "observation", "kinematics", "optimizer", "cost_weights", "limits")
    run = {}
    for key, value in config.to_dict().items():
        if key in sections:
            parser[key] = {k: _format_value(v) for k, v in value.items()}
        else:
            run[key] = _format_value(value)
    parser["run"] = run
    with open(path, "w") as fh:
        parser.write(fh)


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# dataset build
# ---------------------------------------------------------------------------

@dataclass
class SplitData:
    """In-memory view of one dataset split."""

    split: str
    scenarios: list
    rasters: np.ndarray  # (n, G, G, 2)
    statuses: np.ndarray  # (n, 4)
    targets: np.ndarray  # (n, k)
    labels: np.ndarray  # (n, k, 5)
    vocab_hash: str
    cell_size: float = 1.0

    def __len__(self):
        return len(self.scenarios)

    def observation(self, i) -> world_mod.Observation:
        return world_mod.Observation(
            bev_raster=self.rasters[i],
            cell_size=self.cell_size,
            ego_status=self.statuses[i],
        )

    def entry_pdm(self) -> np.ndarray:
        return metrics_mod.pdm_score_array(self.labels)


def build_vocabulary(config: ExperimentConfig) -> Vocabulary:
    poses = vocab_mod.sample_trajectory_array(config.vocab_samples, config.kinematics,
                                              config.vocab_seed)
    return vocab_mod.kmeans_cluster(
        poses, config.vocab_size,
        max_iters=config.kmeans_max_iters, tol=config.kmeans_tol,
        seed=config.vocab_seed, heading_weight=config.heading_weight,
        dt=config.kinematics.dt,
    )


def resolve_sigma(config: ExperimentConfig, vocab: Vocabulary) -> float:
    if config.imitation_sigma is not None:
        return float(config.imitation_sigma)
    return vocab_mod.median_pairwise_distance(vocab)


def build_split(config: ExperimentConfig, split: str, vocab: Vocabulary,
                with_labels: bool = True) -> SplitData:
    """Generate scenarios, observations, imitation targets and teacher labels."""
    sigma = resolve_sigma(config, vocab)
    vhash = vocab_mod.vocabulary_hash(vocab)
    scenarios = [world_mod.generate_scenario(s, config.world) for s in config.split_seeds(split)]
    rasters = []
    statuses = []
    targets = []
    ego_dims = (config.world.ego_half_length, config.world.ego_half_width)
    for seed, scenario in zip(config.split_seeds(split), scenarios):
        obs = world_mod.render_observation(scenario, config.observation, seed)
        rasters.append(obs.bev_raster)
        statuses.append(obs.ego_status)
        expert_ego = geo.transform_to_frame(
            scenario.expert_trajectory.poses, scenario.ego_start.as_array()
        )
        target = model_mod.imitation_target(
            vocab, world_mod.Trajectory(expert_ego, vocab.dt), sigma
        )
        targets.append(target.y)
    labels = []
    if with_labels:
        labels = [
            lab.scores for lab in metrics_mod.simulate_many(
                scenarios, vocab, ego_dims=ego_dims, limits=config.limits, tau=config.tau
            )
        ]
    n = len(scenarios)
    k = len(vocab)
    return SplitData(
        split=split,
        scenarios=scenarios,
        rasters=np.stack(rasters),
        statuses=np.stack(statuses),
        targets=np.stack(targets),
        labels=np.stack(labels) if with_labels else np.zeros((n, k, 5)),
        vocab_hash=vhash,
        cell_size=config.observation.cell_size,
    )


def save_split(out_dir, data: SplitData) -> None:
    os.makedirs(out_dir, exist_ok=True)
    world_mod.save_scenarios(
        os.path.join(out_dir, data.split + world_mod.SCENARIO_FILE_SUFFIX), data.scenarios
    )
    np.save(os.path.join(out_dir, f"obs_{data.split}.npy"), data.rasters)
    np.save(os.path.join(out_dir, f"status_{data.split}.npy"), data.statuses)
    np.save(os.path.join(out_dir, f"targets_{data.split}.npy"), data.targets)
    label_objs = [
        TeacherLabels(scenario_id=s.id, scores=data.labels[i], vocab_hash=data.vocab_hash)
        for i, s in enumerate(data.scenarios)
    ]
    metrics_mod.save_labels(os.path.join(out_dir, f"labels_{data.split}"), label_objs)


def load_split(out_dir, split: str, cell_size: float,
               expected_vocab_hash: str | None = None) -> SplitData:
    scenarios = world_mod.load_scenarios(
        os.path.join(out_dir, split + world_mod.SCENARIO_FILE_SUFFIX)
    )
    labels, ids, vhash = metrics_mod.load_labels(
        os.path.join(out_dir, f"labels_{split}"), expected_vocab_hash
    )
    if ids != [s.id for s in scenarios]:
        from .errors import IntegrityError

        raise IntegrityError(f"label store for split {split!r} does not match scenario ids")
    return SplitData(
        split=split,
        scenarios=scenarios,
        rasters=np.load(os.path.join(out_dir, f"obs_{split}.npy")),
        statuses=np.load(os.path.join(out_dir, f"status_{split}.npy")),
        targets=np.load(os.path.join(out_dir, f"targets_{split}.npy")),
        labels=labels,
        vocab_hash=vhash,
        cell_size=cell_size,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    final: StudentModel
    best: StudentModel
    best_val_pdm: float
    val_pdm_epoch0: float
    curve: list  # rows: dict(epoch, loss, imitation, distillation, val_pdm)


def _labels_for_mode(labels, mode):
    if mode == "pdm-only":
        return metrics_mod.pdm_score_array(labels)[..., None]
    return labels


def fit(config: ExperimentConfig, train_data: SplitData, val_data: SplitData,
        vocab: Vocabulary, seed: int, distillation: str | None = None) -> FitResult:
    """Train one student; checkpoints are selected by validation mean score."""
    mode = distillation or config.distillation
    if train_data.vocab_hash != val_data.vocab_hash:
        raise ConfigurationError("train/val splits disagree on vocabulary hash")
    mcfg = config.model_config(mode)
    model = model_mod.init_model(mcfg, seed, vocab_hash=train_data.vocab_hash)
    opt = AdamState(lr=config.optimizer.lr, weight_decay=config.optimizer.weight_decay)
    kd_weight = 0.0 if mode == "none" else config.kd_weight
    vocab_flat = vocab.flat()
    labels = _labels_for_mode(train_data.labels, mode)
    n = len(train_data)
    batch_size = min(config.optimizer.batch_size, n)
    # pooling is data-only preprocessing; do it once for the whole split
    pooled = model_mod._pool_rasters(train_data.rasters, mcfg.pool)
    val_pdm0 = _validation_pdm(model, val_data, vocab_flat, config, mode)
    best_val = val_pdm0
    best_params = model.params.copy()
    curve = []
    for epoch in range(1, config.optimizer.epochs + 1):
        rng = np.random.default_rng([_SHUFFLE_SALT, int(seed), epoch])
        order = rng.permutation(n)
        reports = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = TrainBatch(
                rasters=pooled[idx],
                statuses=train_data.statuses[idx],
                targets=train_data.targets[idx],
                labels=labels[idx],
                vocab_flat=vocab_flat,
            )
            reports.append(model_mod.train_step(model, opt, batch, kd_weight))
        val_pdm = _validation_pdm(model, val_data, vocab_flat, config, mode)
        curve.append({
            "epoch": epoch,
            "loss": float(np.mean([r["loss"] for r in reports])),
            "imitation": float(np.mean([r["imitation"] for r in reports])),
            "distillation": float(np.mean([r["distillation"] for r in reports])),
            "val_pdm": val_pdm,
        })
        if val_pdm > best_val:
            best_val = val_pdm
            best_params = model.params.copy()
    best = StudentModel(mcfg, params=best_params, vocab_hash=model.vocab_hash)
    return FitResult(final=model, best=best, best_val_pdm=best_val,
                     val_pdm_epoch0=val_pdm0, curve=curve)


def _bundles_for_split(model: StudentModel, data: SplitData, vocab_flat) -> list:
    imitation, metric, _ = model_mod.forward_arrays(model, data.rasters, data.statuses,
                                                     vocab_flat)
    return [
        model_mod.PredictionBundle(imitation=imitation[i], metric_scores=metric[i])
        for i in range(len(data))
    ]


def _validation_pdm(model, val_data, vocab_flat, config, mode) -> float:
    """Mean teacher score of the selections under the training-time policy."""
    bundles = _bundles_for_split(model, val_data, vocab_flat)
    entry_pdm = val_data.entry_pdm()
    if mode == "none":
        picked = [int(np.argmax(b.imitation)) for b in bundles]
    else:
        picked = [
            int(np.argmin(infer_mod.assemble_cost(b, config.cost_weights))) for b in bundles
        ]
    return float(np.mean([entry_pdm[i, j] for i, j in enumerate(picked)])) * 100.0


def save_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "imitation",
                                                "distillation", "val_pdm"])
        writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Teacher-metric means (x100) plus per-scenario records.

    Records hold exactly what the means are computed from, so the means are
    always recomputable; student scores never appear here.
    """

    split: str
    inference: str
    records: list  # dicts: scenario_id, index, nc, dac, ttc, comfort, ep, score

    @property
    def means(self):
        out = {}
        for key in (*METRIC_COLUMNS, "score"):
            out[key] = float(np.mean([r[key] for r in self.records])) * 100.0
        return out

    def to_json(self) -> str:
        payload = {
            "split": self.split,
            "inference": self.inference,
            "n_scenarios": len(self.records),
            "means_x100": {k: v for k, v in sorted(self.means.items())},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def save(self, prefix) -> None:
        with open(str(prefix) + ".csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["scenario_id", "index", *METRIC_COLUMNS, "score"]
            )
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in r.items()})
        with open(str(prefix) + ".json", "w") as fh:
            fh.write(self.to_json())


def evaluate(models, model_weights, data: SplitData, vocab: Vocabulary, inference: str,
             config: ExperimentConfig, cost_weights: CostWeights | None = None) -> EvalReport:
    """Score the selections of an (optionally ensembled) model on a split.

    The report is built from fresh teacher-metric computations on each
    selected trajectory, never from student scores.
    """
    if inference not in INFERENCE_MODES:
        raise ConfigurationError(f"unknown inference mode {inference!r}")
    if inference == "assembled-cost+grid" and cost_weights is None:
        raise ConfigurationError("assembled-cost+grid requires grid-searched weights")
    models = list(models)
    for m in models:
        if m.vocab_hash != data.vocab_hash:
            raise ConfigurationError("checkpoint vocabulary hash does not match dataset")
    if len(models) > 1 and model_weights is None:
        model_weights = np.full(len(models), 1.0 / len(models))
    vocab_flat = vocab.flat()
    per_model = [_bundles_for_split(m, data, vocab_flat) for m in models]
    weights = cost_weights or config.cost_weights
    ego_dims = (config.world.ego_half_length, config.world.ego_half_width)
    entry_pdm = data.entry_pdm()

    records = []
    for i, scenario in enumerate(data.scenarios):
        bundles = [bundles_i[i] for bundles_i in per_model]
        if len(bundles) == 1:
            bundle = bundles[0]
        elif bundles:
            bundle = infer_mod.ensemble_subscores(bundles, model_weights)
        else:
            bundle = None
        if inference == "argmax-imitation":
            idx, _ = infer_mod.baseline_select("A", bundle, scenario, vocab)
        elif inference in ("assembled-cost", "assembled-cost+grid"):
            idx, _ = infer_mod.select_trajectory(bundle, weights, vocab)
        elif inference == "post-process":
            obs = data.observation(i)
            perception = infer_mod.reconstruct_perception(
                obs, scenario.ego_start, scenario.route_centerline
            )
            idx, _ = infer_mod.baseline_select(
                "B", None, perception, vocab, ego_pose=scenario.ego_start,
                ego_dims=ego_dims, limits=config.limits, tau=config.tau,
            )
        else:  # oracle-best
            idx = int(np.argmax(entry_pdm[i]))
        world_poses = geo.transform_to_world(
            vocab.trajectories[idx], scenario.ego_start.as_array()
        )
        sub = metrics_mod.subscore_batch(
            scenario, world_poses[None], vocab.dt, ego_dims, config.limits, config.tau
        )[0]
        records.append({
            "scenario_id": scenario.id,
            "index": idx,
            **{name: float(sub[j]) for j, name in enumerate(METRIC_COLUMNS)},
            "score": float(metrics_mod.pdm_score_array(sub)),
        })
    return EvalReport(split=data.split, inference=inference, records=records)


def search_weights(model_or_models, val_data: SplitData, vocab: Vocabulary,
                   grid: GridConfig, model_weights=None) -> CostWeights:
    """Grid-search cost weights on the validation split for one model or an ensemble."""
    models = model_or_models if isinstance(model_or_models, (list, tuple)) else [model_or_models]
    vocab_flat = vocab.flat()
    per_model = [_bundles_for_split(m, val_data, vocab_flat) for m in models]
    if len(models) == 1:
        bundles = per_model[0]
    else:
        bundles = [
            infer_mod.ensemble_subscores([pm[i] for pm in per_model], model_weights)
            for i in range(len(val_data))
        ]
    return infer_mod.grid_search_weights(bundles, val_data.entry_pdm(), grid)
