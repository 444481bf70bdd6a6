"""Rule-based closed-loop metric teachers and their aggregate driving score.

Five sub-metrics are computed per trajectory against ground-truth world state:
no-collision (NC), drivable-area compliance (DAC), time-to-collision (TTC),
comfort (C), and ego progress (EP).  The first four are binary, EP is a ratio
in [0, 1].  The aggregate is

    score = NC * DAC * (5*TTC + 2*C + 5*EP) / 12

Mechanics worth knowing:

- collision checks sample the discrete trajectory timesteps; TTC additionally
  projects the ego straight ahead at its instantaneous speed over a 1 s
  horizon sampled at dt, including the zero-offset sample, so a realized
  collision always implies a TTC violation;
- all bounds are inclusive so boundary cases are deterministic;
- every function accepts any world object exposing `agents`, `drivable_area`,
  `route_centerline` and `expert_trajectory` (a ground-truth scenario or a
  perception reconstructed from the raster).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import ConfigurationError
from .validation import as_float_array
from .vocab import Vocabulary
from .world import Trajectory, agent_track

METRIC_COLUMNS = ("nc", "dac", "ttc", "comfort", "ep")
DEFAULT_EGO_DIMS = (2.3, 0.95)  # half length / half width, matches WorldConfig
PROGRESS_EPSILON = 0.1  # metres of expert progress below which EP is vacuous


@dataclass(frozen=True)
class MetricLimits:
    """Comfort bounds on finite-difference dynamics.

    Bounds are inclusive with a 1e-9 relative allowance, so a profile sitting
    exactly on a limit stays compliant under float rounding.
    """

    accel_max: float = 2.4
    jerk_max: float = 4.0
    yaw_rate_max: float = 0.95

    def __post_init__(self):
        if min(self.accel_max, self.jerk_max, self.yaw_rate_max) <= 0:
            raise ConfigurationError("comfort limits must be positive")


@dataclass(frozen=True)
class SubScores:
    nc: int
    dac: int
    ttc: int
    comfort: int
    ep: float

    def __post_init__(self):
        for name in ("nc", "dac", "ttc", "comfort"):
            if getattr(self, name) not in (0, 1):
                raise ConfigurationError(f"SubScores.{name} must be 0 or 1")
        object.__setattr__(self, "ep", float(min(1.0, max(0.0, self.ep))))

    def as_array(self):
        return np.array([self.nc, self.dac, self.ttc, self.comfort, self.ep], dtype=float)


@dataclass(frozen=True)
class TeacherLabels:
    """Per-scenario ground-truth sub-scores for every vocabulary entry."""

    scenario_id: str
    scores: np.ndarray  # (k, 5) in METRIC_COLUMNS order
    vocab_hash: str

    def __post_init__(self):
        scores = as_float_array(self.scores, "TeacherLabels.scores", ndim=2)
        if scores.shape[1] != len(METRIC_COLUMNS):
            raise ConfigurationError("TeacherLabels.scores must have 5 columns")
        binary = scores[:, :4]
        if not np.all((binary == 0.0) | (binary == 1.0)):
            raise ConfigurationError("TeacherLabels binary columns must be 0/1")
        if np.any(scores[:, 4] < 0.0) or np.any(scores[:, 4] > 1.0):
            raise ConfigurationError("TeacherLabels ep column must lie in [0, 1]")
        scores = scores.copy()
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return self.scores.shape[0]

    def entry(self, i) -> SubScores:
        nc, dac, ttc, comfort, ep = self.scores[i]
        return SubScores(int(nc), int(dac), int(ttc), int(comfort), float(ep))


def pdm_score(s: SubScores) -> float:
    """Aggregate driving score of one sub-score tuple."""
    return s.nc * s.dac * (5.0 * s.ttc + 2.0 * s.comfort + 5.0 * s.ep) / 12.0


def pdm_score_array(scores) -> np.ndarray:
    """Vectorized aggregate over (..., 5) sub-score arrays."""
    scores = np.asarray(scores, dtype=float)
    nc, dac, ttc, c, ep = (scores[..., i] for i in range(5))
    return nc * dac * (5.0 * ttc + 2.0 * c + 5.0 * ep) / 12.0


# ---------------------------------------------------------------------------
# collision kernels (shared by NC and TTC)
# ---------------------------------------------------------------------------

def _collision_grid(world, poses, dt, ego_dims, tau):
    """Collision flags on the (entry, timestep, projection-offset) grid.

    poses: (k, H, 3) world-frame trajectories.  Returns a boolean (k, H, S)
    array where S spans projection offsets {0, dt, ..., tau}; offset 0 is the
    trajectory state itself.
    """
    k, H, _ = poses.shape
    n_sub = int(round(tau / dt)) + 1
    agents = list(world.agents)
    if not agents:
        return np.zeros((k, H, n_sub), dtype=bool)

    disp = np.diff(poses[:, :, :2], axis=1)
    speed = np.hypot(disp[..., 0], disp[..., 1]) / dt  # (k, H-1)
    speed = np.concatenate([speed, speed[:, -1:]], axis=1)  # last step reuses previous
    offsets = np.arange(n_sub) * dt
    cos_h = np.cos(poses[:, :, 2])
    sin_h = np.sin(poses[:, :, 2])
    ego = np.empty((k, H, n_sub, 3))
    ego[..., 0] = poses[:, :, 0][..., None] + speed[..., None] * offsets * cos_h[..., None]
    ego[..., 1] = poses[:, :, 1][..., None] + speed[..., None] * offsets * sin_h[..., None]
    ego[..., 2] = poses[:, :, 2][..., None]

    times = np.arange(H)[:, None] * dt + offsets[None, :]  # (H, S)
    ego_radius = float(np.hypot(*ego_dims))
    hit = np.zeros((k, H, n_sub), dtype=bool)
    for agent in agents:
        track = agent_track(agent, times)  # (H, S, 3)
        radius = ego_radius + float(np.hypot(agent.half_length, agent.half_width))
        dx = ego[..., 0] - track[None, ..., 0]
        dy = ego[..., 1] - track[None, ..., 1]
        near = (dx * dx + dy * dy) <= radius * radius
        if not near.any():
            continue
        ki, ti, si = np.nonzero(near)
        overlap = geo.rects_overlap(
            ego[ki, ti, si],
            ego_dims,
            track[ti, si],
            (agent.half_length, agent.half_width),
        )
        hit[ki, ti, si] |= overlap
    return hit


def subscore_batch(world, poses, dt, ego_dims=DEFAULT_EGO_DIMS,
                   limits: MetricLimits = MetricLimits(), tau: float = 1.0) -> np.ndarray:
    """All five sub-metrics for a batch of world-frame trajectories.

    poses: (k, H, 3).  Returns (k, 5) in METRIC_COLUMNS order.
    """
    poses = as_float_array(poses, "poses", ndim=3)
    k = poses.shape[0]
    hit = _collision_grid(world, poses, dt, ego_dims, tau)
    nc = ~hit[:, :, 0].any(axis=1)
    ttc = ~hit.any(axis=(1, 2))

    corners = geo.rect_corners(poses, *ego_dims)  # (k, H, 4, 2)
    inside = geo.points_in_polygon(corners.reshape(k, -1, 2), world.drivable_area)
    dac = inside.all(axis=1)

    comfort_ok = _comfort_mask(poses, dt, limits)
    ep = _progress_batch(world, poses)

    out = np.empty((k, 5))
    out[:, 0] = nc.astype(float)
    out[:, 1] = dac.astype(float)
    out[:, 2] = ttc.astype(float)
    out[:, 3] = comfort_ok.astype(float)
    out[:, 4] = ep
    return out


def _comfort_mask(poses, dt, limits, rtol=1e-9):
    v = np.diff(poses[:, :, :2], axis=1) / dt
    a = np.diff(v, axis=1) / dt
    j = np.diff(a, axis=1) / dt
    yaw_rate = geo.wrap_angle(np.diff(poses[:, :, 2], axis=1)) / dt
    ok = np.all(np.hypot(a[..., 0], a[..., 1]) <= limits.accel_max * (1 + rtol), axis=1)
    ok &= np.all(np.hypot(j[..., 0], j[..., 1]) <= limits.jerk_max * (1 + rtol), axis=1)
    ok &= np.all(np.abs(yaw_rate) <= limits.yaw_rate_max * (1 + rtol), axis=1)
    return ok


def route_progress(route_centerline, poses) -> np.ndarray:
    """Raw arc-length progress of (k, H, 3) trajectories along the route."""
    endpoints = np.stack([poses[:, 0, :2], poses[:, -1, :2]], axis=1)  # (k, 2, 2)
    arcs, _ = geo.project_to_polyline(endpoints, route_centerline)
    return arcs[:, 1] - arcs[:, 0]


def _progress_batch(world, poses):
    expert = getattr(world, "expert_trajectory", None)
    raw = route_progress(world.route_centerline, poses)
    if expert is None:
        # no expert reference: normalize by the best progress in the batch
        best = float(raw.max())
        if best <= PROGRESS_EPSILON:
            return np.ones(len(raw))
        return np.clip(raw / best, 0.0, 1.0)
    ref = float(route_progress(world.route_centerline, expert.poses[None])[0])
    if ref <= PROGRESS_EPSILON:
        return np.ones(len(raw))
    return np.clip(raw / ref, 0.0, 1.0)


# ---------------------------------------------------------------------------
# single-trajectory operations
# ---------------------------------------------------------------------------

def no_collision(world, traj: Trajectory, ego_dims=DEFAULT_EGO_DIMS) -> int:
    """1 iff the ego footprint never overlaps an agent at a trajectory timestep."""
    hit = _collision_grid(world, traj.poses[None], traj.dt, ego_dims, tau=0.0)
    return int(not hit[0, :, 0].any())


def drivable_area_compliance(world, traj: Trajectory, ego_dims=DEFAULT_EGO_DIMS) -> int:
    """1 iff all four footprint corners stay inside the drivable area."""
    corners = geo.rect_corners(traj.poses, *ego_dims).reshape(-1, 2)
    return int(np.all(geo.points_in_polygon(corners, world.drivable_area)))


def time_to_collision(world, traj: Trajectory, tau: float = 1.0,
                      ego_dims=DEFAULT_EGO_DIMS) -> int:
    """1 iff constant-velocity projection over `tau` finds no collision."""
    if tau <= 0:
        raise ConfigurationError("time_to_collision: tau must be positive")
    hit = _collision_grid(world, traj.poses[None], traj.dt, ego_dims, tau)
    return int(not hit.any())


def comfort(traj: Trajectory, limits: MetricLimits = MetricLimits()) -> int:
    """1 iff finite-difference accel, jerk and yaw rate stay within limits."""
    return int(_comfort_mask(traj.poses[None], traj.dt, limits)[0])


def ego_progress(world, traj: Trajectory) -> float:
    """Arc-length progress along the route relative to the expert, in [0, 1]."""
    if len(world.route_centerline) < 2:
        raise ConfigurationError("ego_progress: route_centerline needs >= 2 vertices")
    return float(_progress_batch(world, traj.poses[None])[0])


def subscores(world, traj: Trajectory, ego_dims=DEFAULT_EGO_DIMS,
              limits: MetricLimits = MetricLimits(), tau: float = 1.0) -> SubScores:
    """All five sub-metrics of one world-frame trajectory."""
    row = subscore_batch(world, traj.poses[None], traj.dt, ego_dims, limits, tau)[0]
    return SubScores(int(row[0]), int(row[1]), int(row[2]), int(row[3]), float(row[4]))


def simulate_vocabulary(scenario, vocab: Vocabulary, ego_dims=DEFAULT_EGO_DIMS,
                        limits: MetricLimits = MetricLimits(), tau: float = 1.0) -> TeacherLabels:
    """Offline simulation of every vocabulary entry in a scenario.

    Entries are mapped from the ego frame into the scenario frame via
    `ego_start` before scoring.
    """
    if len(vocab) == 0:
        raise ConfigurationError("simulate_vocabulary: empty vocabulary")
    from .vocab import vocabulary_hash  # local import to keep module load light

    world_poses = geo.transform_to_world(vocab.trajectories, scenario.ego_start.as_array())
    scores = subscore_batch(scenario, world_poses, vocab.dt, ego_dims, limits, tau)
    return TeacherLabels(scenario_id=scenario.id, scores=scores,
                         vocab_hash=vocabulary_hash(vocab))


def simulate_many(scenarios, vocab: Vocabulary, ego_dims=DEFAULT_EGO_DIMS,
                  limits: MetricLimits = MetricLimits(), tau: float = 1.0,
                  n_jobs: int = 2) -> list:
    """`simulate_vocabulary` over many scenarios, fanned out across workers.

    Output order always follows the input order regardless of scheduling.
    """
    if len(scenarios) < 32 or n_jobs <= 1:
        return [simulate_vocabulary(s, vocab, ego_dims, limits, tau) for s in scenarios]
    from joblib import Parallel, delayed

    chunks = np.array_split(np.arange(len(scenarios)), n_jobs * 4)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_simulate_chunk)([scenarios[i] for i in chunk], vocab, ego_dims, limits, tau)
        for chunk in chunks if len(chunk)
    )
    return [label for chunk in results for label in chunk]


def _simulate_chunk(scenarios, vocab, ego_dims, limits, tau):
    return [simulate_vocabulary(s, vocab, ego_dims, limits, tau) for s in scenarios]


# ---------------------------------------------------------------------------
# label store: one float block for all scenarios plus a JSON index
# ---------------------------------------------------------------------------

def save_labels(prefix, labels: list) -> str:
    """Persist TeacherLabels as `<prefix>.npy` + `<prefix>.json`; returns the store hash."""
    if not labels:
        raise ConfigurationError("save_labels: nothing to save")
    hashes = {lab.vocab_hash for lab in labels}
    if len(hashes) != 1:
        raise ConfigurationError("save_labels: labels disagree on vocabulary hash")
    block = np.stack([lab.scores for lab in labels])
    np.save(str(prefix) + ".npy", block)
    digest = hashlib.sha256(block.tobytes()).hexdigest()
    index = {
        "columns": list(METRIC_COLUMNS),
        "scenario_ids": [lab.scenario_id for lab in labels],
        "shape": list(block.shape),
        "store_hash": digest,
        "vocab_hash": hashes.pop(),
    }
    with open(str(prefix) + ".json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def load_labels(prefix, expected_vocab_hash: str | None = None):
    """Load a label store; returns (scores (n, k, 5), scenario_ids, vocab_hash).

    Verifies the stored block against its recorded hash and, when given,
    against the expected vocabulary hash.
    """
    from .errors import IntegrityError

    with open(str(prefix) + ".json") as fh:
        index = json.load(fh)
    block = np.load(str(prefix) + ".npy")
    digest = hashlib.sha256(block.tobytes()).hexdigest()
    if digest != index["store_hash"]:
        raise IntegrityError(f"label store {prefix} does not match its recorded hash")
    if expected_vocab_hash is not None and index["vocab_hash"] != expected_vocab_hash:
        raise IntegrityError(
            f"label store {prefix} was built for vocabulary {index['vocab_hash'][:12]}, "
            f"expected {expected_vocab_hash[:12]}"
        )
    return block, list(index["scenario_ids"]), index["vocab_hash"]
