"""Synthetic 2D driving world.

A scenario is a single curved road segment (simple polygon) with a route
centerline, a handful of constant-velocity rectangular agents, and an expert
trajectory produced by a pure-pursuit follower with a curvature-aware speed
profile.  The generator gives rule-based teachers ground-truth polygons while
the learned planner only ever sees a degraded ego-centric raster, so the
teacher/student information asymmetry is real.

All randomness flows through `numpy.random.default_rng` seeded from the
caller's seed, making every operation a pure function of its arguments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry as geo
from .errors import ConfigurationError
from .validation import as_float_array, ensure_finite

SCENARIO_FILE_SUFFIX = ".scn.jsonl"

# rng stream salts so scenario layout and raster noise never share draws
_GEN_SALT = 0x5CE9A210
_RENDER_SALT = 0x0B5E77E0


@dataclass(frozen=True)
class Pose:
    """A planar pose; heading is normalized into (-pi, pi]."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ConfigurationError("Pose fields must be finite")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", float(geo.wrap_angle(self.heading)))

    def as_array(self):
        return np.array([self.x, self.y, self.heading], dtype=float)


@dataclass(frozen=True)
class Trajectory:
    """A fixed-horizon pose sequence sampled at `dt`; pose 0 is the current state."""

    poses: np.ndarray  # (H, 3)
    dt: float = 0.1

    def __post_init__(self):
        poses = as_float_array(self.poses, "Trajectory.poses", ndim=2)
        if poses.shape[1] != 3:
            raise ConfigurationError("Trajectory.poses must have shape (H, 3)")
        if poses.shape[0] < 2:
            raise ConfigurationError("Trajectory needs at least 2 poses")
        ensure_finite(poses, "Trajectory.poses")
        if self.dt <= 0:
            raise ConfigurationError("Trajectory.dt must be positive")
        poses = poses.copy()
        poses[:, 2] = geo.wrap_angle(poses[:, 2])
        poses.setflags(write=False)
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return self.poses.shape[0]

    @property
    def horizon(self):
        return len(self) * self.dt

    def pose(self, i) -> Pose:
        x, y, h = self.poses[i]
        return Pose(float(x), float(y), float(h))


@dataclass(frozen=True)
class Agent:
    """Constant-velocity rectangular agent; velocity is signed along heading."""

    initial_pose: Pose
    velocity: float
    half_length: float
    half_width: float

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ConfigurationError("Agent footprint extents must be positive")
        if not math.isfinite(self.velocity):
            raise ConfigurationError("Agent velocity must be finite")


def agent_pose_at(agent: Agent, t: float) -> Pose:
    """Pose of a constant-velocity agent at time t >= 0."""
    p = agent.initial_pose
    d = agent.velocity * t
    return Pose(p.x + d * math.cos(p.heading), p.y + d * math.sin(p.heading), p.heading)


def agent_track(agent: Agent, times) -> np.ndarray:
    """Vectorized agent poses at the given times; returns (len(times), 3)."""
    times = np.asarray(times, dtype=float)
    p = agent.initial_pose
    d = agent.velocity * times
    out = np.empty(times.shape + (3,))
    out[..., 0] = p.x + d * math.cos(p.heading)
    out[..., 1] = p.y + d * math.sin(p.heading)
    out[..., 2] = p.heading
    return out


@dataclass(frozen=True)
class Perception:
    """A world view sufficient to score trajectories.

    This is what rule-based scoring actually consumes: ground truth scenarios
    provide it exactly, while the post-processing baseline reconstructs a noisy
    version from the raster.  `expert_trajectory` may be absent, in which case
    progress has no expert reference.
    """

    drivable_area: np.ndarray  # (E, 2) CCW simple polygon
    route_centerline: np.ndarray  # (M, 2)
    agents: tuple
    expert_trajectory: Trajectory | None = None


@dataclass(frozen=True)
class Scenario:
    """Ground-truth world state for one planning episode."""

    id: str
    drivable_area: np.ndarray  # (E, 2) CCW simple polygon
    route_centerline: np.ndarray  # (M, 2)
    agents: tuple
    ego_start: Pose
    ego_speed: float
    expert_trajectory: Trajectory

    def __post_init__(self):
        poly = as_float_array(self.drivable_area, "Scenario.drivable_area", ndim=2)
        route = as_float_array(self.route_centerline, "Scenario.route_centerline", ndim=2)
        ensure_finite(poly, "Scenario.drivable_area")
        ensure_finite(route, "Scenario.route_centerline")
        if len(poly) < 3:
            raise ConfigurationError("drivable_area needs at least 3 vertices")
        if len(route) < 2:
            raise ConfigurationError("route_centerline needs at least 2 vertices")
        if geo.polygon_area(poly) <= 0:
            raise ConfigurationError("drivable_area must be CCW with positive area")
        if geo.polygon_self_intersects(poly):
            raise ConfigurationError("drivable_area must be a simple polygon")
        if not np.all(geo.points_in_polygon(self.expert_trajectory.poses[:, :2], poly)):
            raise ConfigurationError("expert trajectory leaves the drivable area")
        if not np.allclose(self.expert_trajectory.poses[0], self.ego_start.as_array(), atol=1e-9):
            raise ConfigurationError("ego_start must equal expert trajectory pose 0")
        poly.setflags(write=False)
        route.setflags(write=False)
        object.__setattr__(self, "drivable_area", poly)
        object.__setattr__(self, "route_centerline", route)
        object.__setattr__(self, "agents", tuple(self.agents))


@dataclass(frozen=True)
class Observation:
    """Ego-centered, ego-aligned BEV raster plus the ego status vector.

    Raster channel 0 is drivable-area occupancy, channel 1 agent occupancy,
    both in [0, 1].  ego_status = (speed, yaw rate, route-relative heading
    error, signed lateral offset).
    """

    bev_raster: np.ndarray  # (G, G, 2)
    cell_size: float
    ego_status: np.ndarray  # (4,)

    def __post_init__(self):
        raster = as_float_array(self.bev_raster, "Observation.bev_raster", ndim=3)
        if raster.shape[2] != 2 or raster.shape[0] != raster.shape[1]:
            raise ConfigurationError("bev_raster must have shape (G, G, 2)")
        if np.any(raster < 0.0) or np.any(raster > 1.0):
            raise ConfigurationError("bev_raster values must lie in [0, 1]")
        status = as_float_array(self.ego_status, "Observation.ego_status", shape=(4,))
        ensure_finite(status, "Observation.ego_status")
        raster.setflags(write=False)
        status.setflags(write=False)
        object.__setattr__(self, "bev_raster", raster)
        object.__setattr__(self, "ego_status", status)


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for the scenario generator; ranges are inclusive (lo, hi)."""

    horizon_steps: int = 40
    dt: float = 0.1
    road_width: tuple = (7.0, 12.0)
    curvature_max: float = 0.045
    segment_length: tuple = (15.0, 30.0)
    centerline_spacing: float = 1.0
    agent_count: tuple = (1, 5)
    agent_speed: tuple = (0.0, 4.0)
    crossing_prob: float = 0.35
    oncoming_prob: float = 0.15
    expert_clearance: float = 1.5  # min gap between any agent and the expert sweep
    ego_cruise_speed: tuple = (6.0, 12.0)
    ego_start_speed: tuple = (3.0, 9.0)
    ego_half_length: float = 2.3
    ego_half_width: float = 0.95

    def __post_init__(self):
        if self.horizon_steps <= 1:
            raise ConfigurationError("horizon_steps must exceed 1")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.road_width[0] <= 0 or self.road_width[1] < self.road_width[0]:
            raise ConfigurationError("road_width range must be positive and ordered")
        if self.curvature_max < 0:
            raise ConfigurationError("curvature_max must be non-negative")
        # inner road edge must not self-intersect when offset by half the width
        if self.curvature_max * self.road_width[1] / 2.0 >= 0.9:
            raise ConfigurationError("curvature_max too large for the widest road")
        if self.agent_count[0] < 0 or self.agent_count[1] < self.agent_count[0]:
            raise ConfigurationError("agent_count range must be ordered and non-negative")
        if self.ego_half_length <= 0 or self.ego_half_width <= 0:
            raise ConfigurationError("ego footprint extents must be positive")

    @property
    def horizon(self):
        return self.horizon_steps * self.dt

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ObservationConfig:
    """Raster geometry plus the degradation applied to the student's view.

    Dropout zeroes each cell with marginal probability `dropout`; cells inside
    the same `dropout_patch`-sized block share one draw, so missing regions
    are contiguous occlusions rather than salt-and-pepper (patch 1 recovers
    independent per-cell dropout).
    """

    grid_size: int = 64
    cell_size: float = 1.0
    dropout: float = 0.3
    dropout_patch: int = 2
    amplitude: float = 0.15

    def __post_init__(self):
        if self.grid_size < 16:
            raise ConfigurationError("grid_size must be at least 16")
        if self.cell_size <= 0:
            raise ConfigurationError("cell_size must be positive")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigurationError("dropout must lie in [0, 1]")
        if self.dropout_patch < 1:
            raise ConfigurationError("dropout_patch must be at least 1")
        if self.amplitude < 0:
            raise ConfigurationError("amplitude must be non-negative")

    def to_dict(self):
        return asdict(self)


def generate_scenario(seed: int, config: WorldConfig) -> Scenario:
    """Deterministically generate a scenario from (seed, config).

    Layouts failing any validity check (simple polygon, expert fully inside
    the drivable area with its whole footprint, comfortable expert dynamics)
    are rejected and redrawn from the same stream, so the function remains a
    pure function of its arguments.
    """
    rng = np.random.default_rng([_GEN_SALT, int(seed)])
    for _ in range(64):
        scenario = _try_generate(rng, seed, config)
        if scenario is not None:
            return scenario
    raise RuntimeError(f"scenario generation failed to converge for seed {seed}")


def _min_centerline_length(config):
    return 6.0 + config.ego_cruise_speed[1] * config.horizon + 12.0


def _try_generate(rng, seed, config):
    half_width = rng.uniform(*config.road_width) / 2.0
    centerline = _sample_centerline(rng, config)
    polygon = _road_polygon(centerline, half_width)
    if geo.polygon_area(polygon) <= 0 or geo.polygon_self_intersects(polygon):
        return None

    arclen = geo.polyline_arclength(centerline)
    total = arclen[-1]
    s0 = 3.0 + rng.uniform(0.0, 2.0)
    lateral_max = min(0.8, half_width - 2.7)
    eta = rng.uniform(-lateral_max, lateral_max) if lateral_max > 0 else 0.0
    psi = rng.uniform(-0.1, 0.1)
    cruise = rng.uniform(*config.ego_cruise_speed)
    v0 = rng.uniform(*config.ego_start_speed)

    profile = _speed_profile(centerline, arclen, cruise)
    v0 = min(v0, float(np.interp(s0, arclen, profile)))
    start = _pose_on_route(centerline, arclen, s0, eta, psi)
    expert_poses = _pure_pursuit_rollout(start, v0, centerline, arclen, profile, config)
    if expert_poses is None:
        return None

    # whole-footprint containment (teacher DAC of the expert must be 1)
    corners = geo.rect_corners(expert_poses, config.ego_half_length, config.ego_half_width)
    if not np.all(geo.points_in_polygon(corners.reshape(-1, 2), polygon)):
        return None
    final_arc, _ = geo.project_to_polyline(expert_poses[-1, :2], centerline)
    if final_arc > total - 2.0:
        return None

    expert = Trajectory(expert_poses, config.dt)
    from .metrics import MetricLimits, comfort  # deferred: metrics imports this module

    if comfort(expert, MetricLimits()) != 1:
        return None

    ego_start = expert.pose(0)
    agents = _sample_agents(rng, config, centerline, arclen, half_width, s0, total,
                            expert_poses)
    return Scenario(
        id=f"scn-{int(seed):09d}",
        drivable_area=polygon,
        route_centerline=centerline,
        agents=tuple(agents),
        ego_start=ego_start,
        ego_speed=float(v0),
        expert_trajectory=expert,
    )


def _sample_centerline(rng, config):
    min_length = _min_centerline_length(config)
    heading = rng.uniform(-np.pi, np.pi)
    origin = rng.uniform(-20.0, 20.0, size=2)
    lengths = []
    curvatures = []
    total = 0.0
    while total < min_length and len(lengths) < 12:
        seg = rng.uniform(*config.segment_length)
        lengths.append(seg)
        curvatures.append(rng.uniform(-config.curvature_max, config.curvature_max))
        total += seg
    ds = 0.5
    points = [origin]
    h = heading
    for seg, kappa in zip(lengths, curvatures):
        for _ in range(int(round(seg / ds))):
            last = points[-1]
            points.append(last + ds * np.array([math.cos(h), math.sin(h)]))
            h += kappa * ds
    line = np.array(points)
    return geo.resample_polyline(line, config.centerline_spacing)


def _road_polygon(centerline, half_width):
    d = np.gradient(centerline, axis=0)
    norm = np.hypot(d[:, 0], d[:, 1])
    tangent = d / norm[:, None]
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    left = centerline + half_width * normal
    right = centerline - half_width * normal
    polygon = np.concatenate([right, left[::-1]], axis=0)
    if geo.polygon_area(polygon) < 0:
        polygon = polygon[::-1]
    return polygon


def _speed_profile(centerline, arclen, cruise, lateral_budget=1.6, decel=1.5):
    tangents = np.diff(centerline, axis=0)
    angles = np.arctan2(tangents[:, 1], tangents[:, 0])
    dth = geo.wrap_angle(np.diff(angles))
    ds = np.hypot(tangents[:, 0], tangents[:, 1])
    kappa = np.zeros(len(centerline))
    kappa[1:-1] = np.abs(dth) / (0.5 * (ds[:-1] + ds[1:]))
    if len(kappa) >= 5:
        kernel = np.ones(5) / 5.0
        kappa = np.convolve(kappa, kernel, mode="same")
    v = np.minimum(cruise, np.sqrt(lateral_budget / np.maximum(kappa, 1e-6)))
    # backward pass keeps decelerations feasible
    for i in range(len(v) - 2, -1, -1):
        gap = arclen[i + 1] - arclen[i]
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * decel * gap))
    return v


def _pose_on_route(centerline, arclen, s, lateral, heading_offset):
    x = np.interp(s, arclen, centerline[:, 0])
    y = np.interp(s, arclen, centerline[:, 1])
    idx = min(np.searchsorted(arclen, s), len(centerline) - 1)
    seg = centerline[max(idx, 1)] - centerline[max(idx, 1) - 1]
    tangent = math.atan2(seg[1], seg[0])
    nx, ny = -math.sin(tangent), math.cos(tangent)
    return np.array([x + lateral * nx, y + lateral * ny, geo.wrap_angle(tangent + heading_offset)])


def _pure_pursuit_rollout(start, v0, centerline, arclen, profile, config,
                          accel_max=1.5, jerk_max=3.0, yaw_rate_max=0.85, lateral_accel_max=2.0):
    H, dt = config.horizon_steps, config.dt
    x, y, h = start
    v = v0
    a_prev = 0.0
    poses = np.empty((H, 3))
    poses[0] = (x, y, h)
    total = arclen[-1]
    for i in range(1, H):
        arc, _ = geo.project_to_polyline(np.array([x, y]), centerline)
        arc = float(arc)
        v_target = float(np.interp(min(arc + max(v, 1.0) * 2.0 * dt, total), arclen, profile))
        a_cmd = np.clip((v_target - v) / (2.0 * dt), -accel_max, accel_max)
        a_cmd = float(np.clip(a_cmd, a_prev - jerk_max * dt, a_prev + jerk_max * dt))
        lookahead = float(np.clip(0.7 * v, 3.0, 12.0))
        s_t = min(arc + lookahead, total)
        tx = np.interp(s_t, arclen, centerline[:, 0])
        ty = np.interp(s_t, arclen, centerline[:, 1])
        alpha = geo.wrap_angle(math.atan2(ty - y, tx - x) - h)
        kappa_cmd = 2.0 * math.sin(alpha) / lookahead
        omega_cap = min(yaw_rate_max, lateral_accel_max / max(v, 0.5))
        omega = float(np.clip(v * kappa_cmd, -omega_cap, omega_cap))
        x += v * math.cos(h) * dt
        y += v * math.sin(h) * dt
        h = float(geo.wrap_angle(h + omega * dt))
        v = max(0.0, v + a_cmd * dt)
        a_prev = a_cmd
        poses[i] = (x, y, h)
    if not np.all(np.isfinite(poses)):
        return None
    return poses


def _sample_agents(rng, config, centerline, arclen, half_width, ego_arc, total,
                   expert_poses):
    count = int(rng.integers(config.agent_count[0], config.agent_count[1] + 1))
    agents = []
    ego_dims = (config.ego_half_length, config.ego_half_width)
    H, dt = config.horizon_steps, config.dt
    times = np.arange(H) * dt
    for _ in range(count):
        for _attempt in range(12):
            s = rng.uniform(min(ego_arc + 6.0, total - 6.0), total - 6.0)
            eta = rng.uniform(-(half_width - 1.2), half_width - 1.2)
            half_len = rng.uniform(1.9, 2.5)
            half_wid = rng.uniform(0.85, 1.05)
            kind = rng.uniform()
            pose = _pose_on_route(centerline, arclen, s, eta, 0.0)
            tangent = pose[2]
            if kind < config.crossing_prob:
                side = 1.0 if rng.uniform() < 0.5 else -1.0
                heading = tangent + side * (np.pi / 2.0) + rng.uniform(-0.3, 0.3)
                lo, hi = config.agent_speed
                speed = rng.uniform(lo, min(2.5, hi)) if hi > lo else lo
            elif kind < config.crossing_prob + config.oncoming_prob:
                heading = tangent + np.pi + rng.uniform(-0.2, 0.2)
                speed = rng.uniform(*config.agent_speed)
            else:
                heading = tangent + rng.uniform(-0.2, 0.2)
                speed = rng.uniform(*config.agent_speed)
            candidate = Agent(
                initial_pose=Pose(pose[0], pose[1], heading),
                velocity=float(speed),
                half_length=float(half_len),
                half_width=float(half_wid),
            )
            # the expert's swept footprint stays clear, so imitating the
            # expert is always a collision-free policy
            track = agent_track(candidate, times)
            clear = geo.rects_clearance(expert_poses, ego_dims, track,
                                        (half_len, half_wid))
            if float(np.min(clear)) > config.expert_clearance:
                agents.append(candidate)
                break
    return agents


def render_observation(scenario: Scenario, config: ObservationConfig, seed: int) -> Observation:
    """Rasterize the scenario into the degraded ego-centric student view."""
    G = config.grid_size
    cell = config.cell_size
    ego = scenario.ego_start
    idx = (np.arange(G) - G / 2.0 + 0.5) * cell
    lx, ly = np.meshgrid(idx, idx, indexing="ij")  # row -> forward axis
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    wx = ego.x + lx * c - ly * s
    wy = ego.y + lx * s + ly * c
    cells = np.stack([wx, wy], axis=-1)

    drivable = geo.points_in_polygon(cells, scenario.drivable_area).astype(float)
    occupancy = np.zeros((G, G))
    flat = cells.reshape(-1, 2)
    for agent in scenario.agents:
        p = agent.initial_pose
        ca, sa = math.cos(p.heading), math.sin(p.heading)
        dx = flat[:, 0] - p.x
        dy = flat[:, 1] - p.y
        ax = dx * ca + dy * sa
        ay = -dx * sa + dy * ca
        inside = (np.abs(ax) <= agent.half_length) & (np.abs(ay) <= agent.half_width)
        occupancy = np.maximum(occupancy, inside.reshape(G, G).astype(float))

    raster = np.stack([drivable, occupancy], axis=-1)
    rng = np.random.default_rng([_RENDER_SALT, int(seed)])
    patch = config.dropout_patch
    blocks = -(-G // patch)  # ceil
    field = rng.uniform(size=(blocks, blocks, 2))
    field = np.repeat(np.repeat(field, patch, axis=0), patch, axis=1)[:G, :G]
    raster = raster * (field >= config.dropout)
    raster = raster + rng.uniform(-config.amplitude, config.amplitude, size=raster.shape)
    raster = np.clip(raster, 0.0, 1.0)

    expert = scenario.expert_trajectory
    yaw_rate = float(geo.wrap_angle(expert.poses[1, 2] - expert.poses[0, 2])) / expert.dt
    arc, lateral = geo.project_to_polyline(np.array([ego.x, ego.y]), scenario.route_centerline)
    arclen = geo.polyline_arclength(scenario.route_centerline)
    idx_seg = int(np.clip(np.searchsorted(arclen, float(arc)), 1, len(arclen) - 1))
    seg = scenario.route_centerline[idx_seg] - scenario.route_centerline[idx_seg - 1]
    tangent = math.atan2(seg[1], seg[0])
    heading_err = float(geo.wrap_angle(ego.heading - tangent))
    status = np.array([scenario.ego_speed, yaw_rate, heading_err, float(lateral)])
    return Observation(bev_raster=raster, cell_size=cell, ego_status=status)


# ---------------------------------------------------------------------------
# serialization: one JSON object per line, `.scn.jsonl`
# ---------------------------------------------------------------------------

def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "id": scenario.id,
        "drivable_area": scenario.drivable_area.tolist(),
        "route_centerline": scenario.route_centerline.tolist(),
        "agents": [
            {
                "initial_pose": {"x": a.initial_pose.x, "y": a.initial_pose.y,
                                 "heading": a.initial_pose.heading},
                "velocity": a.velocity,
                "half_length": a.half_length,
                "half_width": a.half_width,
            }
            for a in scenario.agents
        ],
        "ego_start": {"x": scenario.ego_start.x, "y": scenario.ego_start.y,
                      "heading": scenario.ego_start.heading},
        "ego_speed": scenario.ego_speed,
        "expert_trajectory": {
            "dt": scenario.expert_trajectory.dt,
            "poses": scenario.expert_trajectory.poses.tolist(),
        },
    }


def scenario_from_dict(data: dict) -> Scenario:
    agents = tuple(
        Agent(
            initial_pose=Pose(**a["initial_pose"]),
            velocity=a["velocity"],
            half_length=a["half_length"],
            half_width=a["half_width"],
        )
        for a in data["agents"]
    )
    return Scenario(
        id=data["id"],
        drivable_area=np.array(data["drivable_area"]),
        route_centerline=np.array(data["route_centerline"]),
        agents=agents,
        ego_start=Pose(**data["ego_start"]),
        ego_speed=data["ego_speed"],
        expert_trajectory=Trajectory(
            np.array(data["expert_trajectory"]["poses"]),
            data["expert_trajectory"]["dt"],
        ),
    )


def save_scenarios(path, scenarios):
    with open(path, "w") as fh:
        for scenario in scenarios:
            fh.write(json.dumps(scenario_to_dict(scenario)) + "\n")


def load_scenarios(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(scenario_from_dict(json.loads(line)))
    return out
