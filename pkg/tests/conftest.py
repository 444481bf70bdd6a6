import numpy as np
import pytest

from hydra_plan import vocab as vocab_mod
from hydra_plan import world as world_mod


@pytest.fixture(scope="session")
def world_cfg():
    return world_mod.WorldConfig()


@pytest.fixture(scope="session")
def scenario(world_cfg):
    return world_mod.generate_scenario(7, world_cfg)


@pytest.fixture(scope="session")
def scenarios(world_cfg):
    return [world_mod.generate_scenario(s, world_cfg) for s in range(40)]


@pytest.fixture(scope="session")
def tiny_vocab():
    kin = vocab_mod.KinematicConfig()
    poses = vocab_mod.sample_trajectory_array(600, kin, seed=3)
    return vocab_mod.kmeans_cluster(poses, 8, seed=3, dt=kin.dt)


def make_box_scenario(agents=(), route_len=100.0, half_width=20.0, speed=5.0,
                      n_steps=40, dt=0.1):
    """Rectangular world with a straight route and a constant-speed expert."""
    polygon = np.array([
        [-10.0, -half_width], [route_len + 10.0, -half_width],
        [route_len + 10.0, half_width], [-10.0, half_width],
    ])
    route = np.array([[0.0, 0.0], [route_len, 0.0]])
    t = np.arange(n_steps) * dt
    poses = np.stack([3.0 + speed * t, np.zeros(n_steps), np.zeros(n_steps)], axis=1)
    expert = world_mod.Trajectory(poses, dt)
    return world_mod.Scenario(
        id="box",
        drivable_area=polygon,
        route_centerline=route,
        agents=tuple(agents),
        ego_start=expert.pose(0),
        ego_speed=speed,
        expert_trajectory=expert,
    )


def straight_trajectory(x0=3.0, y0=0.0, heading=0.0, speed=5.0, n_steps=40, dt=0.1):
    t = np.arange(n_steps) * dt
    poses = np.stack([
        x0 + speed * t * np.cos(heading),
        y0 + speed * t * np.sin(heading),
        np.full(n_steps, heading),
    ], axis=1)
    return world_mod.Trajectory(poses, dt)
