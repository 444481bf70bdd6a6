import numpy as np
import pytest

from hydra_plan import geometry as geo
from hydra_plan import metrics
from hydra_plan import world
from hydra_plan.errors import ConfigurationError
from hydra_plan.metrics import (MetricLimits, SubScores, TeacherLabels, comfort,
                                drivable_area_compliance, ego_progress, no_collision,
                                pdm_score, pdm_score_array, simulate_vocabulary,
                                subscores, time_to_collision)
from hydra_plan.world import Agent, Pose, Trajectory

from conftest import make_box_scenario, straight_trajectory

EGO_DIMS = metrics.DEFAULT_EGO_DIMS


# ---------------------------------------------------------------------------
# independent oracles: winding-number polygon test, exhaustive rectangle
# overlap, and 10x supersampled timelines
# ---------------------------------------------------------------------------

def winding_inside(point, polygon):
    rel = polygon - point
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    turns = np.angle(np.exp(1j * (np.roll(ang, -1) - ang)))
    return abs(turns.sum()) > np.pi


def rect_overlap_oracle(pa, dims_a, pb, dims_b):
    ca = geo.rect_corners(np.asarray(pa, float), *dims_a)
    cb = geo.rect_corners(np.asarray(pb, float), *dims_b)

    def inside(p, corners):
        e = np.roll(corners, -1, axis=0) - corners
        r = p - corners
        cr = e[:, 0] * r[:, 1] - e[:, 1] * r[:, 0]
        return np.all(cr >= -1e-12) or np.all(cr <= 1e-12)

    if any(inside(p, cb) for p in ca) or any(inside(p, ca) for p in cb):
        return True
    for i in range(4):
        for j in range(4):
            d = geo.segments_segments_distance(ca[i], ca[(i + 1) % 4],
                                               cb[j], cb[(j + 1) % 4])
            if float(d) == 0.0:
                return True
    return False


def interpolated_states(traj, factor):
    """Supersampled ego states: positions lerped, headings angle-lerped."""
    poses = traj.poses
    H = len(poses)
    out = []
    for i in range(H - 1):
        for f in range(factor):
            a = f / factor
            p = (1 - a) * poses[i, :2] + a * poses[i + 1, :2]
            dh = float(geo.wrap_angle(poses[i + 1, 2] - poses[i, 2]))
            h = poses[i, 2] + a * dh
            out.append([p[0], p[1], h, (i + a) * traj.dt])
    out.append([poses[-1, 0], poses[-1, 1], poses[-1, 2], (H - 1) * traj.dt])
    return np.array(out)


def oracle_no_collision(scenario, traj, factor=10):
    states = interpolated_states(traj, factor)
    for agent in scenario.agents:
        for x, y, h, t in states:
            ap = world.agent_pose_at(agent, t)
            if rect_overlap_oracle([x, y, h], EGO_DIMS,
                                   [ap.x, ap.y, ap.heading],
                                   (agent.half_length, agent.half_width)):
                return 0
    return 1


def oracle_dac(scenario, traj, factor=10):
    states = interpolated_states(traj, factor)
    corners = geo.rect_corners(states[:, :3], *EGO_DIMS).reshape(-1, 2)
    return int(all(winding_inside(p, scenario.drivable_area) for p in corners))


def oracle_ttc(scenario, traj, tau=1.0, factor=10):
    poses = traj.poses
    dt = traj.dt
    H = len(poses)
    speeds = np.hypot(*np.diff(poses[:, :2], axis=0).T) / dt
    speeds = np.append(speeds, speeds[-1])
    for i in range(H):
        x, y, h = poses[i]
        for step in range(int(round(tau / dt * factor)) + 1):
            s = step * dt / factor
            ex = x + speeds[i] * s * np.cos(h)
            ey = y + speeds[i] * s * np.sin(h)
            for agent in scenario.agents:
                ap = world.agent_pose_at(agent, i * dt + s)
                if rect_overlap_oracle([ex, ey, h], EGO_DIMS,
                                       [ap.x, ap.y, ap.heading],
                                       (agent.half_length, agent.half_width)):
                    return 0
    return 1


# ---------------------------------------------------------------------------
# no_collision
# ---------------------------------------------------------------------------

class TestNoCollision:
    def test_zero_agents(self):
        scn = make_box_scenario()
        assert no_collision(scn, scn.expert_trajectory) == 1

    def test_agent_straddling_ego_path_at_step_10(self):
        traj = straight_trajectory(speed=5.0)  # ego x = 3 + 0.5 * step
        x_hit = float(traj.poses[10, 0])
        agent = Agent(Pose(x_hit, 0.0, 0.0), velocity=0.0, half_length=2.0, half_width=1.0)
        scn = make_box_scenario(agents=(agent,))
        assert no_collision(scn, traj) == 0
        assert oracle_no_collision(scn, traj) == 0

    def test_agent_crossing_after_ego_passed(self):
        # the ego's tail clears the agent's lane (x in [12, 14]) at t=2.66 s;
        # the agent's leading edge only reaches the ego's lane at t=3.5 s
        traj = straight_trajectory(speed=5.0)
        agent = Agent(Pose(13.0, -9.0, np.pi / 2), velocity=2.0,
                      half_length=1.0, half_width=1.0)
        scn = make_box_scenario(agents=(agent,))
        assert no_collision(scn, traj) == 1
        assert oracle_no_collision(scn, traj) == 1


class TestDrivableAreaCompliance:
    def test_generated_experts_comply(self, scenarios, world_cfg):
        ego = (world_cfg.ego_half_length, world_cfg.ego_half_width)
        for scn in scenarios[:15]:
            assert drivable_area_compliance(scn, scn.expert_trajectory, ego) == 1
            assert oracle_dac(scn, scn.expert_trajectory, factor=3) == 1

    def test_translated_off_map(self):
        scn = make_box_scenario()
        poses = scn.expert_trajectory.poses.copy()
        poses[:, 0] += 1e3
        assert drivable_area_compliance(scn, Trajectory(poses, 0.1)) == 0

    def test_stationary_at_ego_start(self):
        scn = make_box_scenario()
        poses = np.tile(scn.ego_start.as_array(), (40, 1))
        assert drivable_area_compliance(scn, Trajectory(poses, 0.1)) == 1


class TestTimeToCollision:
    def test_zero_agents(self):
        scn = make_box_scenario()
        assert time_to_collision(scn, scn.expert_trajectory) == 1

    def test_headed_at_stationary_agent_two_meters_ahead(self):
        # gap of 2 m closes within tau=1 s at 5 m/s
        traj = straight_trajectory(x0=3.0, speed=5.0, n_steps=2)
        gap = 2.0
        agent_x = 3.0 + EGO_DIMS[0] + gap + 1.0  # ego front + gap + agent half_length
        agent = Agent(Pose(agent_x, 0.0, 0.0), velocity=0.0, half_length=1.0, half_width=1.0)
        scn = make_box_scenario(agents=(agent,))
        assert time_to_collision(scn, traj) == 0
        assert oracle_ttc(scn, traj) == 0

    def test_agent_behind_at_equal_speed(self):
        traj = straight_trajectory(x0=20.0, speed=5.0)
        agent = Agent(Pose(10.0, 0.0, 0.0), velocity=5.0, half_length=2.0, half_width=1.0)
        scn = make_box_scenario(agents=(agent,), speed=5.0)
        assert time_to_collision(scn, traj) == 1
        assert oracle_ttc(scn, traj) == 1

    def test_requires_positive_tau(self):
        scn = make_box_scenario()
        with pytest.raises(ConfigurationError):
            time_to_collision(scn, scn.expert_trajectory, tau=0.0)

    def test_collision_implies_ttc_zero(self):
        traj = straight_trajectory(speed=5.0)
        agent = Agent(Pose(float(traj.poses[0, 0]), 0.0, 0.0), velocity=0.0,
                      half_length=2.0, half_width=1.0)
        scn = make_box_scenario(agents=(agent,))
        assert no_collision(scn, traj) == 0
        assert time_to_collision(scn, traj) == 0


class TestComfort:
    def test_stationary(self):
        assert comfort(Trajectory(np.zeros((40, 3)), 0.1)) == 1

    def test_teleport_fails(self):
        poses = np.zeros((40, 3))
        poses[20:, 0] = 5.0
        assert comfort(Trajectory(poses, 0.1)) == 0

    def test_constant_accel_at_exact_limit(self):
        limits = MetricLimits()
        dt = 0.1
        t = np.arange(40) * dt
        poses = np.stack([0.5 * limits.accel_max * t ** 2, np.zeros(40), np.zeros(40)], axis=1)
        traj = Trajectory(poses, dt)
        # independent finite-difference check with the same inclusive bound
        # (1e-9 relative rounding allowance per the contract)
        v = np.diff(poses[:, :2], axis=0) / dt
        a = np.diff(v, axis=0) / dt
        j = np.diff(a, axis=0) / dt
        expected = int(np.hypot(*a.T).max() <= limits.accel_max * (1 + 1e-9)
                       and np.hypot(*j.T).max() <= limits.jerk_max * (1 + 1e-9))
        assert expected == 1
        assert comfort(traj, limits) == expected

    def test_yaw_rate_bound(self):
        dt = 0.1
        poses = np.zeros((40, 3))
        poses[:, 2] = np.arange(40) * dt * 1.0  # 1 rad/s > 0.95 limit
        assert comfort(Trajectory(poses, dt)) == 0


class TestEgoProgress:
    def test_expert_trajectory_scores_one(self):
        scn = make_box_scenario()
        assert ego_progress(scn, scn.expert_trajectory) == pytest.approx(1.0)

    def test_stationary_scores_zero(self):
        scn = make_box_scenario()
        poses = np.tile(scn.ego_start.as_array(), (40, 1))
        assert ego_progress(scn, Trajectory(poses, 0.1)) == pytest.approx(0.0)

    def test_half_progress(self):
        scn = make_box_scenario(speed=5.0)  # expert advances 19.5 m
        expert_arcs, _ = geo.project_to_polyline(
            scn.expert_trajectory.poses[[0, -1], :2], scn.route_centerline
        )
        expert_gain = expert_arcs[1] - expert_arcs[0]
        traj = straight_trajectory(speed=2.5)  # exactly half the advance
        got = ego_progress(scn, traj)
        arcs, _ = geo.project_to_polyline(traj.poses[[0, -1], :2], scn.route_centerline)
        assert got == pytest.approx((arcs[1] - arcs[0]) / expert_gain)
        assert got == pytest.approx(0.5)

    def test_progress_clamped(self):
        scn = make_box_scenario(speed=2.0)
        traj = straight_trajectory(speed=8.0)
        assert ego_progress(scn, traj) == 1.0

    def test_vacuous_when_expert_stalls(self):
        scn = make_box_scenario(speed=0.0)
        traj = straight_trajectory(speed=0.0)
        assert ego_progress(scn, traj) == 1.0


class TestPdmScore:
    def test_all_ones(self):
        assert pdm_score(SubScores(1, 1, 1, 1, 1.0)) == pytest.approx(1.0)

    def test_gating(self):
        assert pdm_score(SubScores(0, 1, 1, 1, 1.0)) == 0.0
        assert pdm_score(SubScores(1, 0, 1, 1, 1.0)) == 0.0

    def test_weighted_sum(self):
        assert pdm_score(SubScores(1, 1, 0, 1, 1.0)) == pytest.approx(7.0 / 12.0)

    def test_monotone_in_each_subscore(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            s = rng.uniform(0, 1, 5)
            base = pdm_score_array(s)
            for i in range(5):
                bumped = s.copy()
                bumped[i] = min(1.0, bumped[i] + rng.uniform(0, 0.5))
                assert pdm_score_array(bumped) >= base - 1e-12

    def test_subscores_validation(self):
        with pytest.raises(ConfigurationError):
            SubScores(2, 1, 1, 1, 0.5)
        assert SubScores(1, 1, 1, 1, 1.7).ep == 1.0


class TestSimulateVocabulary:
    def test_matches_per_entry_computation(self, scenario, tiny_vocab):
        labels = simulate_vocabulary(scenario, tiny_vocab)
        assert labels.scenario_id == scenario.id
        assert len(labels) == len(tiny_vocab)
        ego = scenario.ego_start.as_array()
        for i in range(len(tiny_vocab)):
            poses = geo.transform_to_world(tiny_vocab.trajectories[i], ego)
            expected = subscores(scenario, Trajectory(poses, tiny_vocab.dt))
            assert np.allclose(labels.scores[i], expected.as_array())

    def test_zero_agents_gives_full_collision_scores(self, tiny_vocab):
        cfg = world.WorldConfig(agent_count=(0, 0))
        scn = world.generate_scenario(2, cfg)
        labels = simulate_vocabulary(scn, tiny_vocab)
        assert np.all(labels.scores[:, 0] == 1.0)
        assert np.all(labels.scores[:, 2] == 1.0)

    def test_deterministic_bytes(self, scenario, tiny_vocab):
        a = simulate_vocabulary(scenario, tiny_vocab)
        b = simulate_vocabulary(scenario, tiny_vocab)
        assert a.scores.tobytes() == b.scores.tobytes()

    def test_simulate_many_matches_sequential(self, scenarios, tiny_vocab):
        batch = metrics.simulate_many(scenarios[:40], tiny_vocab, n_jobs=2)
        for scn, lab in zip(scenarios[:40], batch):
            single = simulate_vocabulary(scn, tiny_vocab)
            assert lab.scenario_id == scn.id
            assert np.array_equal(lab.scores, single.scores)


class TestInvariants:
    def test_collision_implies_projected_collision(self, tiny_vocab, world_cfg):
        rng = np.random.default_rng(4)
        checked = 0
        for seed in range(60):
            scn = world.generate_scenario(1000 + seed, world_cfg)
            labels = simulate_vocabulary(scn, tiny_vocab)
            nc, ttc = labels.scores[:, 0], labels.scores[:, 2]
            assert np.all(ttc[nc == 0] == 0)
            checked += int((nc == 0).sum())
        assert checked > 30  # the property must actually be exercised

    def test_rigid_transform_invariance(self, tiny_vocab, world_cfg):
        frame = np.array([12.0, -7.0, 1.1])

        def moved(scn):
            poly = geo.transform_to_world(
                np.concatenate([scn.drivable_area, np.zeros((len(scn.drivable_area), 1))], 1),
                frame)[:, :2]
            route = geo.transform_to_world(
                np.concatenate([scn.route_centerline,
                                np.zeros((len(scn.route_centerline), 1))], 1), frame)[:, :2]
            agents = tuple(
                Agent(
                    initial_pose=Pose(*geo.transform_to_world(
                        a.initial_pose.as_array(), frame)),
                    velocity=a.velocity, half_length=a.half_length,
                    half_width=a.half_width,
                ) for a in scn.agents
            )
            expert = Trajectory(
                geo.transform_to_world(scn.expert_trajectory.poses, frame),
                scn.expert_trajectory.dt)
            return world.Scenario(
                id=scn.id, drivable_area=poly, route_centerline=route, agents=agents,
                ego_start=expert.pose(0), ego_speed=scn.ego_speed,
                expert_trajectory=expert,
            )

        for seed in (3, 4, 5):
            scn = world.generate_scenario(seed, world_cfg)
            a = simulate_vocabulary(scn, tiny_vocab)
            b = simulate_vocabulary(moved(scn), tiny_vocab)
            assert np.array_equal(a.scores[:, :4], b.scores[:, :4])
            assert np.allclose(a.scores[:, 4], b.scores[:, 4], atol=1e-9)

    def test_supersampling_stability(self, tiny_vocab, world_cfg):
        # NC/DAC/TTC decisions at dt vs dt/2 (linearly interpolated states)
        agree = 0
        total = 0
        disagreements = []
        for seed in range(40):
            scn = world.generate_scenario(2000 + seed, world_cfg)
            ego = scn.ego_start.as_array()
            for i in range(0, len(tiny_vocab), 2):
                poses = geo.transform_to_world(tiny_vocab.trajectories[i], ego)
                traj = Trajectory(poses, tiny_vocab.dt)
                states = interpolated_states(traj, 2)[:, :3]
                fine = Trajectory(states, tiny_vocab.dt / 2)
                for name, fn in (("nc", no_collision),
                                 ("dac", drivable_area_compliance)):
                    coarse_d = fn(scn, traj)
                    fine_d = fn(scn, fine)
                    total += 1
                    if coarse_d == fine_d:
                        agree += 1
                    else:
                        disagreements.append((scn.id, i, name))
                coarse_d = time_to_collision(scn, traj)
                fine_d = time_to_collision(scn, fine)
                total += 1
                if coarse_d == fine_d:
                    agree += 1
                else:
                    disagreements.append((scn.id, i, "ttc"))
        if disagreements:
            print(f"supersampling disagreements ({len(disagreements)}/{total}):",
                  disagreements[:10])
        assert agree / total >= 0.99


class TestLabelStore:
    def test_round_trip_and_hash_check(self, scenarios, tiny_vocab, tmp_path):
        labels = [simulate_vocabulary(s, tiny_vocab) for s in scenarios[:4]]
        prefix = tmp_path / "labels_test"
        metrics.save_labels(prefix, labels)
        block, ids, vhash = metrics.load_labels(prefix)
        assert ids == [s.id for s in scenarios[:4]]
        assert np.array_equal(block, np.stack([lab.scores for lab in labels]))
        from hydra_plan.vocab import vocabulary_hash

        assert vhash == vocabulary_hash(tiny_vocab)

    def test_corrupt_store_rejected(self, scenarios, tiny_vocab, tmp_path):
        from hydra_plan.errors import IntegrityError

        labels = [simulate_vocabulary(s, tiny_vocab) for s in scenarios[:3]]
        prefix = tmp_path / "labels_bad"
        metrics.save_labels(prefix, labels)
        block = np.load(str(prefix) + ".npy")
        block[0, 0, 4] += 0.25
        np.save(str(prefix) + ".npy", block)
        with pytest.raises(IntegrityError):
            metrics.load_labels(prefix)

    def test_vocab_hash_mismatch_rejected(self, scenarios, tiny_vocab, tmp_path):
        from hydra_plan.errors import IntegrityError

        labels = [simulate_vocabulary(s, tiny_vocab) for s in scenarios[:3]]
        prefix = tmp_path / "labels_hash"
        metrics.save_labels(prefix, labels)
        with pytest.raises(IntegrityError):
            metrics.load_labels(prefix, expected_vocab_hash="0" * 64)

    def test_teacher_labels_validation(self):
        with pytest.raises(ConfigurationError):
            TeacherLabels("x", np.full((3, 5), 0.5), "h")  # binary columns not 0/1
