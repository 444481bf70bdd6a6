import itertools

import numpy as np
import pytest

from hydra_plan import vocab
from hydra_plan.errors import ConfigurationError
from hydra_plan.geometry import wrap_angle
from hydra_plan.world import Trajectory


class TestSampling:
    def test_count_and_length(self):
        kin = vocab.KinematicConfig()
        trajs = vocab.sample_trajectories(5, kin, seed=0)
        assert len(trajs) == 5
        assert all(len(t) == kin.horizon_steps for t in trajs)

    def test_zero_bounds_zero_speed_is_stationary(self):
        kin = vocab.KinematicConfig(accel=(0.0, 0.0), yaw_rate_max=0.0,
                                    initial_speed=(0.0, 0.0))
        trajs = vocab.sample_trajectories(4, kin, seed=1)
        for t in trajs:
            assert np.all(t.poses == 0.0)

    def test_per_step_heading_change_bounded(self):
        kin = vocab.KinematicConfig(yaw_rate_max=0.8)
        poses = vocab.sample_trajectory_array(300, kin, seed=2)
        dh = wrap_angle(np.diff(poses[:, :, 2], axis=1))
        assert np.max(np.abs(dh)) <= kin.yaw_rate_max * kin.dt + 1e-12

    def test_deterministic(self):
        kin = vocab.KinematicConfig()
        a = vocab.sample_trajectory_array(50, kin, seed=9)
        b = vocab.sample_trajectory_array(50, kin, seed=9)
        assert np.array_equal(a, b)

    def test_speed_never_negative(self):
        kin = vocab.KinematicConfig(accel=(-5.0, -2.0), initial_speed=(0.0, 1.0))
        poses = vocab.sample_trajectory_array(50, kin, seed=3)
        steps = np.hypot(*np.diff(poses[:, :, :2], axis=1).transpose(2, 0, 1))
        assert np.all(steps >= -1e-12)


def random_pose_set(n, seed, spread=5.0):
    rng = np.random.default_rng(seed)
    poses = rng.uniform(-spread, spread, (n, 4, 3))
    poses[:, :, 2] = rng.uniform(-0.5, 0.5, (n, 4))
    return poses


class TestKMeans:
    def test_k_equals_distinct_inputs_gives_zero_sse(self):
        poses = random_pose_set(6, seed=0)
        trace = []
        voc = vocab.kmeans_cluster(poses, 6, seed=0, dt=0.1, sse_trace=trace)
        assert trace[-1] == pytest.approx(0.0, abs=1e-9)
        inputs = {row.tobytes() for row in vocab.flatten_poses(poses, 1.0)}
        centers = {row.tobytes() for row in voc.flat()}
        assert centers == inputs

    def test_k_one_is_coordinate_mean(self):
        poses = random_pose_set(10, seed=1)
        voc = vocab.kmeans_cluster(poses, 1, seed=1, dt=0.1)
        expected = vocab.flatten_poses(poses, 1.0).mean(axis=0)
        assert np.allclose(voc.flat()[0], expected, atol=1e-12)

    def test_square_corners_matches_enumeration(self):
        # 4 one-pose-pair trajectories on square corners; optimal 2-means SSE
        # from exhaustive enumeration of all assignments
        corners = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
        poses = np.zeros((4, 2, 3))
        poses[:, 0, :2] = corners
        poses[:, 1, :2] = corners  # constant trajectories
        X = vocab.flatten_poses(poses, 1.0)

        def sse_of(assign):
            total = 0.0
            for c in set(assign):
                members = X[[i for i, a in enumerate(assign) if a == c]]
                total += ((members - members.mean(axis=0)) ** 2).sum()
            return total

        best = min(sse_of(a) for a in itertools.product([0, 1], repeat=4))
        trace = []
        voc = vocab.kmeans_cluster(poses, 2, seed=5, dt=0.1, sse_trace=trace)
        assert len(voc) == 2
        assert trace[-1] == pytest.approx(best, rel=1e-12)

    def test_sse_monotone_over_seeds(self):
        poses = vocab.sample_trajectory_array(300, vocab.KinematicConfig(), seed=4)
        for seed in range(10):
            trace = []
            vocab.kmeans_cluster(poses, 12, seed=seed, dt=0.1, sse_trace=trace)
            assert all(b <= a + 1e-8 * (1 + a) for a, b in zip(trace, trace[1:]))

    def test_converged_result_is_stable_under_one_more_sweep(self):
        poses = vocab.sample_trajectory_array(400, vocab.KinematicConfig(), seed=5)
        tol = 1e-9
        voc = vocab.kmeans_cluster(poses, 10, max_iters=500, tol=tol, seed=6, dt=0.1)
        X = vocab.flatten_poses(poses, 1.0)
        centers = voc.flat()
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        sse = d2[np.arange(len(X)), assign].sum()
        new_centers = np.stack([
            X[assign == c].mean(axis=0) if np.any(assign == c) else centers[c]
            for c in range(10)
        ])
        d2b = ((X[:, None, :] - new_centers[None, :, :]) ** 2).sum(axis=2)
        sse_next = d2b.min(axis=1).sum()
        assert sse - sse_next < 1e-6 * (1 + sse)

    def test_determinism_byte_for_byte(self, tmp_path):
        poses = vocab.sample_trajectory_array(200, vocab.KinematicConfig(), seed=7)
        va = vocab.kmeans_cluster(poses, 8, seed=7, dt=0.1)
        vb = vocab.kmeans_cluster(poses, 8, seed=7, dt=0.1)
        pa, pb = tmp_path / "a.vocab", tmp_path / "b.vocab"
        vocab.save_vocabulary(pa, va)
        vocab.save_vocabulary(pb, vb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_errors(self):
        poses = random_pose_set(4, seed=8)
        with pytest.raises(ConfigurationError):
            vocab.kmeans_cluster(poses, 5, dt=0.1)  # k > distinct inputs
        with pytest.raises(ConfigurationError):
            vocab.kmeans_cluster([], 1)
        dup = np.concatenate([poses, poses[: 1]])
        with pytest.raises(ConfigurationError):
            vocab.kmeans_cluster(dup, 5, dt=0.1)  # duplicates reduce distinct count


class TestVocabulary:
    def test_distinctness_enforced(self):
        poses = np.zeros((2, 4, 3))
        with pytest.raises(ConfigurationError):
            vocab.Vocabulary(trajectories=poses, dt=0.1)

    def test_nearest_exact_entry(self, tiny_vocab):
        traj = tiny_vocab.entry(3)
        assert vocab.nearest_vocab_index(tiny_vocab, traj) == 3

    def test_nearest_single_entry(self):
        poses = np.zeros((1, 4, 3))
        poses[0, :, 0] = np.arange(4)
        voc = vocab.Vocabulary(trajectories=poses, dt=0.1)
        traj = Trajectory(np.random.default_rng(0).uniform(-1, 1, (4, 3)), 0.1)
        assert vocab.nearest_vocab_index(voc, traj) == 0

    def test_nearest_matches_linear_scan(self, tiny_vocab):
        rng = np.random.default_rng(11)
        for _ in range(25):
            poses = rng.uniform(-10, 10, (tiny_vocab.horizon_steps, 3))
            poses[:, 2] = rng.uniform(-1, 1, tiny_vocab.horizon_steps)
            traj = Trajectory(poses, tiny_vocab.dt)
            flat = vocab.flatten_poses(poses[None], tiny_vocab.heading_weight)[0]
            dists = [float(((row - flat) ** 2).sum()) for row in tiny_vocab.flat()]
            assert vocab.nearest_vocab_index(tiny_vocab, traj) == int(np.argmin(dists))


class TestPersistence:
    def test_round_trip(self, tiny_vocab, tmp_path):
        path = tmp_path / "v.vocab"
        digest = vocab.save_vocabulary(path, tiny_vocab, provenance={"seed": 3})
        loaded = vocab.load_vocabulary(path)
        assert np.array_equal(loaded.trajectories, tiny_vocab.trajectories)
        assert loaded.dt == tiny_vocab.dt
        assert loaded.heading_weight == tiny_vocab.heading_weight
        assert digest == vocab.vocabulary_hash(tiny_vocab)
        assert (tmp_path / "v.vocab.json").exists()

    def test_hash_changes_with_content(self, tiny_vocab):
        poses = tiny_vocab.trajectories.copy()
        poses[0, 0, 0] += 1e-9
        other = vocab.Vocabulary(poses, tiny_vocab.dt, tiny_vocab.heading_weight)
        assert vocab.vocabulary_hash(other) != vocab.vocabulary_hash(tiny_vocab)

    def test_reject_non_vocab_file(self, tmp_path):
        path = tmp_path / "junk.vocab"
        path.write_bytes(b"not a vocabulary")
        with pytest.raises(ConfigurationError):
            vocab.load_vocabulary(path)
