"""Fixed planning vocabulary built by K-means over sampled trajectories.

Trajectories are flattened to length H*3 vectors (x, y, heading per timestep)
before clustering.  Headings are unwrapped along time first — per-step turns
are far below pi, so unwrapping is exact — which keeps cluster means away from
the +-pi seam, and are scaled by a weight that commensurates radians with
meters.  The same flattening defines every trajectory distance in the package
(clustering, nearest lookup, imitation targets).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import geometry as geo
from .errors import ConfigurationError, NumericalError
from .validation import as_float_array, ensure_finite
from .world import Trajectory

_VOCAB_MAGIC = b"HPLAN-VOCAB-1\n"
_SAMPLE_SALT = 0x7A3B0001
_KMEANS_SALT = 0x7A3B0002


@dataclass(frozen=True)
class KinematicConfig:
    """Bounds for the random piecewise-constant (accel, yaw-rate) controls."""

    accel: tuple = (-1.5, 1.5)
    yaw_rate_max: float = 0.5
    initial_speed: tuple = (0.0, 12.0)
    speed_max: float = 15.0
    n_segments: int = 3
    horizon_steps: int = 40
    dt: float = 0.1

    def __post_init__(self):
        if self.accel[1] < self.accel[0]:
            raise ConfigurationError("accel range must be ordered")
        if self.yaw_rate_max < 0:
            raise ConfigurationError("yaw_rate_max must be non-negative")
        if self.initial_speed[0] < 0 or self.initial_speed[1] < self.initial_speed[0]:
            raise ConfigurationError("initial_speed range must be ordered and non-negative")
        if self.n_segments < 1:
            raise ConfigurationError("n_segments must be at least 1")
        if self.horizon_steps <= 1:
            raise ConfigurationError("horizon_steps must exceed 1")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Vocabulary:
    """An index-addressable set of k candidate trajectories in the ego frame."""

    trajectories: np.ndarray  # (k, H, 3), headings wrapped
    dt: float
    heading_weight: float = 1.0

    def __post_init__(self):
        arr = as_float_array(self.trajectories, "Vocabulary.trajectories", ndim=3)
        if arr.shape[2] != 3:
            raise ConfigurationError("Vocabulary.trajectories must have shape (k, H, 3)")
        if arr.shape[0] < 1:
            raise ConfigurationError("Vocabulary must hold at least one trajectory")
        ensure_finite(arr, "Vocabulary.trajectories")
        if self.dt <= 0 or self.heading_weight <= 0:
            raise ConfigurationError("Vocabulary dt and heading_weight must be positive")
        arr = arr.copy()
        arr[:, :, 2] = geo.wrap_angle(arr[:, :, 2])
        flat = flatten_poses(arr, self.heading_weight)
        if len({row.tobytes() for row in flat}) != arr.shape[0]:
            raise ConfigurationError("Vocabulary entries must be distinct as flattened vectors")
        arr.setflags(write=False)
        object.__setattr__(self, "trajectories", arr)

    def __len__(self):
        return self.trajectories.shape[0]

    @property
    def horizon_steps(self):
        return self.trajectories.shape[1]

    def flat(self) -> np.ndarray:
        """Flattened (k, H*3) view used for every distance computation."""
        return flatten_poses(self.trajectories, self.heading_weight)

    def entry(self, i) -> Trajectory:
        return Trajectory(self.trajectories[i], self.dt)


def flatten_poses(poses, heading_weight):
    """Flatten (..., H, 3) pose arrays to (..., H*3) clustering vectors."""
    poses = np.asarray(poses, dtype=float)
    out = poses.copy()
    out[..., 2] = np.unwrap(poses[..., 2], axis=-1) * heading_weight
    return out.reshape(poses.shape[:-2] + (poses.shape[-2] * 3,))


def sample_trajectories(n: int, kin: KinematicConfig, seed: int) -> list:
    """Sample n kinematically-feasible trajectories starting at the origin pose."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    poses = sample_trajectory_array(n, kin, seed)
    return [Trajectory(poses[i], kin.dt) for i in range(n)]


def sample_trajectory_array(n: int, kin: KinematicConfig, seed: int) -> np.ndarray:
    """Array backend of `sample_trajectories`; returns (n, H, 3)."""
    rng = np.random.default_rng([_SAMPLE_SALT, int(seed)])
    H, dt = kin.horizon_steps, kin.dt
    n_seg = kin.n_segments
    accel_seg = rng.uniform(kin.accel[0], kin.accel[1], size=(n, n_seg))
    yaw_seg = rng.uniform(-kin.yaw_rate_max, kin.yaw_rate_max, size=(n, n_seg))
    # segment switch steps are randomized per trajectory so cluster means do
    # not all share a jerk spike at a common boundary
    switches = np.sort(rng.uniform(0.0, H, size=(n, n_seg - 1)), axis=1) if n_seg > 1 else np.empty((n, 0))
    steps = np.arange(H - 1)[None, :]
    seg_idx = np.sum(steps[:, :, None] >= switches[:, None, :], axis=2) if n_seg > 1 else np.zeros((n, H - 1), dtype=int)
    rows = np.arange(n)[:, None]
    accel = accel_seg[rows, seg_idx]  # (n, H-1)
    yaw_rate = yaw_seg[rows, seg_idx]

    v = rng.uniform(kin.initial_speed[0], kin.initial_speed[1], size=n)
    x = np.zeros(n)
    y = np.zeros(n)
    h = np.zeros(n)
    poses = np.zeros((n, H, 3))
    for t in range(H - 1):
        x = x + v * np.cos(h) * dt
        y = y + v * np.sin(h) * dt
        h = h + yaw_rate[:, t] * dt
        v = np.clip(v + accel[:, t] * dt, 0.0, kin.speed_max)
        poses[:, t + 1, 0] = x
        poses[:, t + 1, 1] = y
        poses[:, t + 1, 2] = h
    poses[:, :, 2] = geo.wrap_angle(poses[:, :, 2])
    return poses


def _as_pose_array(trajs):
    if isinstance(trajs, np.ndarray):
        return as_float_array(trajs, "trajectories", ndim=3), None
    if len(trajs) == 0:
        raise ConfigurationError("kmeans_cluster: empty input")
    dts = {t.dt for t in trajs}
    if len(dts) != 1:
        raise ConfigurationError("kmeans_cluster: trajectories disagree on dt")
    return np.stack([t.poses for t in trajs]), dts.pop()


def kmeans_cluster(trajs, k: int, max_iters: int = 50, tol: float = 1e-6, seed: int = 0,
                   heading_weight: float = 1.0, dt: float | None = None,
                   sse_trace: list | None = None) -> Vocabulary:
    """Lloyd's algorithm with k-means++ seeding over flattened trajectories.

    Raises a configuration error when k exceeds the number of distinct input
    vectors or the input is empty.  The per-iteration SSE is checked to be
    non-increasing (up to float roundoff); pass a list as `sse_trace` to
    record it.
    """
    poses, inferred_dt = _as_pose_array(trajs)
    dt = dt if dt is not None else inferred_dt
    if dt is None:
        raise ConfigurationError("kmeans_cluster: dt required for array input")
    if poses.shape[0] == 0:
        raise ConfigurationError("kmeans_cluster: empty input")
    if max_iters < 1:
        raise ConfigurationError("kmeans_cluster: max_iters must be at least 1")
    if tol < 0:
        raise ConfigurationError("kmeans_cluster: tol must be non-negative")
    X = flatten_poses(poses, heading_weight)
    n = X.shape[0]
    n_distinct = len({row.tobytes() for row in X})
    if k < 1 or k > n_distinct:
        raise ConfigurationError(
            f"kmeans_cluster: k={k} must lie in [1, {n_distinct}] (distinct inputs)"
        )

    rng = np.random.default_rng([_KMEANS_SALT, int(seed)])
    centers = _kmeans_pp_init(X, k, rng)
    prev_sse = np.inf
    for _ in range(max_iters):
        d2 = _pairwise_sq_dists(X, centers)
        assign = np.argmin(d2, axis=1)
        sse = float(d2[np.arange(n), assign].sum())
        if sse > prev_sse + 1e-8 * (1.0 + prev_sse):
            raise NumericalError("kmeans_cluster: SSE increased between iterations")
        if sse_trace is not None:
            sse_trace.append(sse)
        prev_sse = sse
        new_centers = centers.copy()
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, X)
        nonzero = counts > 0
        new_centers[nonzero] = sums[nonzero] / counts[nonzero, None]
        assign, new_centers, counts = _repair_empty_clusters(X, assign, new_centers, counts)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break

    out = centers.reshape(k, poses.shape[1], 3)
    out[:, :, 2] = geo.wrap_angle(out[:, :, 2] / heading_weight)
    return Vocabulary(trajectories=out, dt=float(dt), heading_weight=float(heading_weight))


def _kmeans_pp_init(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass at existing centers; pick any non-duplicate point
            candidates = np.nonzero(d2 == 0)[0]
            centers[i] = X[int(rng.choice(candidates))]
        else:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
            centers[i] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    return centers


def _pairwise_sq_dists(X, centers):
    # |x|^2 + |c|^2 - 2 x.c, clipped to zero against roundoff
    x2 = np.sum(X * X, axis=1)[:, None]
    c2 = np.sum(centers * centers, axis=1)[None, :]
    d2 = x2 + c2 - 2.0 * (X @ centers.T)
    return np.maximum(d2, 0.0)


def _repair_empty_clusters(X, assign, centers, counts):
    """Move the farthest point of the largest cluster into each empty cluster."""
    while np.any(counts == 0):
        empty = int(np.argmin(counts))
        largest = int(np.argmax(counts))
        if counts[largest] <= 1:
            raise NumericalError("kmeans_cluster: cannot repair empty cluster")
        members = np.nonzero(assign == largest)[0]
        d2 = np.sum((X[members] - centers[largest]) ** 2, axis=1)
        victim = members[int(np.argmax(d2))]
        centers[empty] = X[victim]
        assign[victim] = empty
        counts[empty] = 1
        counts[largest] -= 1
        remaining = np.nonzero(assign == largest)[0]
        centers[largest] = X[remaining].mean(axis=0)
    return assign, centers, counts


def nearest_vocab_index(vocab: Vocabulary, traj: Trajectory) -> int:
    """Index of the vocabulary entry closest in flattened squared L2 distance."""
    if len(vocab) == 0:
        raise ConfigurationError("nearest_vocab_index: empty vocabulary")
    flat = flatten_poses(traj.poses[None], vocab.heading_weight)[0]
    d2 = np.sum((vocab.flat() - flat) ** 2, axis=1)
    return int(np.argmin(d2))


def squared_distances_to(vocab: Vocabulary, poses) -> np.ndarray:
    """Flattened squared distances from one (H, 3) pose array to all entries."""
    flat = flatten_poses(np.asarray(poses)[None], vocab.heading_weight)[0]
    return np.sum((vocab.flat() - flat) ** 2, axis=1)


def median_pairwise_distance(vocab: Vocabulary) -> float:
    """Median flattened L2 distance between distinct vocabulary entries."""
    flat = vocab.flat()
    if len(flat) == 1:
        return 1.0
    d2 = _pairwise_sq_dists(flat, flat)
    iu = np.triu_indices(len(flat), k=1)
    return float(np.median(np.sqrt(d2[iu])))


# ---------------------------------------------------------------------------
# persistence: binary pose block with a JSON header and provenance sidecar
# ---------------------------------------------------------------------------

def _encode_vocabulary(vocab: Vocabulary) -> bytes:
    header = json.dumps(
        {
            "dt": vocab.dt,
            "dtype": "<f8",
            "heading_weight": vocab.heading_weight,
            "horizon_steps": int(vocab.horizon_steps),
            "k": len(vocab),
        },
        sort_keys=True,
    ).encode()
    body = np.ascontiguousarray(vocab.trajectories, dtype="<f8").tobytes()
    return _VOCAB_MAGIC + struct.pack("<Q", len(header)) + header + body


def vocabulary_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256(_encode_vocabulary(vocab)).hexdigest()


def save_vocabulary(path, vocab: Vocabulary, provenance: dict | None = None) -> str:
    """Write the vocabulary file plus `<path>.json` sidecar; returns its hash."""
    blob = _encode_vocabulary(vocab)
    with open(path, "wb") as fh:
        fh.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    sidecar = {"hash": digest, "provenance": provenance or {}}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def load_vocabulary(path) -> Vocabulary:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_VOCAB_MAGIC):
        raise ConfigurationError(f"{path} is not a vocabulary file")
    offset = len(_VOCAB_MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    header = json.loads(blob[offset:offset + header_len])
    offset += header_len
    arr = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(
        header["k"], header["horizon_steps"], 3
    )
    return Vocabulary(
        trajectories=arr.astype(float),
        dt=header["dt"],
        heading_weight=header["heading_weight"],
    )
