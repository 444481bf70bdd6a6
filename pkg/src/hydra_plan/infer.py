"""Trajectory selection from predicted scores.

The assembled cost follows the weighted negative-log form

    cost_i = -(w1*log S_im + w2*log S_nc + w3*log S_dac
               + w4*log(5*S_ttc + 2*S_comfort + 5*S_ep))

with every score clamped to [eps, 1] before the logs and the inner weighted
sum clamped below at eps.  The inner sum is deliberately left unnormalized
(no /12): the difference is a constant shift of w4*log(12), so the selected
index is identical either way.  Costs may therefore be negative; only the
ordering matters.

Also here: grid search for the four confidence weights, sub-score ensembling
across independently trained models, and the two ablation baselines (argmax
imitation; rule-based post-processing on perception reconstructed from the
noisy raster).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from skimage import measure

from . import geometry as geo
from .errors import ConfigurationError
from .metrics import (DEFAULT_EGO_DIMS, METRIC_COLUMNS, MetricLimits, pdm_score_array,
                      subscore_batch)
from .model import PredictionBundle, SCORE_EPS
from .validation import as_float_array
from .vocab import Vocabulary
from .world import Observation, Perception, Pose

WEIGHT_RANGES = {"w1": (0.01, 0.1), "w2": (0.1, 1.0), "w3": (0.1, 1.0), "w4": (1.0, 10.0)}


@dataclass(frozen=True)
class CostWeights:
    """Confidence weights for the assembled cost; defaults are the upper ends
    of the search ranges, so they are members of any log-spaced grid."""

    w1: float = 0.1
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 10.0

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"CostWeights.{name} must be positive")

    def as_tuple(self):
        return (self.w1, self.w2, self.w3, self.w4)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GridConfig:
    """Log-spaced grid over the paper ranges; `points` samples per weight."""

    points: int = 4
    ranges: tuple = (
        ("w1", WEIGHT_RANGES["w1"]),
        ("w2", WEIGHT_RANGES["w2"]),
        ("w3", WEIGHT_RANGES["w3"]),
        ("w4", WEIGHT_RANGES["w4"]),
    )

    def __post_init__(self):
        if self.points < 1:
            raise ConfigurationError("GridConfig.points must be at least 1")

    def axes(self):
        out = []
        for _, (lo, hi) in self.ranges:
            if self.points == 1:
                out.append(np.array([hi]))
            else:
                out.append(np.geomspace(lo, hi, self.points))
        return out


def _cost_terms(bundle: PredictionBundle):
    """The four negative-log cost components, each (k,)."""
    im = np.log(np.clip(bundle.imitation, SCORE_EPS, 1.0))
    ms = bundle.metric_scores
    if ms.shape[1] == len(METRIC_COLUMNS):
        nc = np.log(np.clip(ms[:, 0], SCORE_EPS, 1.0))
        dac = np.log(np.clip(ms[:, 1], SCORE_EPS, 1.0))
        inner = 5.0 * np.clip(ms[:, 2], SCORE_EPS, 1.0) + 2.0 * np.clip(ms[:, 3], SCORE_EPS, 1.0) \
            + 5.0 * np.clip(ms[:, 4], SCORE_EPS, 1.0)
        rest = np.log(np.maximum(inner, SCORE_EPS))
    elif ms.shape[1] == 1:
        # single aggregate-score head: the rule-based mass collapses onto w4
        nc = np.zeros(len(bundle))
        dac = np.zeros(len(bundle))
        rest = np.log(np.clip(ms[:, 0], SCORE_EPS, 1.0))
    else:
        raise ConfigurationError(f"unsupported metric head count {ms.shape[1]}")
    return im, nc, dac, rest


def assemble_cost(bundle: PredictionBundle, weights: CostWeights) -> np.ndarray:
    """Per-entry selection cost; lower is better."""
    im, nc, dac, rest = _cost_terms(bundle)
    w1, w2, w3, w4 = weights.as_tuple()
    return -(w1 * im + w2 * nc + w3 * dac + w4 * rest)


def select_trajectory(bundle: PredictionBundle, weights: CostWeights, vocab: Vocabulary):
    """Lowest assembled cost wins; ties go to the lowest index."""
    if len(vocab) != len(bundle):
        raise ConfigurationError("select_trajectory: vocabulary size does not match bundle")
    cost = assemble_cost(bundle, weights)
    idx = int(np.argmin(cost))
    return idx, vocab.entry(idx)


def grid_search_weights(bundles, entry_scores, grid: GridConfig = GridConfig()) -> CostWeights:
    """Pick the weight combination maximizing mean teacher score of the selections.

    bundles: one PredictionBundle per validation scenario; entry_scores:
    (n, k) teacher aggregate score of every vocabulary entry.  Ties break
    lexicographically (first combination in w1-major order wins).
    """
    if len(bundles) == 0:
        raise ConfigurationError("grid_search_weights: empty validation set")
    entry_scores = as_float_array(entry_scores, "entry_scores", ndim=2)
    if entry_scores.shape[0] != len(bundles):
        raise ConfigurationError("grid_search_weights: bundles/scores length mismatch")
    terms = np.stack([np.stack(_cost_terms(b)) for b in bundles])  # (n, 4, k)
    best_score = -np.inf
    best = None
    rows = np.arange(len(bundles))
    for combo in itertools.product(*grid.axes()):
        w = np.asarray(combo)
        cost = -np.einsum("w,nwk->nk", w, terms)
        picked = np.argmin(cost, axis=1)
        score = float(entry_scores[rows, picked].mean())
        if score > best_score:
            best_score = score
            best = combo
    return CostWeights(*[float(x) for x in best])


def ensemble_subscores(bundles, model_weights) -> PredictionBundle:
    """Convex combination of sub-scores (and imitation) across models."""
    if len(bundles) == 0:
        raise ConfigurationError("ensemble_subscores: no bundles")
    weights = as_float_array(model_weights, "model_weights", ndim=1)
    if len(weights) != len(bundles):
        raise ConfigurationError("ensemble_subscores: weights/bundles length mismatch")
    if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ConfigurationError("ensemble_subscores: weights must be non-negative and sum to 1")
    shape = bundles[0].metric_scores.shape
    for b in bundles:
        if b.metric_scores.shape != shape:
            raise ConfigurationError("ensemble_subscores: bundle shape mismatch")
    metric = sum(w * b.metric_scores for w, b in zip(weights, bundles))
    imitation = sum(w * b.imitation for w, b in zip(weights, bundles))
    imitation = imitation / imitation.sum()
    return PredictionBundle(imitation=imitation, metric_scores=metric)


# ---------------------------------------------------------------------------
# paradigm baselines
# ---------------------------------------------------------------------------

def reconstruct_perception(observation: Observation, ego_pose: Pose,
                           route_centerline) -> Perception:
    """Build a predicted world view from the thresholded noisy raster.

    The drivable channel is lightly closed (one 3x3 pass, enough to heal
    single-cell speckle but not occlusion patches) and traced into the
    largest closed contour; agent blobs become axis-aligned (in the ego
    frame) static rectangles.  The route is navigation input, not
    perception, so it is passed through unchanged.
    """
    raster = observation.bev_raster
    G = raster.shape[0]
    cell = observation.cell_size

    mask = raster[:, :, 0] >= 0.5
    mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))
    contours = measure.find_contours(mask.astype(float), 0.5)
    polygon = None
    if contours:
        areas = [abs(geo.polygon_area(c)) for c in contours]
        best = contours[int(np.argmax(areas))]
        if len(best) >= 4 and max(areas) > 1.0:
            local = (best - G / 2.0 + 0.5) * cell
            local = geo.resample_polyline(local, 1.5)[:-1]
            if len(local) >= 3:
                polygon = local
    if polygon is None:
        # nothing recognizable: fall back to a small patch under the ego
        half = 2.0 * cell
        polygon = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    if geo.polygon_area(polygon) < 0:
        polygon = polygon[::-1]
    world_poly = _local_to_world(polygon, ego_pose)

    agents = []
    blob_mask = raster[:, :, 1] >= 0.5
    labeled, n_blobs = ndimage.label(blob_mask, structure=np.ones((3, 3)))
    for sl in ndimage.find_objects(labeled):
        if sl is None:
            continue
        r0, r1 = sl[0].start, sl[0].stop
        c0, c1 = sl[1].start, sl[1].stop
        center_local = np.array([
            ((r0 + r1) / 2.0 - G / 2.0) * cell,
            ((c0 + c1) / 2.0 - G / 2.0) * cell,
        ])
        center_world = _local_to_world(center_local[None], ego_pose)[0]
        agents.append(
            _StaticAgent(center_world, ego_pose.heading,
                         max((r1 - r0) / 2.0 * cell, cell / 2.0),
                         max((c1 - c0) / 2.0 * cell, cell / 2.0))
        )
    return Perception(
        drivable_area=world_poly,
        route_centerline=np.asarray(route_centerline, dtype=float),
        agents=tuple(agents),
        expert_trajectory=None,
    )


def _local_to_world(points, ego_pose: Pose):
    c, s = math.cos(ego_pose.heading), math.sin(ego_pose.heading)
    points = np.asarray(points, dtype=float)
    out = np.empty_like(points)
    out[:, 0] = ego_pose.x + points[:, 0] * c - points[:, 1] * s
    out[:, 1] = ego_pose.y + points[:, 0] * s + points[:, 1] * c
    return out


class _StaticAgent:
    """Duck-typed agent for reconstructed perception (no velocity estimate)."""

    def __init__(self, center, heading, half_length, half_width):
        self.initial_pose = Pose(float(center[0]), float(center[1]), float(heading))
        self.velocity = 0.0
        self.half_length = float(half_length)
        self.half_width = float(half_width)


def perception_cost_scores(world, vocab: Vocabulary, ego_pose: Pose,
                           ego_dims=DEFAULT_EGO_DIMS,
                           limits: MetricLimits = MetricLimits(), tau: float = 1.0) -> np.ndarray:
    """Aggregate score of every entry evaluated in a (possibly predicted) world."""
    world_poses = geo.transform_to_world(vocab.trajectories, ego_pose.as_array())
    sub = subscore_batch(world, world_poses, vocab.dt, ego_dims, limits, tau)
    return pdm_score_array(sub)


def baseline_select(mode: str, bundle, world, vocab: Vocabulary, ego_pose: Pose | None = None,
                    ego_dims=DEFAULT_EGO_DIMS, limits: MetricLimits = MetricLimits(),
                    tau: float = 1.0):
    """Selection under the two ablation paradigms.

    mode "A": argmax of the imitation distribution (bundle required).
    mode "B": rule-based cost argmin in `world` — ground truth for the
    oracle check, or a `reconstruct_perception` output for the noisy
    post-processing baseline; `ego_pose` anchors the vocabulary frame
    (defaults to `world.ego_start` when present).
    """
    if mode == "A":
        if bundle is None:
            raise ConfigurationError("baseline_select mode A needs a prediction bundle")
        idx = int(np.argmax(bundle.imitation))
        return idx, vocab.entry(idx)
    if mode != "B":
        raise ConfigurationError(f"unknown baseline mode {mode!r}")
    if ego_pose is None:
        ego_pose = getattr(world, "ego_start", None)
        if ego_pose is None:
            raise ConfigurationError("baseline_select mode B needs an ego pose")
    scores = perception_cost_scores(world, vocab, ego_pose, ego_dims, limits, tau)
    idx = int(np.argmax(scores))
    return idx, vocab.entry(idx)


# ---------------------------------------------------------------------------
# weight persistence: flat key = value text file
# ---------------------------------------------------------------------------

def save_weights(path, weights: CostWeights) -> None:
    with open(path, "w") as fh:
        for name, value in weights.to_dict().items():
            fh.write(f"{name} = {value!r}\n")


def load_weights(path) -> CostWeights:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, _, raw = line.partition("=")
            values[name.strip()] = float(raw.strip())
    return CostWeights(**values)
