"""Trainable trajectory scorer with exact analytic gradients.

The network maps a degraded BEV raster plus the ego status onto one imitation
score and one score per metric head for every vocabulary entry:

    raster --pool/flatten--> affine+tanh+affine --> environment tokens F (T, d)
    status ----------------> affine ------------> ego feature e (d,)
    vocab entries ---------> affine+tanh+affine -> latents (k, d), + e
    latents x F -----------> single-head scaled dot-product cross-attention
                             with a residual connection and output projection
    fused latents ---------> imitation head (softmax over k)
                          -> per-metric heads (logistic)

Everything is float64 numpy; forward/backward are hand-written so gradients
can be verified against central finite differences.  Parameters live in one
flat array with named views, which is also the checkpoint payload.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError, NumericalError
from .validation import as_float_array, ensure_finite, ensure_unit_interval
from .metrics import METRIC_COLUMNS, TeacherLabels
from .vocab import Vocabulary, flatten_poses, median_pairwise_distance, squared_distances_to
from .world import Observation, Trajectory

_CKPT_MAGIC = b"HPLAN-CKPT-1\n"
_MODEL_SALT = 0x3D0DE100
SCORE_EPS = 1e-6

# fixed input scalings (not learned): raster centered, status and vocab
# features brought to unit-ish range so tanh layers start well-conditioned
_STATUS_SCALE = np.array([0.1, 1.0, 1.0, 0.2])
_VOCAB_FEATURE_SCALE = 0.05


@dataclass(frozen=True)
class ModelConfig:
    grid_size: int = 64
    pool: int = 2
    encoder_hidden: int = 128
    n_tokens: int = 4
    embed_dim: int = 64
    traj_hidden: int = 128
    horizon_steps: int = 40
    vocab_size: int = 256
    heads: tuple = METRIC_COLUMNS

    def __post_init__(self):
        if self.grid_size < 16 or self.grid_size % self.pool != 0:
            raise ConfigurationError("grid_size must be >= 16 and divisible by pool")
        for name in ("pool", "encoder_hidden", "n_tokens", "embed_dim", "traj_hidden",
                     "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"ModelConfig.{name} must be positive")
        if self.horizon_steps <= 1:
            raise ConfigurationError("horizon_steps must exceed 1")
        heads = tuple(self.heads)
        if heads not in (tuple(METRIC_COLUMNS), ("pdm",)):
            raise ConfigurationError("heads must be the five metric columns or ('pdm',)")
        object.__setattr__(self, "heads", heads)

    @property
    def raster_inputs(self):
        side = self.grid_size // self.pool
        return side * side * 2

    @property
    def traj_inputs(self):
        return self.horizon_steps * 3

    @property
    def n_heads(self):
        return len(self.heads)

    def to_dict(self):
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d


def _param_spec(cfg: ModelConfig):
    d = cfg.embed_dim
    return [
        ("enc_w1", (cfg.raster_inputs, cfg.encoder_hidden)),
        ("enc_b1", (cfg.encoder_hidden,)),
        ("enc_w2", (cfg.encoder_hidden, cfg.n_tokens * d)),
        ("enc_b2", (cfg.n_tokens * d,)),
        ("ego_w", (4, d)),
        ("ego_b", (d,)),
        ("emb_w1", (cfg.traj_inputs, cfg.traj_hidden)),
        ("emb_b1", (cfg.traj_hidden,)),
        ("emb_w2", (cfg.traj_hidden, d)),
        ("emb_b2", (d,)),
        ("att_wq", (d, d)),
        ("att_wk", (d, d)),
        ("att_wv", (d, d)),
        ("att_wo", (d, d)),
        ("head_w", (cfg.n_heads, d)),
        ("head_b", (cfg.n_heads,)),
        ("im_w", (d,)),
        ("im_b", ()),
    ]


class StudentModel:
    """Parameter container plus forward/backward passes."""

    def __init__(self, config: ModelConfig, params: np.ndarray | None = None,
                 vocab_hash: str | None = None):
        self.config = config
        self.spec = _param_spec(config)
        self.n_params = sum(int(np.prod(shape)) for _, shape in self.spec)
        if params is None:
            params = np.zeros(self.n_params)
        params = as_float_array(params, "params", shape=(self.n_params,))
        ensure_finite(params, "params")
        self.params = params.copy()
        self.vocab_hash = vocab_hash
        self._views = {}
        offset = 0
        for name, shape in self.spec:
            size = int(np.prod(shape))
            self._views[name] = self.params[offset:offset + size].reshape(shape)
            offset += size

    def view(self, name):
        return self._views[name]

    def grad_views(self, flat):
        views = {}
        offset = 0
        for name, shape in self.spec:
            size = int(np.prod(shape))
            views[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return views


def init_model(config: ModelConfig, seed: int, vocab_hash: str | None = None) -> StudentModel:
    """Gaussian init scaled by 1/sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng([_MODEL_SALT, int(seed)])
    model = StudentModel(config, vocab_hash=vocab_hash)
    for name, shape in model.spec:
        w = model.view(name)
        if len(shape) >= 2:
            w[...] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        elif name.endswith("_w"):
            w[...] = rng.normal(0.0, 1.0 / math.sqrt(config.embed_dim), size=shape)
        # biases stay zero
    return model


@dataclass(frozen=True)
class PredictionBundle:
    """Student outputs for one scenario: softmaxed imitation scores plus one
    column of logistic scores per metric head."""

    imitation: np.ndarray  # (k,)
    metric_scores: np.ndarray  # (k, n_heads)

    def __post_init__(self):
        im = as_float_array(self.imitation, "imitation", ndim=1)
        ms = as_float_array(self.metric_scores, "metric_scores", ndim=2)
        if ms.shape[0] != im.shape[0]:
            raise ConfigurationError("imitation and metric_scores disagree on k")
        ensure_finite(im, "imitation")
        ensure_finite(ms, "metric_scores")
        if abs(float(im.sum()) - 1.0) > 1e-6 or np.any(im < 0):
            raise ConfigurationError("imitation must be a probability distribution")
        ensure_unit_interval(ms, "metric_scores")
        im.setflags(write=False)
        ms.setflags(write=False)
        object.__setattr__(self, "imitation", im)
        object.__setattr__(self, "metric_scores", ms)

    def __len__(self):
        return self.imitation.shape[0]


@dataclass(frozen=True)
class ImitationTarget:
    """Softmax distribution over vocabulary entries derived from expert distance."""

    y: np.ndarray  # (k,)

    def __post_init__(self):
        y = as_float_array(self.y, "ImitationTarget.y", ndim=1)
        ensure_finite(y, "ImitationTarget.y")
        if np.any(y < 0) or abs(float(y.sum()) - 1.0) > 1e-9:
            raise ConfigurationError("ImitationTarget.y must be a probability distribution")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)


def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _pool_rasters(rasters, pool):
    B, G, _, C = rasters.shape
    side = G // pool
    pooled = rasters.reshape(B, side, pool, side, pool, C).mean(axis=(2, 4))
    return pooled.reshape(B, side * side * C)


def forward_arrays(model: StudentModel, rasters, statuses, vocab_flat, want_cache=False):
    """Batched forward pass.

    rasters (B, G, G, 2), statuses (B, 4), vocab_flat (k, H*3).
    Returns (imitation (B, k), metric (B, k, M), cache or None).

    The trajectory latents decompose as vp[b, k] = emb[k] + e[b], so the query
    projection is computed once per entry plus once per sample, and the output
    projection is folded into the attention values; nothing here costs
    O(B*k*d^2).
    """
    cfg = model.config
    v = model.view
    X = (rasters if rasters.ndim == 2 else _pool_rasters(rasters, cfg.pool)) - 0.5
    S = statuses * _STATUS_SCALE
    Vf = vocab_flat * _VOCAB_FEATURE_SCALE

    t1 = np.tanh(X @ v("enc_w1") + v("enc_b1"))
    f_env = (t1 @ v("enc_w2") + v("enc_b2")).reshape(X.shape[0], cfg.n_tokens, cfg.embed_dim)
    e = S @ v("ego_w") + v("ego_b")
    m1 = np.tanh(Vf @ v("emb_w1") + v("emb_b1"))
    emb = m1 @ v("emb_w2") + v("emb_b2")
    q_emb = emb @ v("att_wq")  # (k, d)
    q_ego = e @ v("att_wq")  # (B, d)
    kk = f_env @ v("att_wk")
    vv = f_env @ v("att_wv")
    scale = 1.0 / math.sqrt(cfg.embed_dim)
    att_logits = (kk @ q_emb.T).transpose(0, 2, 1)  # (B, k, T)
    att_logits += (kk @ q_ego[:, :, None])[:, None, :, 0]
    att = _softmax(att_logits * scale, axis=-1)
    vvo = vv @ v("att_wo")
    ctxo = att @ vvo  # == (att @ vv) @ wo
    # vpp = emb[None] + e[:, None] + ctxo, kept in factored form
    im_logits = (emb @ v("im_w"))[None, :] + (e @ v("im_w"))[:, None] \
        + ctxo @ v("im_w") + v("im_b")
    imitation = _softmax(im_logits, axis=-1)
    zm = (emb @ v("head_w").T)[None, :, :] + (e @ v("head_w").T)[:, None, :] \
        + ctxo @ v("head_w").T + v("head_b")
    metric = 1.0 / (1.0 + np.exp(-zm))
    cache = None
    if want_cache:
        cache = dict(X=X, S=S, Vf=Vf, t1=t1, f_env=f_env, m1=m1, emb=emb, e=e,
                     q_emb=q_emb, q_ego=q_ego, kk=kk, vv=vv, att=att, vvo=vvo,
                     ctxo=ctxo, imitation=imitation, metric=metric, scale=scale)
    return imitation, metric, cache


def forward(model: StudentModel, observation: Observation, vocab: Vocabulary) -> PredictionBundle:
    """Score every vocabulary entry for one observation."""
    cfg = model.config
    if observation.bev_raster.shape != (cfg.grid_size, cfg.grid_size, 2):
        raise ConfigurationError(
            f"observation raster {observation.bev_raster.shape} does not match "
            f"model grid ({cfg.grid_size})"
        )
    if len(vocab) != cfg.vocab_size or vocab.horizon_steps != cfg.horizon_steps:
        raise ConfigurationError("vocabulary size/horizon does not match model config")
    imitation, metric, _ = forward_arrays(
        model, observation.bev_raster[None], observation.ego_status[None], vocab.flat()
    )
    return PredictionBundle(imitation=imitation[0], metric_scores=metric[0])


def imitation_target(vocab: Vocabulary, expert: Trajectory, sigma: float | None = None) -> ImitationTarget:
    """Softmax over negative squared expert-to-entry distances.

    sigma is the distance temperature in metres; at sigma=1 the weights are
    exp(-d^2) exactly.  The default is the median pairwise vocabulary distance,
    which keeps the distribution usefully soft at any vocabulary scale.
    """
    if len(vocab) == 0:
        raise ConfigurationError("imitation_target: empty vocabulary")
    if sigma is None:
        sigma = median_pairwise_distance(vocab)
    if sigma <= 0:
        raise ConfigurationError("imitation_target: sigma must be positive")
    d2 = squared_distances_to(vocab, expert.poses)
    return ImitationTarget(y=_softmax(-d2 / (sigma * sigma)))


def imitation_loss(bundle: PredictionBundle, target: ImitationTarget) -> float:
    """Cross-entropy between the softmaxed imitation scores and the target."""
    return float(imitation_loss_array(bundle.imitation[None], target.y[None]))


def imitation_loss_array(im, y):
    if im.shape != y.shape:
        raise ConfigurationError("imitation_loss: shape mismatch")
    clipped = np.clip(im, SCORE_EPS, 1.0)
    return np.mean(-np.sum(y * np.log(clipped), axis=-1))


def distillation_loss(bundle: PredictionBundle, labels) -> float:
    """Mean binary cross-entropy between predicted and simulated sub-scores.

    The continuous progress column participates as a soft target.  `labels`
    may be TeacherLabels or a plain (k, n_heads) array aligned to the bundle.
    """
    ref = labels.scores if isinstance(labels, TeacherLabels) else np.asarray(labels, dtype=float)
    if ref.shape != bundle.metric_scores.shape:
        raise ConfigurationError("distillation_loss: shape mismatch")
    return float(distillation_loss_array(bundle.metric_scores[None], ref[None]))


def distillation_loss_array(pred, ref):
    clipped = np.clip(pred, SCORE_EPS, 1.0 - SCORE_EPS)
    bce = -(ref * np.log(clipped) + (1.0 - ref) * np.log(1.0 - clipped))
    return np.mean(bce, axis=(-2, -1)).mean()


def loss_and_gradients(model: StudentModel, rasters, statuses, vocab_flat, targets,
                       labels, kd_weight: float):
    """Total loss L_im + kd_weight * L_kd and its exact gradient.

    targets (B, k) rows are imitation distributions; labels (B, k, M) are
    teacher sub-scores.  Returns (report dict, flat gradient).
    """
    cfg = model.config
    B, k = targets.shape
    M = cfg.n_heads
    imitation, metric, c = forward_arrays(model, rasters, statuses, vocab_flat, want_cache=True)

    im_clip = np.clip(imitation, SCORE_EPS, 1.0)
    loss_im = float(np.mean(-np.sum(targets * np.log(im_clip), axis=1)))
    met_clip = np.clip(metric, SCORE_EPS, 1.0 - SCORE_EPS)
    bce = -(labels * np.log(met_clip) + (1.0 - labels) * np.log(1.0 - met_clip))
    loss_kd = float(np.mean(bce))
    loss = loss_im + kd_weight * loss_kd
    if not math.isfinite(loss):
        role = "imitation loss" if not math.isfinite(loss_im) else "distillation loss"
        raise NumericalError(f"non-finite {role}")

    grad = np.zeros_like(model.params)
    g = model.grad_views(grad)
    v = model.view

    # softmax imitation head, through the log clamp
    d_im = np.where(imitation > SCORE_EPS, -targets / im_clip, 0.0) / B
    d_logits = imitation * (d_im - np.sum(d_im * imitation, axis=1, keepdims=True))
    # logistic metric heads, through the BCE clamp
    inside = (metric > SCORE_EPS) & (metric < 1.0 - SCORE_EPS)
    d_met = np.where(inside, -labels / met_clip + (1.0 - labels) / (1.0 - met_clip), 0.0)
    d_zm = d_met * metric * (1.0 - metric) * (kd_weight / (B * k * M))

    # heads read vpp = emb[None] + e[:, None] + ctxo (factored)
    emb, e, ctxo, att = c["emb"], c["e"], c["ctxo"], c["att"]
    d = emb.shape[1]
    sum_logits_b = d_logits.sum(axis=0)  # (k,)
    sum_logits_k = d_logits.sum(axis=1)  # (B,)
    g["im_w"][...] = sum_logits_b @ emb + sum_logits_k @ e \
        + d_logits.reshape(-1) @ ctxo.reshape(-1, d)
    g["im_b"][...] = d_logits.sum()
    g["head_w"][...] = d_zm.sum(axis=0).T @ emb + d_zm.sum(axis=1).T @ e \
        + d_zm.reshape(-1, M).T @ ctxo.reshape(-1, d)
    g["head_b"][...] = d_zm.sum(axis=(0, 1))

    d_vpp = d_logits[..., None] * v("im_w")[None, None, :]
    d_vpp += d_zm @ v("head_w")
    d_emb = d_vpp.sum(axis=0)  # (k, d)
    d_e = d_vpp.sum(axis=1)  # (B, d)

    # ctxo = att @ (vv @ wo); att = softmax((q_emb + q_ego) kk^T * scale)
    d_att = d_vpp @ c["vvo"].transpose(0, 2, 1)
    d_vvo = att.transpose(0, 2, 1) @ d_vpp
    d_att_logits = att * (d_att - np.sum(d_att * att, axis=-1, keepdims=True))
    d_q_emb = (d_att_logits.transpose(1, 0, 2).reshape(k, -1)
               @ c["kk"].reshape(-1, d)) * c["scale"]
    d_q_ego = ((d_att_logits.sum(axis=1)[:, None, :] @ c["kk"])[:, 0, :]) * c["scale"]
    d_kk = (d_att_logits.transpose(0, 2, 1) @ c["q_emb"]
            + d_att_logits.sum(axis=1)[:, :, None] * c["q_ego"][:, None, :]) * c["scale"]

    g["att_wo"][...] = c["vv"].reshape(-1, d).T @ d_vvo.reshape(-1, d)
    d_vv = d_vvo @ v("att_wo").T
    g["att_wq"][...] = emb.T @ d_q_emb + e.T @ d_q_ego
    d_emb += d_q_emb @ v("att_wq").T
    d_e += d_q_ego @ v("att_wq").T
    d_f = d_kk @ v("att_wk").T + d_vv @ v("att_wv").T
    g["att_wk"][...] = c["f_env"].reshape(-1, d).T @ d_kk.reshape(-1, d)
    g["att_wv"][...] = c["f_env"].reshape(-1, d).T @ d_vv.reshape(-1, d)

    g["ego_w"][...] = c["S"].T @ d_e
    g["ego_b"][...] = d_e.sum(axis=0)

    d_m1 = d_emb @ v("emb_w2").T
    g["emb_w2"][...] = c["m1"].T @ d_emb
    g["emb_b2"][...] = d_emb.sum(axis=0)
    d_pre_m1 = d_m1 * (1.0 - c["m1"] ** 2)
    g["emb_w1"][...] = c["Vf"].T @ d_pre_m1
    g["emb_b1"][...] = d_pre_m1.sum(axis=0)

    d_f_flat = d_f.reshape(B, -1)
    g["enc_w2"][...] = c["t1"].T @ d_f_flat
    g["enc_b2"][...] = d_f_flat.sum(axis=0)
    d_t1 = d_f_flat @ v("enc_w2").T
    d_pre_t1 = d_t1 * (1.0 - c["t1"] ** 2)
    g["enc_w1"][...] = c["X"].T @ d_pre_t1
    g["enc_b1"][...] = d_pre_t1.sum(axis=0)

    if not np.all(np.isfinite(grad)):
        for name, view in g.items():
            if not np.all(np.isfinite(view)):
                raise NumericalError(f"non-finite gradient for '{name}'")
    report = {"loss": loss, "imitation": loss_im, "distillation": loss_kd}
    return report, grad


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; mutated in place by train_step."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ensure(self, n_params):
        if self.m is None:
            self.m = np.zeros(n_params)
            self.v = np.zeros(n_params)


@dataclass(frozen=True)
class TrainBatch:
    """Stacked training arrays for one step; vocab_flat is shared by reference."""

    rasters: np.ndarray  # (B, G, G, 2)
    statuses: np.ndarray  # (B, 4)
    targets: np.ndarray  # (B, k)
    labels: np.ndarray  # (B, k, M)
    vocab_flat: np.ndarray  # (k, H*3)


def make_batch(samples, vocab: Vocabulary, head_mode="multi") -> TrainBatch:
    """Stack (Observation, ImitationTarget, TeacherLabels) triples.

    head_mode 'multi' keeps the five metric columns; 'pdm' collapses them to
    one aggregate-score column.
    """
    from .metrics import pdm_score_array

    rasters = np.stack([obs.bev_raster for obs, _, _ in samples])
    statuses = np.stack([obs.ego_status for obs, _, _ in samples])
    targets = np.stack([tgt.y for _, tgt, _ in samples])
    raw = np.stack([lab.scores for _, _, lab in samples])
    labels = pdm_score_array(raw)[..., None] if head_mode == "pdm" else raw
    return TrainBatch(rasters, statuses, targets, labels, vocab.flat())


def train_step(model: StudentModel, opt: AdamState, batch: TrainBatch,
               kd_weight: float = 1.0) -> dict:
    """One Adam update on L_im + kd_weight * L_kd; returns the loss report."""
    report, grad = loss_and_gradients(
        model, batch.rasters, batch.statuses, batch.vocab_flat,
        batch.targets, batch.labels, kd_weight,
    )
    opt.ensure(model.n_params)
    if opt.weight_decay:
        grad = grad + opt.weight_decay * model.params
    opt.t += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.t)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.t)
    model.params -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return report


# ---------------------------------------------------------------------------
# checkpoints: versioned header + flat float64 parameter array
#
# layout: magic b"HPLAN-CKPT-1\n", little-endian uint64 header length, UTF-8
# JSON header {"arch": ..., "dtype": "<f8", "n_params": ..., "vocab_hash": ...}
# with sorted keys, then the raw parameter bytes in spec order.
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: StudentModel) -> None:
    header = json.dumps(
        {
            "arch": model.config.to_dict(),
            "dtype": "<f8",
            "n_params": model.n_params,
            "vocab_hash": model.vocab_hash,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(model.params, dtype="<f8").tobytes())


def load_checkpoint(path) -> StudentModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_CKPT_MAGIC):
        raise ConfigurationError(f"{path} is not a checkpoint file")
    offset = len(_CKPT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    header = json.loads(blob[offset:offset + header_len])
    offset += header_len
    arch = dict(header["arch"])
    arch["heads"] = tuple(arch["heads"])
    config = ModelConfig(**arch)
    params = np.frombuffer(blob, dtype="<f8", offset=offset).astype(float)
    if params.shape[0] != header["n_params"]:
        raise ConfigurationError(f"{path}: parameter payload truncated")
    return StudentModel(config, params=params, vocab_hash=header["vocab_hash"])
