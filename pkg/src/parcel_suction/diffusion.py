"""Conditional diffusion over per-point suction scores.

Scores are squashed into (-scale, scale), noised with a cosine schedule and
recovered by a small per-point denoiser that fuses three branches (noisy
score, timestep embedding, point features) by addition, gates the channels
and adds a residual. Sampling uses deterministic DDIM updates.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BadSteps, BadT, EmptyDataset, MissingNormals, ShapeMismatch
from .geometry import PointCloud, SpatialIndex, _pca

MODEL_SCHEMA = "model/1"
N_FEATURES = 8
COSINE_S = 0.008
PARAM_NAMES = ("Wx", "bx", "Wt", "bt", "Wf", "bf", "Wg", "bg", "Wo", "bo")


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha_bar: np.ndarray
    scale: float = 0.5


def cosine_schedule(T: int, scale: float = 0.5) -> DiffusionSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise BadT(f"T must be a positive integer, got {T!r}")
    if not 0 < scale <= 1:
        raise ValueError("scale must be in (0, 1]")
    t = np.arange(T + 1) / T
    f = np.cos((t + COSINE_S) / (1 + COSINE_S) * np.pi / 2) ** 2
    ab = np.maximum(f / f[0], 1e-8)
    ab[0] = 1.0
    return DiffusionSchedule(int(T), ab, float(scale))


def scale_signal(x, scale: float):
    """(2 sigmoid(x) - 1) * scale, elementwise."""
    x = np.asarray(x, dtype=float)
    return (2.0 / (1.0 + np.exp(-x)) - 1.0) * scale


def unscale_signal(xs, scale: float):
    """Exact inverse of ``scale_signal``, clamped to [0, 1]."""
    u = (np.asarray(xs, dtype=float) / scale + 1.0) / 2.0
    u = np.clip(u, 1e-12, 1 - 1e-12)
    return np.clip(np.log(u) - np.log1p(-u), 0.0, 1.0)


def forward_sample(x0s, t: int, sched: DiffusionSchedule, eps):
    x0s = np.asarray(x0s, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0s.shape != eps.shape:
        raise ShapeMismatch(f"{x0s.shape} vs {eps.shape}")
    if not 0 <= t <= sched.T:
        raise BadSteps(f"t={t} outside [0, {sched.T}]")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0s + np.sqrt(1 - ab) * eps


# ---------------------------------------------------------------- features


def angular_deviation(normals, nbr):
    """Mean unsigned angle between each normal and its neighbours' normals."""
    dots = np.abs(np.einsum("nj,nkj->nk", normals, normals[nbr]))
    return np.arccos(np.clip(dots, 0.0, 1.0)).mean(axis=1)


def condition_features(cloud: PointCloud, k: int = 16, index: Optional[SpatialIndex] = None) -> np.ndarray:
    """(N, 8) per-point guidance features.

    Columns: n_z, angle to +z over pi, planarity, neighbour normal deviation
    over pi/2, normalised height, normalised radial distance, density rank,
    bias.
    """
    if cloud.normals is None:
        raise MissingNormals("condition features need normals")
    pts, nrm = cloud.points, cloud.normals
    n = len(pts)
    kk = min(k, n - 1)
    F = np.zeros((n, N_FEATURES))
    F[:, 0] = nrm[:, 2]
    F[:, 1] = np.arccos(np.clip(nrm[:, 2], -1.0, 1.0)) / np.pi
    F[:, 7] = 1.0
    zr = pts[:, 2].max() - pts[:, 2].min()
    F[:, 4] = (pts[:, 2] - pts[:, 2].min()) / zr if zr > 0 else 0.0
    rad = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    F[:, 5] = rad / rad.max() if rad.max() > 0 else 0.0
    if kk < 1:
        F[:, 2] = 1.0
        return F
    index = index or SpatialIndex(pts)
    nbr, dist = index.knn(pts, kk + 1)
    nbr, dist = nbr[:, 1:], dist[:, 1:]
    evals, _ = _pca(pts[np.concatenate([np.arange(n)[:, None], nbr], axis=1)])
    total = evals.sum(axis=1)
    F[:, 2] = np.where(total > 0, 1.0 - np.maximum(evals[:, 0], 0) / np.where(total > 0, total, 1.0), 1.0)
    F[:, 3] = np.clip(angular_deviation(nrm, nbr) / (np.pi / 2), 0.0, 1.0)
    spread = dist.mean(axis=1)
    rank = np.empty(n)
    # densest point (smallest neighbour spread) ranks highest
    rank[np.argsort(-spread, kind="stable")] = np.arange(n)
    F[:, 6] = rank / (n - 1) if n > 1 else 0.0
    return F


# ---------------------------------------------------------------- denoiser


def time_embedding(t, E: int):
    """Sin/cos pairs of t at E/2 geometric frequencies from 1 down to 1/100."""
    half = E // 2
    freqs = 100.0 ** (-np.arange(half) / max(half - 1, 1))
    arg = float(t) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


@dataclass
class DenoiserParams:
    Wx: np.ndarray
    bx: np.ndarray
    Wt: np.ndarray
    bt: np.ndarray
    Wf: np.ndarray
    bf: np.ndarray
    Wg: np.ndarray
    bg: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    @property
    def H(self):
        return self.Wx.shape[0]

    @property
    def E(self):
        return self.Wt.shape[1]

    @property
    def N_f(self):
        return self.Wf.shape[1]

    @classmethod
    def init(cls, rng, H: int = 64, E: int = 16, N_f: int = N_FEATURES) -> "DenoiserParams":
        def w(rows, cols, gain=1.0):
            return rng.normal(0.0, gain / np.sqrt(cols), (rows, cols))

        return cls(w(H, 1), np.zeros(H), w(H, E), np.zeros(H), w(H, N_f), np.zeros(H),
                   w(H, H), np.zeros(H), w(1, H, 0.1), np.zeros(1))

    @classmethod
    def zeros(cls, H: int = 64, E: int = 16, N_f: int = N_FEATURES) -> "DenoiserParams":
        return cls(np.zeros((H, 1)), np.zeros(H), np.zeros((H, E)), np.zeros(H), np.zeros((H, N_f)),
                   np.zeros(H), np.zeros((H, H)), np.zeros(H), np.zeros((1, H)), np.zeros(1))

    def arrays(self):
        return [getattr(self, k) for k in PARAM_NAMES]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec) -> "DenoiserParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        return DenoiserParams(*out)


def _forward(p: DenoiserParams, x_t, t, F):
    x_t = np.asarray(x_t, dtype=float)
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[0] != x_t.shape[0] or F.shape[1] != p.N_f:
        raise ShapeMismatch(f"features {F.shape} incompatible with {x_t.shape[0]} points and N_f={p.N_f}")
    emb = time_embedding(t, p.E)
    h1 = np.tanh(x_t[:, None] * p.Wx[:, 0] + p.bx)
    h2 = np.tanh(p.Wt @ emb + p.bt)
    h3 = np.tanh(F @ p.Wf.T + p.bf)
    h = h1 + h2 + h3
    g = 1.0 / (1.0 + np.exp(-(h @ p.Wg.T + p.bg)))
    fused = h * g
    out = fused @ p.Wo[0] + p.bo[0] + x_t
    return out, (x_t, emb, F, h1, h2, h3, h, g, fused)


def denoise(params: DenoiserParams, x_t, t: int, sched: Optional[DiffusionSchedule], F) -> np.ndarray:
    """Predicted scaled clean scores for every point."""
    return _forward(params, x_t, t, F)[0]


def loss_and_grad(params: DenoiserParams, x0s, x_t, t, F):
    """Mean squared error of the prediction against ``x0s`` and its gradient."""
    out, (x, emb, F, h1, h2, h3, h, g, fused) = _forward(params, x_t, t, F)
    n = len(x)
    err = out - x0s
    loss = float(np.mean(err ** 2))
    dout = 2.0 * err / n
    dWo = (dout @ fused)[None, :]
    dbo = np.array([dout.sum()])
    dfused = dout[:, None] * params.Wo[0]
    dh = dfused * g
    dpre_g = dfused * h * g * (1.0 - g)
    dWg = dpre_g.T @ h
    dbg = dpre_g.sum(axis=0)
    dh = dh + dpre_g @ params.Wg
    d1 = dh * (1.0 - h1 ** 2)
    dWx = (d1.T @ x)[:, None]
    dbx = d1.sum(axis=0)
    d2 = (dh * (1.0 - h2 ** 2)).sum(axis=0)
    dWt = np.outer(d2, emb)
    dbt = d2
    d3 = dh * (1.0 - h3 ** 2)
    dWf = d3.T @ F
    dbf = d3.sum(axis=0)
    return loss, DenoiserParams(dWx, dbx, dWt, dbt, dWf, dbf, dWg, dbg, dWo, dbo)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    T_train: int = 20
    batch_scenes: int = 5
    lr: float = 0.05
    epochs: int = 200
    seed: int = 0
    scale: float = 0.5
    H: int = 64
    E: int = 16

    def __post_init__(self):
        if self.T_train < 1:
            raise BadT("T_train must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    params: DenoiserParams
    train_loss: list
    eval_loss: list
    config: TrainConfig


def _draw(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _noised(x0s, sched, rng):
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(len(x0s))
    return t, forward_sample(x0s, t, sched, eps)


def train(dataset: Sequence, cfg: TrainConfig = TrainConfig(), log: Optional[Callable] = None) -> TrainResult:
    """SGD on the denoising loss.

    ``dataset`` holds (features (N, N_f), ground-truth scores (N,)) pairs;
    targets are the scaled scores. ``eval_loss[e]`` is the loss after ``e``
    epochs on a fixed set of (t, noise) draws, so entry 0 is the untrained loss.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training scenes")
    sched = cosine_schedule(cfg.T_train, cfg.scale)
    targets = [scale_signal(gt, cfg.scale) for _, gt in dataset]
    feats = [np.asarray(F, dtype=float) for F, _ in dataset]
    params = DenoiserParams.init(_draw(cfg.seed, 0), cfg.H, cfg.E, feats[0].shape[1])
    fixed = [_noised(x0s, sched, _draw(cfg.seed, 1, i)) for i, x0s in enumerate(targets)]

    def evaluate(p):
        return float(np.mean([np.mean((denoise(p, xt, t, sched, F) - x0s) ** 2)
                              for (t, xt), F, x0s in zip(fixed, feats, targets)]))

    train_curve, eval_curve = [], [evaluate(params)]
    n = len(dataset)
    bs = max(1, min(cfg.batch_scenes, n))
    for epoch in range(cfg.epochs):
        order = _draw(cfg.seed, 2, epoch).permutation(n)
        losses = []
        for start in range(0, n, bs):
            batch = order[start:start + bs]
            grad_sum, loss_sum = None, 0.0
            for i in batch:
                t, xt = _noised(targets[i], sched, _draw(cfg.seed, 3, epoch, i))
                loss, grad = loss_and_grad(params, targets[i], xt, t, feats[i])
                loss_sum += loss
                grad_sum = grad.flat() if grad_sum is None else grad_sum + grad.flat()
            params = params.with_flat(params.flat() - cfg.lr * grad_sum / len(batch))
            losses.append(loss_sum / len(batch))
        train_curve.append(float(np.mean(losses)))
        eval_curve.append(evaluate(params))
        if log is not None:
            log(epoch + 1, train_curve[-1], eval_curve[-1])
    return TrainResult(params, train_curve, eval_curve, cfg)


# ---------------------------------------------------------------- sampling


def ddim_step(x_t, x0_pred, t: int, t_prev: int, sched: DiffusionSchedule):
    """Deterministic (eta = 0) DDIM update from step t to t_prev."""
    if not 0 <= t_prev < t <= sched.T:
        raise BadSteps(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_t, ab_p = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x_t = np.asarray(x_t, dtype=float)
    x0_pred = np.asarray(x0_pred, dtype=float)
    if ab_p == 1.0:
        return x0_pred.copy()
    if ab_t == ab_p:
        return x_t.copy()
    eps = (x_t - np.sqrt(ab_t) * x0_pred) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_p) * x0_pred + np.sqrt(1.0 - ab_p) * eps


def inference_steps(T: int, T_inf: int) -> list:
    """Uniformly spaced descending steps T = s_0 > ... > s_T_inf = 0."""
    if T_inf < 1 or T_inf > T:
        raise BadSteps(f"inference steps {T_inf} must lie in [1, {T}]")
    return [int(s) for s in np.round(np.linspace(T, 0, T_inf + 1))]


def sample(params, F, sched: DiffusionSchedule, T_inf: int, seed: int = 0,
           steps: Optional[Sequence[int]] = None, x_init=None) -> np.ndarray:
    """Scores in [0, 1] by DDIM from Gaussian noise.

    ``params`` is a DenoiserParams or any callable (x_t, t) -> predicted
    scaled scores. ``steps`` overrides the uniform schedule with an explicit
    strictly decreasing list ending at 0.
    """
    F = np.asarray(F, dtype=float)
    steps = list(steps) if steps is not None else inference_steps(sched.T, T_inf)
    if len(steps) < 2 or steps[-1] != 0 or any(a <= b for a, b in zip(steps, steps[1:])):
        raise BadSteps(f"steps must decrease strictly to 0: {steps}")
    if x_init is None:
        x = np.random.default_rng(seed).standard_normal(F.shape[0])
    else:
        x = np.asarray(x_init, dtype=float).copy()
    predict = params if callable(params) else (lambda x_t, t: denoise(params, x_t, t, sched, F))
    for t, t_prev in zip(steps, steps[1:]):
        x = ddim_step(x, predict(x, t), t, t_prev, sched)
    return unscale_signal(x, sched.scale)


# ---------------------------------------------------------------- model file


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def model_to_dict(params: DenoiserParams, T_train: int, scale: float, config: Optional[dict] = None) -> dict:
    weights = {k: {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}
               for k, a in zip(PARAM_NAMES, params.arrays())}
    doc = {"schema": MODEL_SCHEMA, "H": params.H, "E": params.E, "N_f": params.N_f,
           "T_train": int(T_train), "scale": float(scale), "weights": weights}
    if config is not None:
        doc["config"] = config
        doc["config_hash"] = config_hash(config)
    return doc


def model_from_dict(doc: dict):
    """(params, T_train, scale) from a model document."""
    arrays = [np.asarray(doc["weights"][k]["data"], dtype=float).reshape(doc["weights"][k]["shape"])
              for k in PARAM_NAMES]
    params = DenoiserParams(*arrays)
    if params.H != doc["H"] or params.E != doc["E"] or params.N_f != doc["N_f"]:
        raise ShapeMismatch("declared sizes disagree with weight shapes")
    return params, int(doc["T_train"]), float(doc["scale"])
