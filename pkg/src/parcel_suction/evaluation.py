"""Evaluation harness: NMS, top-k selection, online re-scoring, AP at score
thresholds and the normal-deviation baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .diffusion import angular_deviation
from .errors import MissingNormals, NoPredictions
from .geometry import PointCloud, SpatialIndex
from .scoring import SceneScorer, SuctionCandidate

AP_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)
REPORT_SCHEMA = "report/1"
PRED_HEADER = "point_index,x,y,z,nx,ny,nz,confidence"


@dataclass(frozen=True)
class Prediction:
    candidate: SuctionCandidate
    confidence: float
    point_index: int = -1
    instance_id: Optional[int] = None

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValueError("confidence must be finite")


def predictions_from_arrays(points, normals, confidence, point_index=None, instance_ids=None):
    n = len(points)
    point_index = np.arange(n) if point_index is None else point_index
    return [
        Prediction(SuctionCandidate.make(points[i], normals[i]), float(confidence[i]), int(point_index[i]),
                   None if instance_ids is None else int(instance_ids[i]))
        for i in range(n)
    ]


def nms(preds: Sequence[Prediction], radius: float = 0.02) -> list:
    """Greedy suppression; kept predictions are pairwise more than ``radius`` apart."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].point_index, i))
    kept, kept_pts = [], []
    for i in order:
        p = preds[i].candidate.t
        if kept_pts and np.min(np.linalg.norm(np.asarray(kept_pts) - p, axis=1)) <= radius:
            continue
        kept.append(preds[i])
        kept_pts.append(p)
    return kept


def top_k(preds: Sequence[Prediction], k: int, radius: float = 0.02) -> list:
    return nms(preds, radius)[:k]


def precision_at(scores, thresholds=AP_THRESHOLDS) -> dict:
    """Percent of scores strictly above each threshold."""
    s = np.asarray(scores, dtype=float)
    return {mu: 100.0 * float(np.mean(s > mu)) for mu in thresholds}


def ap_from_scores(scores) -> dict:
    """AP, AP_0.4 and AP_0.8 (percent) for already re-scored top-k candidates."""
    if len(scores) == 0:
        raise NoPredictions("nothing to evaluate")
    prec = precision_at(scores)
    return {"AP": float(np.mean([prec[mu] for mu in AP_THRESHOLDS])), "AP04": prec[0.4], "AP08": prec[0.8]}


def online_score(scene_or_scorer, cand: SuctionCandidate, instance_id: Optional[int] = None) -> float:
    """Combined score recomputed at the predicted pose; off-surface -> 0."""
    scorer = scene_or_scorer if isinstance(scene_or_scorer, SceneScorer) else SceneScorer(scene_or_scorer)
    return scorer.score(cand, instance_id).combined


def online_scores(scorer: SceneScorer, preds: Sequence[Prediction]) -> np.ndarray:
    if not preds:
        return np.zeros(0)
    known = [p.instance_id is not None for p in preds]
    out = np.zeros(len(preds))
    if all(known):
        pts = np.array([p.candidate.t for p in preds])
        nrm = np.array([p.candidate.n for p in preds])
        ids = np.array([p.instance_id for p in preds])
        return np.prod(scorer.score_many(pts, nrm, ids), axis=1)
    for j, p in enumerate(preds):
        out[j] = scorer.score(p.candidate, p.instance_id).combined
    return out


def average_precision(preds: Sequence[Prediction], scene_or_scorer, k: int,
                      radius: float = 0.02, score_fn=None) -> dict:
    """AP figures for the top-``k`` predictions after NMS.

    With fewer than ``k`` survivors the precision divides by the survivor
    count. ``score_fn`` maps a list of predictions to online scores and
    defaults to full re-scoring in the scene.
    """
    if not preds:
        raise NoPredictions("no predictions")
    if k < 1:
        raise ValueError("k must be >= 1")
    chosen = top_k(preds, k, radius)
    if score_fn is None:
        scorer = scene_or_scorer if isinstance(scene_or_scorer, SceneScorer) else SceneScorer(scene_or_scorer)
        scores = online_scores(scorer, chosen)
    else:
        scores = np.asarray(score_fn(chosen), dtype=float)
    row = ap_from_scores(scores)
    row["topk"] = int(k)
    row["n"] = len(chosen)
    return row


def normal_std_confidence(cloud: PointCloud, k: int = 16, index: Optional[SpatialIndex] = None) -> np.ndarray:
    if cloud.normals is None:
        raise MissingNormals("baseline needs normals")
    index = index or SpatialIndex(cloud.points)
    kk = min(k, len(cloud) - 1)
    if kk < 1:
        return np.ones(len(cloud))
    nbr, _ = index.knn(cloud.points, kk + 1)
    dev = angular_deviation(cloud.normals, nbr[:, 1:])
    return 1.0 - np.clip(dev / (np.pi / 2), 0.0, 1.0)


def normal_std_baseline(cloud: PointCloud, k: int = 16) -> list:
    """One prediction per point: confidence is 1 minus the normalised mean
    angular deviation of the neighbours' normals."""
    conf = normal_std_confidence(cloud, k)
    return predictions_from_arrays(cloud.points, cloud.normals, conf, None, cloud.instance_ids)


def format_predictions(point_index, points, normals, confidence) -> str:
    lines = [PRED_HEADER]
    points, normals = np.asarray(points, dtype=float).tolist(), np.asarray(normals, dtype=float).tolist()
    for i in np.argsort(point_index, kind="stable"):
        p, n = points[i], normals[i]
        lines.append(f"{int(point_index[i])},{p[0]!r},{p[1]!r},{p[2]!r},{n[0]!r},{n[1]!r},{n[2]!r},"
                     f"{float(confidence[i])!r}")
    return "\n".join(lines) + "\n"


def parse_predictions(text: str):
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != PRED_HEADER:
        raise ValueError("unexpected pred.csv header")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]]).reshape(-1, 8)
    return data[:, 0].astype(np.int64), data[:, 1:4], data[:, 4:7], data[:, 7]
