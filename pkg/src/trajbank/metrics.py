"""Displacement and likelihood metrics for weighted prediction sets.

The likelihood metric scores the ground truth under a mixture of
isotropic unit-variance Gaussians centered at the flattened predicted
trajectories (2M dimensions).  Because its magnitude scales with M, a
per-timestamp normalization is reported alongside; comparisons across
trajectory lengths should use the normalized value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .inference import Prediction

HIT_THRESHOLD = 0.5


@dataclass(frozen=True)
class EvalReport:
    ade: float
    fde: float
    hit_rate: float
    ll: float
    ll_per_timestamp: float
    n_examples: int


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"prediction/gt shapes must match as (M, 2): {p.shape} vs {g.shape}")
    return p, g


def ade(pred, gt) -> float:
    """Mean per-timestamp Euclidean displacement."""
    p, g = _check_pair(pred, gt)
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


def fde(pred, gt) -> float:
    """Displacement at the final timestamp."""
    p, g = _check_pair(pred, gt)
    return float(np.linalg.norm(p[-1] - g[-1]))


def hit(pred, gt, threshold: float = HIT_THRESHOLD) -> bool:
    """True iff the maximum per-timestamp displacement is strictly below
    the threshold."""
    p, g = _check_pair(pred, gt)
    return bool(np.max(np.linalg.norm(p - g, axis=1)) < threshold)


def ll(predictions: list[Prediction], gt) -> float:
    """Log-likelihood of the ground truth under the weighted unit-variance
    Gaussian mixture centered at the predictions (nats)."""
    if not predictions:
        raise ValueError("need at least one prediction")
    weights = np.array([p.weight for p in predictions], dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"prediction weights must sum to 1, got {weights.sum()!r}")
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    dim = g.size
    log_terms = np.full(len(predictions), -np.inf)
    for i, p in enumerate(predictions):
        if p.weight <= 0.0:
            continue
        diff = np.asarray(p.trajectory, dtype=np.float64).reshape(-1) - g
        if diff.size != dim:
            raise ValueError("prediction and ground truth sizes differ")
        log_gauss = -0.5 * dim * math.log(2.0 * math.pi) - 0.5 * float(diff @ diff)
        log_terms[i] = math.log(p.weight) + log_gauss
    m = np.max(log_terms)
    if not np.isfinite(m):
        return float(-np.inf)
    return float(np.log(np.sum(np.exp(log_terms - m))) + m)


def best_prediction(predictions: list[Prediction]) -> Prediction:
    """Highest-weight prediction; ties broken by lowest mode index."""
    return min(predictions, key=lambda p: (-p.weight, p.mode_index))


def evaluate(predictions_by_id: dict[str, list[Prediction]], examples) -> EvalReport:
    """Aggregate metrics over a dataset.

    Displacement metrics use the highest-weight prediction per example;
    the likelihood uses the full weighted set.  Every example must have
    predictions.
    """
    if not examples:
        raise ValueError("no examples to evaluate")
    ades, fdes, hits, lls = [], [], [], []
    m_points = None
    for ex in examples:
        preds = predictions_by_id.get(ex.id)
        if not preds:
            raise ValueError(f"no predictions for example {ex.id!r}")
        top = best_prediction(preds)
        ades.append(ade(top.trajectory, ex.ground_truth))
        fdes.append(fde(top.trajectory, ex.ground_truth))
        hits.append(hit(top.trajectory, ex.ground_truth))
        lls.append(ll(preds, ex.ground_truth))
        m_points = ex.ground_truth.shape[0]
    mean_ll = float(np.mean(lls))
    return EvalReport(
        ade=float(np.mean(ades)),
        fde=float(np.mean(fdes)),
        hit_rate=float(np.mean(hits)),
        ll=mean_ll,
        ll_per_timestamp=mean_ll / m_points,
        n_examples=len(examples),
    )


def per_example_records(predictions_by_id, examples) -> list[dict]:
    """One metrics record per example, in dataset order."""
    out = []
    for ex in examples:
        preds = predictions_by_id[ex.id]
        top = best_prediction(preds)
        out.append(
            {
                "id": ex.id,
                "ade": ade(top.trajectory, ex.ground_truth),
                "fde": fde(top.trajectory, ex.ground_truth),
                "hit": hit(top.trajectory, ex.ground_truth),
                "ll": ll(preds, ex.ground_truth),
            }
        )
    return out
