"""Posterior readouts over search results: mode, mean, mean shift,
sampling, and per-mode mixture aggregation.

All strategies start from the same candidate set: the ``top_k`` bank
trajectories by bilinear score for the queried scene.  Candidate
weights are shift-stabilized exponentials of the scores; the optional
``h_corrected`` flag multiplies in the bank sampler's own density,
which matters when clustering left it non-uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bank import TrajectoryBank, h_density
from .encoders import ModelParams, encode_scenes, mixture_weights
from .mips import MipsIndex, search

STRATEGIES = ("top1", "mode_h", "mean", "meanshift", "sample")


@dataclass(frozen=True)
class Prediction:
    trajectory: np.ndarray  # (M, 2)
    weight: float
    mode_index: int = 0


@dataclass(frozen=True)
class Candidates:
    ids: list[str]
    trajectories: np.ndarray  # (k, M, 2)
    weights: np.ndarray  # (k,) unnormalized, max-shifted

    def normalized(self) -> np.ndarray:
        total = self.weights.sum()
        return self.weights / total


def candidate_scores(
    params: ModelParams,
    scene,
    index: MipsIndex,
    bank: TrajectoryBank,
    top_k: int = 150,
    mode: int = 0,
    h_corrected: bool = False,
) -> Candidates:
    """Search results with unnormalized posterior weights.

    ``weight_i = exp(alpha_k * score_i - max_j alpha_k * score_j)``,
    optionally multiplied by the sampler density of each entry.
    """
    query = encode_scenes(params, scene, mode=mode)
    hits = search(index, query, top_k)
    ids = [h[0] for h in hits]
    scores = np.array([h[1] for h in hits], dtype=np.float64)
    alpha_k = float(params.alpha()[mode])
    w = np.exp(alpha_k * scores - np.max(alpha_k * scores))
    if h_corrected:
        w = w * np.array([h_density(bank, i) for i in ids])
    trajs = bank.trajectories[[bank.row_of(i) for i in ids]]
    return Candidates(ids=ids, trajectories=trajs, weights=w)


def predict_mode_top1(
    params, scene, index, bank, top_k: int = 150, mode: int = 0,
    h_corrected: bool = False,
) -> Prediction:
    """The best-scoring bank trajectory; with ``h_corrected`` the argmax
    of density times score over the whole candidate set."""
    if h_corrected:
        cand = candidate_scores(params, scene, index, bank, top_k, mode,
                                h_corrected=True)
        best = int(np.argmax(cand.weights))
        return Prediction(cand.trajectories[best].copy(), 1.0, mode)
    hits = search(index, encode_scenes(params, scene, mode=mode), top_k)
    top_id = hits[0][0]
    return Prediction(bank.trajectories[bank.row_of(top_id)].copy(), 1.0, mode)


def predict_mean(
    params, scene, index, bank, top_k: int = 150, mode: int = 0,
    h_corrected: bool = False,
) -> Prediction:
    """Weighted average of the search results."""
    cand = candidate_scores(params, scene, index, bank, top_k, mode, h_corrected)
    w = cand.normalized()
    mean = np.tensordot(w, cand.trajectories, axes=1)
    return Prediction(mean, 1.0, mode)


def _kernel_objective(t_flat, cand_flat, w, beta) -> float:
    r = np.linalg.norm(cand_flat - t_flat, axis=1)
    return float(np.sum(w * np.exp(-beta * r)))


def predict_mean_shift(
    params, scene, index, bank, top_k: int = 150, mode: int = 0,
    h_corrected: bool = False, max_iters: int = 50, move_tol: float = 1e-4,
    radius_floor: float = 1e-9,
) -> Prediction:
    """Climb the kernel-weighted candidate mixture to a local maximum.

    Fixed-point iteration ``t <- sum(c_i t_i) / sum(c_i)`` with
    ``c_i = w_i * beta * exp(-beta r_i) / max(r_i, floor)``, started at
    the top candidate.  A proposed move that lowers the objective is
    halved toward the current point until it does not; iteration stops
    when the move is below ``move_tol`` meters.
    """
    cand = candidate_scores(params, scene, index, bank, top_k, mode, h_corrected)
    w = cand.normalized()
    beta = params.beta()
    cand_flat = cand.trajectories.reshape(len(cand.ids), -1)
    t = cand_flat[0].copy()  # top-1 candidate: highest score, id tie-break
    f_t = _kernel_objective(t, cand_flat, w, beta)
    best_t, best_f = t.copy(), f_t
    for _ in range(max_iters):
        r = np.linalg.norm(cand_flat - t, axis=1)
        c = w * beta * np.exp(-beta * r) / np.maximum(r, radius_floor)
        denom = c.sum()
        if denom <= 0.0 or not math.isfinite(denom):
            break
        prop = (c @ cand_flat) / denom
        f_prop = _kernel_objective(prop, cand_flat, w, beta)
        halvings = 0
        while f_prop < f_t and halvings < 20:
            prop = 0.5 * (t + prop)
            f_prop = _kernel_objective(prop, cand_flat, w, beta)
            halvings += 1
        if f_prop < f_t:
            break  # could not make progress toward the fixed point
        move = float(np.linalg.norm(prop - t))
        t, f_t = prop, f_prop
        if f_t > best_f:
            best_t, best_f = t.copy(), f_t
        if move < move_tol:
            break
    return Prediction(best_t.reshape(-1, 2), 1.0, mode)


def sample_posterior(
    params, scene, index, bank, top_k: int = 150, n_samples: int = 1,
    rng=None, with_noise: bool = False,
) -> list[np.ndarray]:
    """Draw trajectories from the candidate categorical; optionally smear
    each draw with the learned exponential-norm noise kernel."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    cand = candidate_scores(params, scene, index, bank, top_k, mode=0)
    w = cand.normalized()
    picks = rng.choice(len(cand.ids), size=n_samples, p=w)
    out = []
    dim = cand.trajectories.shape[1] * 2
    beta = params.beta()
    for p in picks:
        traj = cand.trajectories[p].copy()
        if with_noise:
            # density prop. to exp(-beta ||delta||): radius is Gamma(dim, 1/beta)
            radius = rng.gamma(shape=dim, scale=1.0 / beta)
            direction = rng.standard_normal(dim)
            direction /= np.linalg.norm(direction)
            traj = traj + (radius * direction).reshape(-1, 2)
        out.append(traj)
    return out


def predict_mixture(
    params, scene, index, bank, top_k: int = 150, strategy: str = "mean",
    rng=None, h_corrected: bool = False,
) -> list[Prediction]:
    """Run one strategy per mode; prediction ``k`` carries the mixture
    weight of mode ``k``.  Weights sum to 1 exactly."""
    if strategy not in ("top1", "mode_h", "mean", "meanshift"):
        raise ValueError(f"unsupported per-mode strategy {strategy!r}")
    pis = mixture_weights(params, scene)
    pis = pis / pis.sum()
    preds = []
    for k in range(params.n_modes):
        if strategy == "top1":
            p = predict_mode_top1(params, scene, index, bank, top_k, k, h_corrected)
        elif strategy == "mode_h":
            p = predict_mode_top1(params, scene, index, bank, top_k, k,
                                  h_corrected=True)
        elif strategy == "mean":
            p = predict_mean(params, scene, index, bank, top_k, k, h_corrected)
        else:
            p = predict_mean_shift(params, scene, index, bank, top_k, k,
                                   h_corrected=h_corrected)
        preds.append(Prediction(p.trajectory, float(pis[k]), k))
    return preds
