"""Losses, optimizer, learning-rate schedule, and the training loop.

The softmax normalizer over the continuous trajectory space is
Monte-Carlo estimated from bank samples drawn once per batch; the batch
ground truths are appended to the candidate set so the numerator term
is always present.  The same candidate set serves the plain softmax
loss and the noise-kernel loss.  All log-probabilities go through
log-sum-exp, so training is overflow-safe for sharpness values far
beyond anything the optimizer reaches.

Candidate weighting: the sampled losses treat every candidate with unit
weight, i.e. plain softmax cross-entropy over the candidate set.  This
differs from 1/N sample weighting by an additive constant with
identical gradients.  Enumeration oracles pass explicit log weights
(the sampler's own probabilities) instead, which reproduces the exact
discrete objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, collect_gradients
from .bank import TrajectoryBank, sample_h_rows
from .core import flatten_trajectories
from .encoders import (
    MlpSpec,
    ModelParams,
    f_head,
    f_mix_logits,
    f_trunk,
    g_forward,
    init_params,
    param_tensors,
)
from .errors import NumericError


@dataclass
class TrainConfig:
    batch_size: int = 64
    n_mc_samples: int = 256
    learning_rate: float = 5e-4
    plateau_patience: int = 5
    pseudo_epoch_batches: int = 50
    lr_halving_factor: float = 0.5
    max_steps: int = 2000
    seed: int = 0
    use_noise_model: bool = False
    n_modes: int = 1
    val_fraction: float = 0.1
    min_lr: float = 1e-7
    include_kernel_constant: bool = False
    d: int = 32
    f_hidden: tuple[int, ...] = (128, 128, 64)
    g_hidden: tuple[int, ...] = (128, 128, 64)
    f_skip: bool = False
    g_skip: bool = True
    # Mixture staging (n_modes >= 2): fraction of steps spent training the
    # unimodal warm start and the frozen-gate specialization stint, the
    # sharpness pinned during specialization, and how many head re-draws
    # are attempted before accepting the best run.
    mixture_warmup_fraction: float = 0.55
    mixture_specialize_fraction: float = 0.30
    mixture_specialize_alpha: float = 8.0
    mixture_max_attempts: int = 4

    def __post_init__(self):
        self.f_hidden = tuple(self.f_hidden)
        self.g_hidden = tuple(self.g_hidden)
        if self.n_mc_samples < 2:
            raise ValueError("n_mc_samples must be >= 2")
        for name in ("batch_size", "plateau_patience", "pseudo_epoch_batches",
                     "max_steps", "n_modes", "d", "mixture_max_attempts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if not 0.0 < self.mixture_warmup_fraction + self.mixture_specialize_fraction < 1.0:
            raise ValueError("mixture phase fractions must leave room for joint training")

    def specs(self, feature_dim: int, m_points: int) -> tuple[MlpSpec, MlpSpec]:
        f_spec = MlpSpec(feature_dim, self.f_hidden, self.d, skip=self.f_skip)
        g_spec = MlpSpec(2 * m_points, self.g_hidden, self.d, skip=self.g_skip)
        return f_spec, g_spec


# ---------------------------------------------------------------------------
# Monte-Carlo normalizer (Eq.-style public surface, ndarray path)


def log_mc_normalizer(scene_embs, sample_embs, alpha, log_weights=None) -> np.ndarray:
    """Log of the Monte-Carlo softmax normalizer, max-shifted for stability.

    With ``log_weights=None`` the samples get uniform weight ``1/N``;
    passing per-sample log probabilities instead yields the exact
    discrete normalizer when the samples enumerate the bank.
    """
    q = np.atleast_2d(np.asarray(scene_embs, dtype=np.float64))
    s = np.asarray(sample_embs, dtype=np.float64)
    scores = float(alpha) * (q @ s.T)  # (B, N)
    if log_weights is None:
        lw = -math.log(s.shape[0])
    else:
        lw = np.asarray(log_weights, dtype=np.float64)
    shifted = scores + lw
    m = shifted.max(axis=1, keepdims=True)
    out = np.log(np.sum(np.exp(shifted - m), axis=1)) + m[:, 0]
    return out if np.asarray(scene_embs).ndim == 2 else float(out[0])


def mc_normalizer(scene_emb, sample_embs, alpha) -> float:
    """Monte-Carlo estimate of the softmax normalizer; strictly positive."""
    return float(np.exp(log_mc_normalizer(scene_emb, sample_embs, alpha)))


def log_kernel_constant(beta: float, dim: int) -> float:
    """Log normalizer of the density proportional to exp(-beta * ||x||)
    in ``dim`` dimensions."""
    return (
        math.log(2.0)
        + (dim / 2.0) * math.log(math.pi)
        - math.lgamma(dim / 2.0)
        + math.lgamma(dim)
        - dim * math.log(beta)
    )


# ---------------------------------------------------------------------------
# Loss graphs


def build_loss(
    params: ModelParams,
    scenes,
    gts,
    sample_trajs,
    *,
    use_noise: bool = False,
    candidate_log_weights=None,
    include_kernel_constant: bool = False,
    requires_grad: bool = True,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Record the negative log-likelihood of a batch as a scalar graph.

    Candidates are the shared samples followed by the batch ground
    truths.  Returns the scalar loss tensor and the named parameter
    leaves for gradient collection.
    """
    scenes = np.atleast_2d(np.asarray(scenes, dtype=np.float64))
    gts_flat = flatten_trajectories(gts)
    samples_flat = flatten_trajectories(sample_trajs) if len(sample_trajs) else \
        np.zeros((0, gts_flat.shape[1]))
    if scenes.shape[0] != gts_flat.shape[0]:
        raise ValueError("scenes and ground truths must align")
    b = scenes.shape[0]
    n_samples = samples_flat.shape[0]
    cands = np.concatenate([samples_flat, gts_flat], axis=0)  # (C, 2M)
    dim = cands.shape[1]

    if candidate_log_weights is not None:
        lw = np.asarray(candidate_log_weights, dtype=np.float64)
        if lw.shape != (cands.shape[0],):
            raise ValueError(
                f"candidate_log_weights must have shape ({cands.shape[0]},)"
            )
        lw_t = Tensor(lw)
    else:
        lw_t = None

    pv = param_tensors(params, requires_grad=requires_grad)
    g_all = g_forward(pv, params.g_spec, Tensor(cands))  # (C, d)
    g_gt = g_all[n_samples:n_samples + b]  # (B, d)
    trunk = f_trunk(pv, params.f_spec, Tensor(scenes))  # (B, hidden)
    alpha_t = ad.exp(pv["alpha_raw"])  # (m,)

    if use_noise:
        diffs = gts_flat[:, None, :] - cands[None, :, :]
        dists = Tensor(np.linalg.norm(diffs, axis=2))  # (B, C) constant
        beta_t = ad.exp(pv["beta_raw"])

    per_mode_ll: list[Tensor] = []
    for k in range(params.n_modes):
        f_k = f_head(pv, k, trunk)  # (B, d)
        alpha_k = alpha_t[k]
        scores = ad.mul(ad.matmul(f_k, g_all.T), alpha_k)  # (B, C)
        if lw_t is not None:
            scores_w = ad.add(scores, lw_t)
        else:
            scores_w = scores
        log_z = ad.logsumexp(scores_w, axis=1)  # (B,)
        if use_noise:
            kernel_scores = ad.add(scores_w, ad.mul(ad.mul(beta_t, -1.0), dists))
            ll_k = ad.add(ad.logsumexp(kernel_scores, axis=1), ad.mul(log_z, -1.0))
            if include_kernel_constant:
                # log C(beta) = const - dim * log(beta) = const - dim * beta_raw
                const = log_kernel_constant(1.0, dim)
                ll_k = ad.add(ll_k, ad.add(ad.mul(pv["beta_raw"], float(dim)), -const))
        else:
            # numerator is the bare bilinear score: the sampler density of
            # the ground truth is a constant bias and stays out
            num = ad.mul(ad.tsum(ad.mul(f_k, g_gt), axis=1), alpha_k)
            ll_k = ad.add(num, ad.mul(log_z, -1.0))
        per_mode_ll.append(ll_k)

    if params.n_modes == 1:
        ll = per_mode_ll[0]
    else:
        logits = f_mix_logits(pv, trunk)  # (B, m)
        stacked = ad.stack(per_mode_ll, axis=1)  # (B, m)
        ll = ad.add(
            ad.logsumexp(ad.add(stacked, logits), axis=1),
            ad.mul(ad.logsumexp(logits, axis=1), -1.0),
        )
    loss = ad.mul(ad.tsum(ll), -1.0 / b)
    return loss, pv


def nll_base(params, scenes, gts, sample_trajs, candidate_log_weights=None) -> float:
    """Sampled softmax cross-entropy of a batch (no noise kernel)."""
    loss, _ = build_loss(
        params, scenes, gts, sample_trajs,
        use_noise=False, candidate_log_weights=candidate_log_weights,
        requires_grad=False,
    )
    return float(loss.value)


def nll_noise(params, scenes, gts, sample_trajs, candidate_log_weights=None,
              include_kernel_constant: bool = False) -> float:
    """Noise-kernel likelihood loss over the shared candidate set."""
    loss, _ = build_loss(
        params, scenes, gts, sample_trajs,
        use_noise=True, candidate_log_weights=candidate_log_weights,
        include_kernel_constant=include_kernel_constant, requires_grad=False,
    )
    return float(loss.value)


def nll_mixture(params, scenes, gts, sample_trajs, use_noise: bool = False,
                candidate_log_weights=None,
                include_kernel_constant: bool = False) -> float:
    """Mixture-of-modes likelihood loss; equals the unimodal loss at m=1."""
    loss, _ = build_loss(
        params, scenes, gts, sample_trajs,
        use_noise=use_noise, candidate_log_weights=candidate_log_weights,
        include_kernel_constant=include_kernel_constant, requires_grad=False,
    )
    return float(loss.value)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(values: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(a) for k, a in values.items()},
        v={k: np.zeros_like(a) for k, a in values.items()},
    )


def adam_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction; mutates and returns its inputs."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        values[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return values, state


class PlateauSchedule:
    """Halve the learning rate after ``patience`` non-improving
    validation evaluations."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def observe(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict] = field(default_factory=list)
    steps: int = 0
    stop_reason: str = ""


class _Runner:
    """Shared batching, evaluation, and bookkeeping for training phases."""

    def __init__(self, config: TrainConfig, examples, bank: TrajectoryBank):
        n = len(examples)
        if n < 2:
            raise ValueError("need at least 2 examples to carve a validation split")
        self.config = config
        self.bank = bank
        self.scenes = np.stack([ex.scene for ex in examples])
        self.gts = np.stack([ex.ground_truth for ex in examples])

        perm = np.random.default_rng([config.seed, 0]).permutation(n)
        n_val = min(max(1, int(round(config.val_fraction * n))), n - 1)
        self.val_idx = perm[:n_val]
        self.train_idx = perm[n_val:]
        val_rows = sample_h_rows(
            bank, np.random.default_rng([config.seed, 3]), config.n_mc_samples
        )
        # fixed validation candidates keep the plateau signal comparable
        self.val_samples = bank.trajectories[val_rows]
        self.metrics: list[dict] = []
        self.total_steps = 0

    def specs(self):
        return self.config.specs(self.scenes.shape[1], self.gts.shape[1])

    def val_loss(self, params, use_noise, include_const) -> float:
        loss, _ = build_loss(
            params, self.scenes[self.val_idx], self.gts[self.val_idx],
            self.val_samples, use_noise=use_noise,
            include_kernel_constant=include_const, requires_grad=False,
        )
        return float(loss.value)

    def run_phase(self, params, steps, phase, attempt, *, use_noise,
                  include_const, frozen=()) -> str:
        """Run one training phase in place; returns the stop reason."""
        cfg = self.config
        state = init_adam_state(params.values)
        schedule = PlateauSchedule(cfg.learning_rate, cfg.lr_halving_factor,
                                   cfg.plateau_patience)
        running: list[float] = []
        for step in range(steps):
            batch_rng = np.random.default_rng([cfg.seed, 2, phase, attempt, step])
            take = min(cfg.batch_size, self.train_idx.size)
            bidx = self.train_idx[
                batch_rng.choice(self.train_idx.size, size=take, replace=False)
            ]
            rows = sample_h_rows(
                self.bank,
                np.random.default_rng([cfg.seed, 1, phase, attempt, step]),
                cfg.n_mc_samples,
            )
            loss_t, pv = build_loss(
                params, self.scenes[bidx], self.gts[bidx],
                self.bank.trajectories[rows], use_noise=use_noise,
                include_kernel_constant=include_const,
            )
            loss = float(loss_t.value)
            if not math.isfinite(loss):
                err = NumericError(
                    f"non-finite training loss at step {self.total_steps}"
                )
                err.params = params  # last good parameters, update not applied
                err.metrics = self.metrics
                raise err
            grads = collect_gradients(loss_t, pv)
            if frozen:
                for name in grads:
                    if name.startswith(frozen):
                        grads[name] = np.zeros_like(grads[name])
            adam_step(params.values, grads, state, schedule.lr)
            running.append(loss)
            self.total_steps += 1

            if self.total_steps % cfg.pseudo_epoch_batches == 0:
                v = self.val_loss(params, use_noise, include_const)
                lr_now = schedule.observe(v)
                self.metrics.append(
                    {
                        "step": self.total_steps,
                        "train_nll": float(np.mean(running)),
                        "val_nll": v,
                        "lr": lr_now,
                    }
                )
                running = []
                if lr_now < cfg.min_lr:
                    return "lr_floor"
        return "max_steps"


def _bridge_beta(bank: TrajectoryBank, seed: int) -> float:
    """Kernel scale that still contrasts typical inter-cluster distances."""
    rng = np.random.default_rng([seed, 6])
    n_pairs = min(300, len(bank))
    rows = rng.choice(len(bank), size=2 * n_pairs, replace=len(bank) < 2 * n_pairs)
    flat = bank.trajectories[rows].reshape(2 * n_pairs, -1)
    dists = np.linalg.norm(flat[:n_pairs] - flat[n_pairs:], axis=1)
    med = float(np.median(dists))
    return 6.0 / max(med, 1e-6)


def _clone_for_modes(warm: ModelParams, config: TrainConfig, attempt: int,
                     f_spec: MlpSpec, g_spec: MlpSpec,
                     bridge_beta: float) -> ModelParams:
    """m-mode params around a trained unimodal model: shared towers are
    copied, scene heads are re-drawn, the gate starts uniform."""
    params = init_params(f_spec, g_spec, config.n_modes,
                         seed=config.seed)
    rng = np.random.default_rng([config.seed, 5, attempt])
    head_in = ([f_spec.input_dim, *f_spec.hidden])[-1]
    bound = np.sqrt(6.0 / (head_in + f_spec.output_dim))
    for name in warm.values:
        if name.startswith(("f.trunk.", "g.")):
            params.values[name] = warm.values[name].copy()
    for k in range(config.n_modes):
        params.values[f"f.head.{k}.W"] = rng.uniform(
            -bound, bound, size=(head_in, f_spec.output_dim)
        )
        params.values[f"f.head.{k}.b"] = np.zeros(f_spec.output_dim)
    params.values["f.mix.W"] = np.zeros_like(params.values["f.mix.W"])
    params.values["f.mix.b"] = np.zeros_like(params.values["f.mix.b"])
    params.values["alpha_raw"] = np.full(
        config.n_modes, np.log(config.mixture_specialize_alpha)
    )
    params.values["beta_raw"] = np.asarray(np.log(bridge_beta))
    return params


def _gate_balance(params: ModelParams, scenes: np.ndarray, seed: int) -> float:
    """Smallest mean mixture weight over a fixed sample of scenes."""
    rng = np.random.default_rng([seed, 7])
    take = min(64, scenes.shape[0])
    sample = scenes[rng.choice(scenes.shape[0], size=take, replace=False)]
    weights = mixture_weights(params, sample)
    return float(weights.mean(axis=0).min())


def train(config: TrainConfig, examples, bank: TrajectoryBank) -> TrainResult:
    """Train encoders on a dataset against a bank; fully seeded.

    RNG streams are derived from ``(seed, purpose, phase, attempt, step)``,
    so batches, sample draws, and the validation split are reproducible.
    Raises :class:`NumericError` carrying the last good parameters if the
    loss turns non-finite.

    Mixture models (``n_modes >= 2``) are trained in stages: a unimodal
    warm start, then freshly drawn per-mode heads specialized under the
    noise-kernel loss with the gate, sharpness, and kernel scale pinned
    (the kernel scale at a bridge value that still contrasts distinct
    maneuvers), then joint training of everything under the configured
    loss.  Cold-start mixtures collapse onto a single mode at this data
    scale; the staged procedure with a gate-balance acceptance check and
    seeded head re-draws reaches specialized modes reliably.
    """
    runner = _Runner(config, examples, bank)
    f_spec, g_spec = runner.specs()

    if config.n_modes == 1:
        params = init_params(f_spec, g_spec, 1, seed=config.seed)
        stop = runner.run_phase(
            params, config.max_steps, phase=0, attempt=0,
            use_noise=config.use_noise_model,
            include_const=config.include_kernel_constant,
        )
        return TrainResult(params=params, metrics=runner.metrics,
                           steps=runner.total_steps, stop_reason=stop)

    warmup_steps = max(1, int(config.max_steps * config.mixture_warmup_fraction))
    spec_steps = max(1, int(config.max_steps * config.mixture_specialize_fraction))
    joint_steps = max(1, config.max_steps - warmup_steps - spec_steps)

    warm_config = TrainConfig(**{**config.__dict__, "n_modes": 1})
    warm = init_params(f_spec, g_spec, 1, seed=config.seed)
    runner.config = warm_config
    runner.run_phase(
        warm, warmup_steps, phase=0, attempt=0,
        use_noise=True, include_const=config.include_kernel_constant,
    )
    runner.config = config

    bridge = _bridge_beta(bank, config.seed)
    best: tuple[float, ModelParams, str] | None = None
    balance_floor = 0.3 / config.n_modes
    for attempt in range(config.mixture_max_attempts):
        params = _clone_for_modes(warm, config, attempt, f_spec, g_spec, bridge)
        runner.run_phase(
            params, spec_steps, phase=2, attempt=attempt,
            use_noise=True, include_const=False,
            frozen=("f.mix.", "alpha_raw", "beta_raw"),
        )
        stop = runner.run_phase(
            params, joint_steps, phase=3, attempt=attempt,
            use_noise=config.use_noise_model,
            include_const=config.include_kernel_constant,
        )
        balance = _gate_balance(params, runner.scenes, config.seed)
        if best is None or balance > best[0]:
            best = (balance, params, stop)
        if balance >= balance_floor:
            break

    balance, params, stop = best
    if balance < balance_floor:
        stop = "mixture_degenerate"
    return TrainResult(params=params, metrics=runner.metrics,
                       steps=runner.total_steps, stop_reason=stop)
