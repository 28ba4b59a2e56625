"""Seeded synthetic scenario generator and the generic dataset loader.

Each example is drawn from a mix of kinematic templates (constant
velocity, constant-curvature turns, linear deceleration to a stop, and a
50/50 fork) expressed in the agent frame.  Scene features are built from
the template's own H-step history, so generation is a pure function of
``(mix, n, seed)`` and individual examples can be regenerated from
``(seed, index)`` alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import DatasetHeader, Example
from .errors import DataError

SCENARIO_KINDS = ("straight", "turn_left", "turn_right", "stop", "fork")

# Kind-level kinematic constants (meters, seconds, radians).
TURN_CURVATURE = 0.04  # 25 m radius
FORK_LEAD_IN = 1.0  # straight segment before the branch point
FORK_HEADING_CHANGE = math.pi / 6  # total heading change of each branch
STOP_DECEL_LEAD = 1.0  # deceleration starts this long before prediction time
STOP_AT_FRACTION = 0.6  # fraction of the horizon at which speed reaches zero

N_CONTEXT_FEATURES = 4


@dataclass(frozen=True)
class ScenarioSpec:
    """One component of a scenario mix."""

    kind: str
    speed: float
    noise_std: float
    weight: float

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


NAMED_MIXES: dict[str, tuple[ScenarioSpec, ...]] = {
    "straight": (ScenarioSpec("straight", 10.0, 0.3, 1.0),),
    "fork": (ScenarioSpec("fork", 10.0, 0.1, 1.0),),
    "imbalanced": (
        ScenarioSpec("straight", 10.0, 0.25, 0.95),
        ScenarioSpec("turn_left", 8.0, 0.25, 0.05),
    ),
    "mixed": (
        ScenarioSpec("straight", 10.0, 0.3, 0.4),
        ScenarioSpec("turn_left", 8.0, 0.3, 0.2),
        ScenarioSpec("turn_right", 8.0, 0.3, 0.2),
        ScenarioSpec("stop", 8.0, 0.3, 0.2),
    ),
}


def parse_mix(text: str) -> tuple[ScenarioSpec, ...]:
    """Parse a mix given as a preset name, inline JSON list, or ``@file``."""
    if text in NAMED_MIXES:
        return NAMED_MIXES[text]
    if text.startswith("@"):
        with open(text[1:], encoding="utf-8") as fh:
            raw = fh.read()
    elif text.lstrip().startswith("["):
        raw = text
    else:
        raise ValueError(
            f"unknown mix {text!r}: expected one of {sorted(NAMED_MIXES)}, "
            "an inline JSON list, or @path"
        )
    try:
        items = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"mix is not valid JSON: {exc}") from exc
    return tuple(
        ScenarioSpec(it["kind"], it["speed"], it.get("noise_std", 0.0), it["weight"])
        for it in items
    )


def noise_free(mix) -> tuple[ScenarioSpec, ...]:
    """Copy of a mix with noise_std forced to zero (analytic futures)."""
    return tuple(replace(s, noise_std=0.0) for s in mix)


def _validate_mix(mix) -> np.ndarray:
    if not mix:
        raise ValueError("scenario mix must be nonempty")
    weights = np.array([s.weight for s in mix], dtype=np.float64)
    total = weights.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"mix weights must sum to 1, got {total!r}")
    return weights


class _Template:
    """Closed-form position/velocity of one scenario realization.

    Positions are in the agent frame; ``t`` may be negative (history).
    """

    def __init__(self, kind: str, speed: float, horizon: float, branch_sign: int = 0):
        self.kind = kind
        self.speed = speed
        self.horizon = horizon
        self.branch_sign = branch_sign

    def position(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        v = self.speed
        kind = self.kind
        if v == 0.0:
            return np.stack([np.zeros_like(t), np.zeros_like(t)], axis=-1)
        if kind == "straight":
            return np.stack([v * t, np.zeros_like(t)], axis=-1)
        if kind in ("turn_left", "turn_right"):
            kappa = TURN_CURVATURE if kind == "turn_left" else -TURN_CURVATURE
            omega = v * kappa
            r = 1.0 / kappa
            return np.stack([r * np.sin(omega * t), r * (1.0 - np.cos(omega * t))], axis=-1)
        if kind == "stop":
            return np.stack([self._stop_arclength(t), np.zeros_like(t)], axis=-1)
        if kind == "fork":
            tb = FORK_LEAD_IN
            branch_time = max(self.horizon - tb, 1e-9)
            kappa = self.branch_sign * FORK_HEADING_CHANGE / (v * branch_time)
            omega = v * kappa
            r = 1.0 / kappa
            tau = np.maximum(t - tb, 0.0)
            x = np.where(t <= tb, v * t, v * tb + r * np.sin(omega * tau))
            y = np.where(t <= tb, 0.0, r * (1.0 - np.cos(omega * tau)))
            return np.stack([x, y], axis=-1)
        raise ValueError(f"unknown scenario kind {kind!r}")

    def velocity(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        v = self.speed
        kind = self.kind
        if v == 0.0 or kind == "straight":
            vx = np.full_like(t, v)
            return np.stack([vx, np.zeros_like(t)], axis=-1)
        if kind in ("turn_left", "turn_right"):
            kappa = TURN_CURVATURE if kind == "turn_left" else -TURN_CURVATURE
            omega = v * kappa
            return np.stack([v * np.cos(omega * t), v * np.sin(omega * t)], axis=-1)
        if kind == "stop":
            sp = self._stop_speed(t)
            return np.stack([sp, np.zeros_like(t)], axis=-1)
        if kind == "fork":
            tb = FORK_LEAD_IN
            branch_time = max(self.horizon - tb, 1e-9)
            omega = self.branch_sign * FORK_HEADING_CHANGE / branch_time
            tau = np.maximum(t - tb, 0.0)
            return np.stack([v * np.cos(omega * tau), v * np.sin(omega * tau)], axis=-1)
        raise ValueError(f"unknown scenario kind {kind!r}")

    def _stop_speed(self, t: np.ndarray) -> np.ndarray:
        v = self.speed
        t0 = -STOP_DECEL_LEAD
        t_stop = STOP_AT_FRACTION * self.horizon
        a = v / (t_stop - t0)
        sp = np.where(t <= t0, v, v - a * (t - t0))
        return np.maximum(sp, 0.0)

    def _stop_arclength(self, t: np.ndarray) -> np.ndarray:
        # Signed distance along +x from the prediction-time position.
        v = self.speed
        t0 = -STOP_DECEL_LEAD
        t_stop = STOP_AT_FRACTION * self.horizon
        a = v / (t_stop - t0)
        tc = np.clip(t, t0, t_stop)
        # integral of (v - a*(u - t0)) from 0 to tc; 0 lies in [t0, t_stop]
        mid = v * tc - a * ((tc - t0) ** 2 - t0**2) / 2.0
        before = mid + v * (np.minimum(t, t0) - np.minimum(tc, t0))
        return np.where(t < t0, before, mid)


def _menger_curvature(p1, p2, p3) -> float:
    """Signed inverse circumradius of three points (0 when degenerate)."""
    a = p2 - p1
    b = p3 - p2
    c = p3 - p1
    cross = a[0] * b[1] - a[1] * b[0]
    denom = np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
    if denom < 1e-12:
        return 0.0
    return float(2.0 * cross / denom)


def _scene_features(template: _Template, header: DatasetHeader, rng, noise_std: float):
    dt, h = header.dt, header.H
    t_hist = -dt * np.arange(1, h + 1, dtype=np.float64)  # newest first
    pos = template.position(t_hist)
    vel = template.velocity(t_hist)
    if noise_std > 0:
        pos = pos + rng.normal(0.0, noise_std, size=pos.shape)
    per_step = np.concatenate([pos, vel], axis=1).reshape(-1)  # (4H,)

    speed_now = float(np.linalg.norm(template.velocity(np.array(0.0))))
    if h >= 3:
        curvature = _menger_curvature(pos[2], pos[1], pos[0])  # oldest to newest
    else:
        curvature = 0.0
    time_to_branch = FORK_LEAD_IN if template.kind == "fork" else -1.0
    decel_flag = 1.0 if template.kind == "stop" else 0.0
    context = np.array([speed_now, curvature, time_to_branch, decel_flag])
    return np.concatenate([per_step, context])


def feature_dim(h: int) -> int:
    """Scene feature length for H history steps."""
    return 4 * h + N_CONTEXT_FEATURES


def _make_example(mix, weights_cdf, header: DatasetHeader, seed: int, index: int) -> Example:
    rng = np.random.default_rng([seed, index])
    u = rng.random()
    spec = mix[int(np.searchsorted(weights_cdf, u, side="right"))]
    branch_sign = 0
    if spec.kind == "fork":
        branch_sign = 1 if rng.random() < 0.5 else -1
    horizon = header.M * header.dt
    template = _Template(spec.kind, spec.speed, horizon, branch_sign)

    t_future = header.dt * np.arange(1, header.M + 1, dtype=np.float64)
    gt = template.position(t_future)
    if spec.noise_std > 0:
        gt = gt + rng.normal(0.0, spec.noise_std, size=gt.shape)
    scene = _scene_features(template, header, rng, spec.noise_std)
    return Example(id=f"{spec.kind}-{index:06d}", scene=scene, ground_truth=gt)


def generate(
    mix,
    n: int,
    seed: int,
    *,
    m: int = 25,
    dt: float = 0.2,
    h: int = 5,
) -> tuple[DatasetHeader, list[Example]]:
    """Generate ``n`` seeded examples from a scenario mix.

    Returns the dataset header and the examples in index order.  The
    i-th example depends only on ``(mix, seed, i)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    weights = _validate_mix(mix)
    header = DatasetHeader(M=m, dt=dt, H=h, F=feature_dim(h))
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0  # guard against round-off at the top
    examples = [_make_example(mix, cdf, header, seed, i) for i in range(n)]
    return header, examples


def branch_templates(speed: float, header: DatasetHeader) -> dict[int, np.ndarray]:
    """Analytic fork branch futures keyed by branch sign (+1 left, -1 right)."""
    horizon = header.M * header.dt
    t_future = header.dt * np.arange(1, header.M + 1, dtype=np.float64)
    return {
        sign: _Template("fork", speed, horizon, sign).position(t_future)
        for sign in (1, -1)
    }


# ---------------------------------------------------------------------------
# Dataset file format: JSONL with a one-line header record.


def save_dataset(path, header: DatasetHeader, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {"M": header.M, "dt": header.dt, "H": header.H, "F": header.F,
                 "version": header.version}
            )
            + "\n"
        )
        for ex in examples:
            rec = {
                "id": ex.id,
                "scene": ex.scene.tolist(),
                "gt": ex.ground_truth.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> tuple[DatasetHeader, list[Example]]:
    """Load a dataset file, validating the header and every record."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError("empty dataset file", line=1)
    try:
        head = json.loads(lines[0])
        header = DatasetHeader(
            M=head["M"], dt=head["dt"], H=head["H"], F=head["F"],
            version=head.get("version", 1),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed dataset header: {exc}", line=1) from exc
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            scene = np.asarray(rec["scene"], dtype=np.float64)
            gt = np.asarray(rec["gt"], dtype=np.float64)
            if scene.shape != (header.F,):
                raise ValueError(f"scene length {scene.shape} != F={header.F}")
            if gt.shape != (header.M, 2):
                raise ValueError(f"gt shape {gt.shape} != (M={header.M}, 2)")
            if not (np.all(np.isfinite(scene)) and np.all(np.isfinite(gt))):
                raise ValueError("non-finite values")
            examples.append(Example(id=str(rec["id"]), scene=scene, ground_truth=gt))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed dataset record: {exc}", line=lineno) from exc
    return header, examples
