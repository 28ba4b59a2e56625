"""The two towers: scene and trajectory encoders onto the unit sphere.

The scene tower is a relu MLP trunk with per-mode linear heads plus a
linear head for mixture logits; the trajectory tower is a relu MLP with
optional residual connections over the flattened trajectory.  Both ends
project onto the unit sphere, so bilinear scores lie in ``[-alpha,
alpha]``.  The sharpness ``alpha`` (one per mode) and the noise scale
``beta`` are stored as logs and constrained positive by exponentiation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, collect_gradients as backprop  # noqa: F401
from .errors import DataError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Widths of one tower; ``skip`` adds residuals between equal-width
    consecutive hidden layers."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(w < 1 for w in self.hidden):
            raise ValueError("all hidden widths must be >= 1")
        if self.skip and not any(
            a == b for a, b in zip(self.hidden, self.hidden[1:])
        ):
            raise ValueError(
                "skip connections require equal widths on consecutive hidden layers"
            )


@dataclass
class ModelParams:
    """All learnable parameters, stored in a canonical name order."""

    f_spec: MlpSpec
    g_spec: MlpSpec
    n_modes: int
    values: dict[str, np.ndarray]

    @property
    def d(self) -> int:
        return self.f_spec.output_dim

    def alpha(self) -> np.ndarray:
        """Per-mode sharpness, always positive."""
        return np.exp(self.values["alpha_raw"])

    def beta(self) -> float:
        """Noise-kernel scale, always positive."""
        return float(np.exp(self.values["beta_raw"]))


def param_order(f_spec: MlpSpec, g_spec: MlpSpec, n_modes: int):
    """Canonical (name, shape) declaration order of every parameter."""
    if f_spec.output_dim != g_spec.output_dim:
        raise ValueError("scene and trajectory towers must share output_dim")
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    order: list[tuple[str, tuple[int, ...]]] = []
    trunk_dims = [f_spec.input_dim, *f_spec.hidden]
    for i, (din, dout) in enumerate(zip(trunk_dims[:-1], trunk_dims[1:])):
        order.append((f"f.trunk.{i}.W", (din, dout)))
        order.append((f"f.trunk.{i}.b", (dout,)))
    head_in = trunk_dims[-1]
    for k in range(n_modes):
        order.append((f"f.head.{k}.W", (head_in, f_spec.output_dim)))
        order.append((f"f.head.{k}.b", (f_spec.output_dim,)))
    order.append(("f.mix.W", (head_in, n_modes)))
    order.append(("f.mix.b", (n_modes,)))
    order.append(("alpha_raw", (n_modes,)))
    g_dims = [g_spec.input_dim, *g_spec.hidden, g_spec.output_dim]
    for i, (din, dout) in enumerate(zip(g_dims[:-1], g_dims[1:])):
        order.append((f"g.{i}.W", (din, dout)))
        order.append((f"g.{i}.b", (dout,)))
    order.append(("beta_raw", ()))
    return order


def init_params(f_spec: MlpSpec, g_spec: MlpSpec, n_modes: int = 1,
                seed: int = 0) -> ModelParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases,
    alpha = beta = 1."""
    rng = np.random.default_rng([seed])
    values: dict[str, np.ndarray] = {}
    for name, shape in param_order(f_spec, g_spec, n_modes):
        if name.endswith(".W"):
            fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            values[name] = rng.uniform(-bound, bound, size=shape)
        else:
            values[name] = np.zeros(shape)
    return ModelParams(f_spec=f_spec, g_spec=g_spec, n_modes=n_modes, values=values)


def param_tensors(params: ModelParams, requires_grad: bool = True) -> dict[str, Tensor]:
    return {
        name: Tensor(arr, requires_grad=requires_grad)
        for name, arr in params.values.items()
    }


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate(
        [params.values[name].ravel() for name, _ in
         param_order(params.f_spec, params.g_spec, params.n_modes)]
    )


def unflatten_params(params: ModelParams, flat: np.ndarray) -> ModelParams:
    """New ModelParams with values taken from a flat vector."""
    values: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in param_order(params.f_spec, params.g_spec, params.n_modes):
        size = int(np.prod(shape)) if shape else 1
        values[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, expected {offset}")
    return ModelParams(params.f_spec, params.g_spec, params.n_modes, values)


# ---------------------------------------------------------------------------
# Forward passes (Tensor in, Tensor out; constants when not training)


def _hidden_stack(pv, prefix: str, x: Tensor, spec: MlpSpec) -> Tensor:
    h = x
    widths = [spec.input_dim, *spec.hidden]
    for i in range(len(spec.hidden)):
        z = ad.add(ad.matmul(h, pv[f"{prefix}{i}.W"]), pv[f"{prefix}{i}.b"])
        a = ad.relu(z)
        if spec.skip and i >= 1 and widths[i] == widths[i + 1]:
            a = ad.add(a, h)
        h = a
    return h


def g_forward(pv, g_spec: MlpSpec, x: Tensor) -> Tensor:
    """Trajectory tower on (B, 2M) rows -> (B, d) unit rows."""
    h = _hidden_stack(pv, "g.", x, g_spec)
    last = len(g_spec.hidden)
    out = ad.add(ad.matmul(h, pv[f"g.{last}.W"]), pv[f"g.{last}.b"])
    return ad.normalize_rows(out)


def f_trunk(pv, f_spec: MlpSpec, x: Tensor) -> Tensor:
    return _hidden_stack(pv, "f.trunk.", x, f_spec)


def f_head(pv, k: int, trunk_out: Tensor) -> Tensor:
    out = ad.add(ad.matmul(trunk_out, pv[f"f.head.{k}.W"]), pv[f"f.head.{k}.b"])
    return ad.normalize_rows(out)


def f_mix_logits(pv, trunk_out: Tensor) -> Tensor:
    return ad.add(ad.matmul(trunk_out, pv["f.mix.W"]), pv["f.mix.b"])


# ---------------------------------------------------------------------------
# Public (ndarray) encoding API


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} values per row, got shape {arr.shape}")
    return arr, single


def encode_scenes(params: ModelParams, scenes, mode: int = 0) -> np.ndarray:
    """Unit-norm scene embeddings for head ``mode``; rows are scenes."""
    if not 0 <= mode < params.n_modes:
        raise ValueError(f"mode {mode} out of range [0, {params.n_modes})")
    arr, single = _as_batch(scenes, params.f_spec.input_dim, "scene features")
    pv = param_tensors(params, requires_grad=False)
    out = f_head(pv, mode, f_trunk(pv, params.f_spec, Tensor(arr))).value
    return out[0] if single else out


def encode_scene(params: ModelParams, scene, mode: int = 0) -> np.ndarray:
    return encode_scenes(params, scene, mode)


def encode_trajectories(params: ModelParams, trajectories) -> np.ndarray:
    """Unit-norm trajectory embeddings; accepts (n, M, 2) or (n, 2M)."""
    arr = np.asarray(trajectories, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.reshape(arr.shape[0], -1)
    arr, single = _as_batch(arr, params.g_spec.input_dim, "trajectory")
    pv = param_tensors(params, requires_grad=False)
    out = g_forward(pv, params.g_spec, Tensor(arr)).value
    return out[0] if single else out


def encode_trajectory(params: ModelParams, trajectory) -> np.ndarray:
    arr = np.asarray(trajectory, dtype=np.float64).reshape(-1)
    return encode_trajectories(params, arr[None])[0]


def mixture_weights(params: ModelParams, scene) -> np.ndarray:
    """Softmax mixture weights; positive and summing to 1."""
    arr, single = _as_batch(scene, params.f_spec.input_dim, "scene features")
    pv = param_tensors(params, requires_grad=False)
    logits = f_mix_logits(pv, f_trunk(pv, params.f_spec, Tensor(arr))).value
    shifted = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


# ---------------------------------------------------------------------------
# Checkpoint file: one JSON header line, then raw little-endian float64


def save_checkpoint(path, params: ModelParams) -> None:
    flat = flatten_params(params)
    header = {
        "f_spec": asdict(params.f_spec),
        "g_spec": asdict(params.g_spec),
        "d": params.d,
        "m": params.n_modes,
        "n_params": int(flat.size),
        "version": CHECKPOINT_VERSION,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        head_line = fh.readline()
        payload = fh.read()
    try:
        head = json.loads(head_line.decode("utf-8"))
        f_spec = MlpSpec(
            input_dim=head["f_spec"]["input_dim"],
            hidden=tuple(head["f_spec"]["hidden"]),
            output_dim=head["f_spec"]["output_dim"],
            skip=head["f_spec"]["skip"],
        )
        g_spec = MlpSpec(
            input_dim=head["g_spec"]["input_dim"],
            hidden=tuple(head["g_spec"]["hidden"]),
            output_dim=head["g_spec"]["output_dim"],
            skip=head["g_spec"]["skip"],
        )
        n_modes = int(head["m"])
        n_params = int(head["n_params"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint header: {exc}", line=1) from exc
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != n_params:
        raise DataError(
            f"checkpoint payload has {flat.size} floats, header says {n_params}"
        )
    template = ModelParams(f_spec, g_spec, n_modes, values={})
    return unflatten_params(template, np.asarray(flat, dtype=np.float64))
