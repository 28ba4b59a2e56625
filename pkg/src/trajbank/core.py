"""Shared domain types and reference-frame conventions.

Trajectories are ``(M, 2)`` float64 arrays of future positions in the
agent frame: the agent sits at the origin at prediction time with its
heading along the +x axis, and point ``j`` (0-based) is the position at
time ``(j + 1) * dt`` seconds.  Scene features are flat float64 vectors
of a fixed per-dataset length ``F``.  All coordinates are meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetHeader:
    """Dataset-level constants carried in file headers."""

    M: int
    dt: float
    H: int
    F: int
    version: int = 1

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.H < 1 or self.F < 1:
            raise ValueError("H and F must be >= 1")


@dataclass(frozen=True)
class Example:
    """One training/evaluation record: scene features plus ground truth."""

    id: str
    scene: np.ndarray  # (F,)
    ground_truth: np.ndarray  # (M, 2)


def as_trajectory(points, m: int | None = None) -> np.ndarray:
    """Validate and return trajectory points as an ``(M, 2)`` float64 array.

    Raises ``ValueError`` if the array is not ``(M, 2)`` with M >= 2, if
    ``m`` is given and the length differs, or if any coordinate is not
    finite.
    """
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError(f"trajectory must have shape (M, 2) with M >= 2, got {arr.shape}")
    if m is not None and arr.shape[0] != m:
        raise ValueError(f"trajectory length {arr.shape[0]} != expected M={m}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("trajectory contains non-finite coordinates")
    return arr


def as_scene_features(values, f: int | None = None) -> np.ndarray:
    """Validate and return scene features as an ``(F,)`` float64 vector."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ValueError(f"scene features must be a 1-D vector, got shape {arr.shape}")
    if f is not None and arr.shape[0] != f:
        raise ValueError(f"scene feature length {arr.shape[0]} != expected F={f}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scene features contain non-finite values")
    return arr


def to_agent_frame(world_points, anchor_pose, m: int | None = None) -> np.ndarray:
    """Re-express world-frame points in the agent frame of ``anchor_pose``.

    Parameters
    ----------
    world_points : (M, 2) array
        Positions in the world frame.
    anchor_pose : (x, y, heading)
        Agent position and heading (radians) at prediction time.

    Returns
    -------
    (M, 2) array: points translated by -anchor position and rotated by
    -heading, so the anchor maps to the origin with heading along +x.
    """
    pts = np.asarray(world_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (M, 2) points, got shape {pts.shape}")
    if m is not None and pts.shape[0] != m:
        raise ValueError(f"expected {m} points, got {pts.shape[0]}")
    x, y, heading = (float(v) for v in anchor_pose)
    if not all(math.isfinite(v) for v in (x, y, heading)):
        raise ValueError("anchor pose must be finite")
    c, s = math.cos(heading), math.sin(heading)
    shifted = pts - np.array([x, y])
    rot = np.array([[c, s], [-s, c]])  # rotation by -heading
    return shifted @ rot.T


def from_agent_frame(agent_points, anchor_pose) -> np.ndarray:
    """Inverse of :func:`to_agent_frame`: agent-frame points back to world."""
    pts = np.asarray(agent_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (M, 2) points, got shape {pts.shape}")
    x, y, heading = (float(v) for v in anchor_pose)
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + np.array([x, y])


def trajectory_distance(a, b) -> float:
    """Euclidean distance between two trajectories over all 2M coordinates."""
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ValueError(f"trajectory shapes differ: {pa.shape} vs {pb.shape}")
    return float(np.linalg.norm((pa - pb).ravel()))


def flatten_trajectories(trajectories) -> np.ndarray:
    """Stack trajectories into an ``(n, 2M)`` matrix of flattened rows."""
    arr = np.asarray(trajectories, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"expected (n, M, 2) trajectories, got shape {arr.shape}")
    return arr.reshape(arr.shape[0], -1)


def assert_unit_norm(vec: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Check a vector (or rows of a matrix) lie on the unit sphere."""
    arr = np.asarray(vec, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"embedding norm deviates from 1 by {worst:.3g}")
    return arr
