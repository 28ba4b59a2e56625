"""Trajectory bank construction and the cluster-then-uniform sampler.

The bank holds every training trajectory once, with a cluster label.
Drawing a sample means picking a cluster uniformly and then a member
uniformly, so an entry in cluster ``c`` has marginal probability
``1 / (K * |c|)``.  Rare maneuver clusters are therefore sampled far
more often than their raw frequency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import DatasetHeader
from .errors import DataError

BANK_METHODS = ("minibatch_kmeans", "full_kmeans", "none")


# ---------------------------------------------------------------------------
# k-means on generic (n, D) float64 matrices


def _kmeanspp_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws without replacement."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            centers[j] = x[int(rng.integers(n))]
            continue
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def _squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x||^2 - 2 x.c + ||c||^2, clipped at 0 against round-off
    d2 = (
        np.sum(x**2, axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _repair_empty_clusters(x, centers, assign, k):
    """Give each empty cluster the point currently farthest from its center."""
    counts = np.bincount(assign, minlength=k)
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return assign
    assign = assign.copy()
    own_d2 = np.sum((x - centers[assign]) ** 2, axis=1)
    for c in empties:
        donor_ok = np.bincount(assign, minlength=k)[assign] > 1
        candidates = np.where(donor_ok, own_d2, -np.inf)
        far = int(np.argmax(candidates))
        assign[far] = c
        own_d2[far] = 0.0
    return assign


def _canonical_order(x: np.ndarray) -> np.ndarray:
    """Row order that depends only on row values, not input order."""
    return np.lexsort(tuple(x[:, j] for j in range(x.shape[1] - 1, -1, -1)))


def kmeans_full(points, k: int, max_iters: int = 100, seed: int = 0):
    """Full-batch Lloyd iterations with k-means++ seeding.

    Rows are internally processed in a canonical value order, so the
    result is invariant to permutations of the input.  Returns
    ``(centers, assignments, objective_trace)``; the trace (sum of
    squared distances to assigned centers) is non-increasing.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (n, D) points, got shape {x.shape}")
    n = x.shape[0]
    n_distinct = np.unique(x, axis=0).shape[0]
    if k < 1 or k > n_distinct:
        raise ValueError(f"need 1 <= K <= {n_distinct} distinct points, got K={k}")

    order = _canonical_order(x)
    xs = x[order]
    rng = np.random.default_rng([seed])
    centers = _kmeanspp_init(xs, k, rng)
    assign = np.full(n, -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iters):
        d2 = _squared_distances(xs, centers)
        new_assign = np.argmin(d2, axis=1)
        new_assign = _repair_empty_clusters(xs, centers, new_assign, k)
        for c in range(k):
            members = xs[new_assign == c]
            if members.size:
                centers[c] = members.mean(axis=0)
        trace.append(float(np.sum((xs - centers[new_assign]) ** 2)))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    out = np.empty(n, dtype=np.int64)
    out[order] = assign
    return centers, out, trace


def kmeans_minibatch(
    points, k: int, batch_size: int = 1024, n_batches: int = 100, seed: int = 0
):
    """Mini-batch k-means with per-center 1/count learning rates.

    Each batch is assigned against the centers at the start of the
    batch, then centers take sequential convex steps toward the batch
    members.  A final full pass assigns every point to its nearest
    center.  Deterministic given the seed.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (n, D) points, got shape {x.shape}")
    n = x.shape[0]
    n_distinct = np.unique(x, axis=0).shape[0]
    if k < 1 or k > n_distinct:
        raise ValueError(f"need 1 <= K <= {n_distinct} distinct points, got K={k}")
    if batch_size < 1 or n_batches < 1:
        raise ValueError("batch_size and n_batches must be >= 1")
    batch_size = min(batch_size, n)

    rng = np.random.default_rng([seed])
    centers = _kmeanspp_init(x, k, rng)
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(n_batches):
        idx = rng.choice(n, size=batch_size, replace=False)
        batch = x[idx]
        batch_assign = np.argmin(_squared_distances(batch, centers), axis=1)
        for point, c in zip(batch, batch_assign):
            counts[c] += 1
            lr = 1.0 / counts[c]
            centers[c] = (1.0 - lr) * centers[c] + lr * point
    assign = np.argmin(_squared_distances(x, centers), axis=1)
    return centers, assign


def kmeans_objective(points, centers, assign) -> float:
    x = np.asarray(points, dtype=np.float64)
    return float(np.sum((x - centers[assign]) ** 2))


# ---------------------------------------------------------------------------
# Trajectory bank


@dataclass
class TrajectoryBank:
    """Clustered set of trajectories; the support of the sampler."""

    ids: list[str]
    trajectories: np.ndarray  # (n, M, 2)
    assignments: np.ndarray  # (n,) int in [0, K)
    n_clusters: int
    m: int
    dt: float
    _members: list[np.ndarray] = field(default=None, repr=False)  # type: ignore[assignment]
    _id_to_row: dict[str, int] = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        n = len(self.ids)
        if n == 0:
            raise ValueError("bank must be nonempty")
        if self.trajectories.shape[0] != n or self.assignments.shape[0] != n:
            raise ValueError("ids, trajectories, assignments must align")
        if len(set(self.ids)) != n:
            raise ValueError("bank ids must be unique")
        counts = np.bincount(self.assignments, minlength=self.n_clusters)
        if counts.size != self.n_clusters or np.any(counts == 0):
            raise ValueError("every cluster in [0, K) must be nonempty")
        self._members = [
            np.flatnonzero(self.assignments == c) for c in range(self.n_clusters)
        ]
        self._id_to_row = {eid: i for i, eid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([m.size for m in self._members], dtype=np.int64)

    def row_of(self, entry_id: str) -> int:
        return self._id_to_row[entry_id]

    def cluster_of(self, entry_id: str) -> int:
        return int(self.assignments[self._id_to_row[entry_id]])


def build_bank(examples, k: int, method: str = "minibatch_kmeans", seed: int = 0,
               *, header: DatasetHeader, batch_size: int = 1024,
               n_batches: int = 100, max_iters: int = 100) -> TrajectoryBank:
    """Cluster the ground-truth trajectories of a dataset into a bank.

    ``method`` is one of ``minibatch_kmeans``, ``full_kmeans``, or
    ``none`` (a single cluster, disabling rebalancing).
    """
    if not examples:
        raise ValueError("dataset must be nonempty")
    if method not in BANK_METHODS:
        raise ValueError(f"method must be one of {BANK_METHODS}, got {method!r}")
    ids = [ex.id for ex in examples]
    trajs = np.stack([ex.ground_truth for ex in examples])
    flat = trajs.reshape(len(examples), -1)
    if method == "none":
        assign = np.zeros(len(examples), dtype=np.int64)
        k_eff = 1
    elif method == "full_kmeans":
        centers, assign, _ = kmeans_full(flat, k, max_iters=max_iters, seed=seed)
        k_eff = k
    else:
        centers, assign = kmeans_minibatch(
            flat, k, batch_size=batch_size, n_batches=n_batches, seed=seed
        )
        assign = _repair_empty_clusters(flat, centers, assign, k)
        k_eff = k
    return TrajectoryBank(
        ids=ids,
        trajectories=trajs,
        assignments=np.asarray(assign, dtype=np.int64),
        n_clusters=k_eff,
        m=header.M,
        dt=header.dt,
    )


def sample_h_rows(bank: TrajectoryBank, rng, size: int) -> np.ndarray:
    """Row indices of ``size`` draws: uniform cluster, then uniform member."""
    clusters = rng.integers(0, bank.n_clusters, size=size)
    sizes = bank.cluster_sizes
    member_pos = rng.integers(0, sizes[clusters])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat_members = np.concatenate(bank._members)
    return flat_members[starts[clusters] + member_pos]


def sample_h(bank: TrajectoryBank, rng) -> np.ndarray:
    """One trajectory drawn from the cluster-then-uniform distribution."""
    row = sample_h_rows(bank, rng, 1)[0]
    return bank.trajectories[row]


def h_density(bank: TrajectoryBank, entry_id: str) -> float:
    """Sampler probability of one entry: ``1 / (K * cluster size)``."""
    c = bank.cluster_of(entry_id)
    return 1.0 / (bank.n_clusters * bank.cluster_sizes[c])


def h_log_weights(bank: TrajectoryBank) -> np.ndarray:
    """Log sampler probability per bank row; sums (in prob space) to 1."""
    sizes = bank.cluster_sizes
    return -np.log(bank.n_clusters * sizes[bank.assignments]).astype(np.float64)


# ---------------------------------------------------------------------------
# Bank file format: JSONL header + one record per entry


def save_bank(path, bank: TrajectoryBank) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {"M": bank.m, "dt": bank.dt, "K": bank.n_clusters,
                 "n": len(bank), "version": 1}
            )
            + "\n"
        )
        for i, eid in enumerate(bank.ids):
            rec = {
                "id": eid,
                "cluster": int(bank.assignments[i]),
                "traj": bank.trajectories[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_bank(path) -> TrajectoryBank:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError("empty bank file", line=1)
    try:
        head = json.loads(lines[0])
        m = int(head["M"])
        dt = float(head["dt"])
        k = int(head["K"])
        n = int(head["n"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed bank header: {exc}", line=1) from exc
    ids, assigns, trajs = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            traj = np.asarray(rec["traj"], dtype=np.float64)
            if traj.shape != (m, 2):
                raise ValueError(f"traj shape {traj.shape} != (M={m}, 2)")
            ids.append(str(rec["id"]))
            assigns.append(int(rec["cluster"]))
            trajs.append(traj)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed bank record: {exc}", line=lineno) from exc
    if len(ids) != n:
        raise DataError(f"bank header declares n={n} but file has {len(ids)} entries")
    try:
        return TrajectoryBank(
            ids=ids,
            trajectories=np.stack(trajs),
            assignments=np.asarray(assigns, dtype=np.int64),
            n_clusters=k,
            m=m,
            dt=dt,
        )
    except ValueError as exc:
        raise DataError(f"invalid bank contents: {exc}") from exc
