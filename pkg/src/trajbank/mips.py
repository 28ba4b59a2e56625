"""Max-inner-product search over bank trajectory embeddings.

Two variants: an exact scanner (the oracle and small-scale default) and
an inverted-list index whose coarse quantizer is a spherical k-means
over the embeddings.  Queries probe the ``n_probe`` nearest lists by
centroid inner product.  Results are sorted by score descending with
ties broken by ascending id, identically in both variants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bank import TrajectoryBank, _kmeanspp_init
from .core import assert_unit_norm
from .encoders import ModelParams, encode_trajectories
from .errors import DataError

INDEX_VERSION = 1
VARIANTS = ("exact", "ivf")


@dataclass
class MipsIndex:
    ids: list[str]
    embeddings: np.ndarray  # (n, d), unit rows
    variant: str = "exact"
    n_lists: int = 0
    n_probe: int = 1
    centroids: np.ndarray | None = None  # (n_lists, d), unit rows
    list_assign: np.ndarray | None = None  # (n,) int
    _lists: list[np.ndarray] = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        n = len(self.ids)
        if n < 1:
            raise ValueError("index must contain at least one embedding")
        if self.embeddings.shape[0] != n:
            raise ValueError("ids and embeddings must align")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        assert_unit_norm(self.embeddings)
        if self.variant == "ivf":
            if self.centroids is None or self.list_assign is None:
                raise ValueError("ivf variant requires centroids and assignments")
            self._lists = [
                np.flatnonzero(self.list_assign == c) for c in range(self.n_lists)
            ]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]


def _spherical_kmeans(x: np.ndarray, k: int, seed: int, max_iters: int = 25):
    """k-means on unit vectors; centroids renormalized each update."""
    rng = np.random.default_rng([seed])
    centers = _kmeanspp_init(x, k, rng)
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    centers = centers / np.maximum(norms, 1e-12)
    assign = np.full(x.shape[0], -1, dtype=np.int64)
    for _ in range(max_iters):
        new_assign = np.argmax(x @ centers.T, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = x[assign == c]
            if members.size == 0:
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centers[c] = mean / norm
    return centers, assign


def build_index(
    bank: TrajectoryBank,
    params: ModelParams,
    variant: str = "exact",
    n_lists: int = 64,
    n_probe: int = 8,
    seed: int = 0,
    batch_rows: int = 8192,
) -> MipsIndex:
    """Embed every bank trajectory and assemble the chosen index variant."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    n = len(bank)
    chunks = [
        encode_trajectories(params, bank.trajectories[i:i + batch_rows])
        for i in range(0, n, batch_rows)
    ]
    emb = np.concatenate(chunks, axis=0)
    if variant == "exact":
        return MipsIndex(ids=list(bank.ids), embeddings=emb)
    if n_lists < 1 or n_lists > n:
        raise ValueError(f"need 1 <= n_lists <= {n}, got {n_lists}")
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    centroids, assign = _spherical_kmeans(emb, n_lists, seed)
    return MipsIndex(
        ids=list(bank.ids),
        embeddings=emb,
        variant="ivf",
        n_lists=n_lists,
        n_probe=min(n_probe, n_lists),
        centroids=centroids,
        list_assign=assign.astype(np.int64),
    )


def _top_k_by_score(ids: list[str], scores: np.ndarray,
                    positions: np.ndarray, top_k: int):
    """Top-k of the given positions, score descending then id ascending."""
    k = min(top_k, positions.size)
    if k == positions.size:
        chosen = positions
    else:
        sub = scores[positions]
        kth = np.partition(sub, sub.size - k)[sub.size - k]
        greater = positions[sub > kth]
        tied = positions[sub == kth]
        need = k - greater.size
        if need > 0:
            tied_sorted = sorted(tied, key=lambda p: ids[p])[:need]
            chosen = np.concatenate([greater, np.array(tied_sorted, dtype=np.int64)])
        else:
            chosen = greater
    ranked = sorted(chosen, key=lambda p: (-scores[p], ids[p]))
    return [(ids[p], float(scores[p])) for p in ranked]


def search(index: MipsIndex, query_emb, top_k: int = 150):
    """Trajectory ids with the largest inner product against the query.

    Returns at most ``top_k`` pairs ``(id, score)``; asking for more
    results than stored entries returns all of them.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    q = np.asarray(query_emb, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.d:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.d}")
    assert_unit_norm(q)
    if index.variant == "exact":
        scores = index.embeddings @ q
        positions = np.arange(len(index))
    else:
        centroid_scores = index.centroids @ q
        probe_order = np.argsort(-centroid_scores, kind="stable")[: index.n_probe]
        positions = np.concatenate([index._lists[c] for c in probe_order]) \
            if probe_order.size else np.empty(0, dtype=np.int64)
        if positions.size == 0:
            return []
        scores = np.full(len(index), -np.inf)
        scores[positions] = index.embeddings[positions] @ q
    return _top_k_by_score(index.ids, scores, positions, top_k)


def save_index(path, index: MipsIndex) -> None:
    header = {
        "n": len(index),
        "d": index.d,
        "variant": index.variant,
        "n_lists": index.n_lists,
        "n_probe": index.n_probe,
        "version": INDEX_VERSION,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write((json.dumps(index.ids) + "\n").encode("utf-8"))
        fh.write(index.embeddings.astype("<f8").tobytes())
        if index.variant == "ivf":
            fh.write(index.centroids.astype("<f8").tobytes())
            fh.write(index.list_assign.astype("<i8").tobytes())


def load_index(path) -> MipsIndex:
    with open(path, "rb") as fh:
        head_line = fh.readline()
        ids_line = fh.readline()
        payload = fh.read()
    try:
        head = json.loads(head_line.decode("utf-8"))
        ids = json.loads(ids_line.decode("utf-8"))
        n, d = int(head["n"]), int(head["d"])
        variant = head["variant"]
        n_lists = int(head["n_lists"])
        n_probe = int(head["n_probe"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed index header: {exc}", line=1) from exc
    if len(ids) != n:
        raise DataError(f"index header declares n={n} but has {len(ids)} ids")
    emb_bytes = n * d * 8
    if variant == "exact":
        if len(payload) != emb_bytes:
            raise DataError("index payload size mismatch")
        emb = np.frombuffer(payload, dtype="<f8").reshape(n, d)
        return MipsIndex(ids=list(ids), embeddings=np.array(emb))
    cent_bytes = n_lists * d * 8
    if len(payload) != emb_bytes + cent_bytes + n * 8:
        raise DataError("index payload size mismatch")
    emb = np.frombuffer(payload, dtype="<f8", count=n * d).reshape(n, d)
    centroids = np.frombuffer(
        payload, dtype="<f8", count=n_lists * d, offset=emb_bytes
    ).reshape(n_lists, d)
    assign = np.frombuffer(payload, dtype="<i8", offset=emb_bytes + cent_bytes)
    return MipsIndex(
        ids=list(ids),
        embeddings=np.array(emb),
        variant="ivf",
        n_lists=n_lists,
        n_probe=n_probe,
        centroids=np.array(centroids),
        list_assign=np.array(assign),
    )
