"""Unified and operating-condition clustered min-max normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import CHANNEL_NAMES, EngineTrajectory
from .errors import ClusteringError, ParameterError

MODES = ("unified", "clustered")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray  # 0-based
    inertia_history: list
    n_iter: int


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    closest = _sq_dist(points, np.asarray(centroids))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a centroid
            idx = int(rng.integers(len(points)))
        else:
            idx = int(rng.choice(len(points), p=closest / total))
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dist(points, points[idx : idx + 1])[:, 0])
    return np.asarray(centroids, dtype=np.float64)


def fit_kmeans(points, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when no centroid moves more than ``tol`` or after ``max_iters``
    rounds.  A cluster that goes empty is re-seeded at the point farthest from
    its current centroid.  Centroids are returned in lexicographic order so the
    labelling does not depend on the seeding order.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ClusteringError("k-means needs a non-empty 2-D point array")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if len(np.unique(points, axis=0)) < k:
        raise ClusteringError(f"fewer than {k} distinct points")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2 = _sq_dist(points, centroids)
        labels = d2.argmin(axis=1)
        nearest = d2[np.arange(len(points)), labels]
        history.append(float(nearest.sum()))

        new = np.empty_like(centroids)
        taken = set()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = points[members].mean(axis=0)
                continue
            order = np.argsort(-nearest, kind="stable")
            idx = next(int(i) for i in order if int(i) not in taken)
            taken.add(idx)
            new[c] = points[idx]
            nearest[idx] = 0.0
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break

    order = np.lexsort(centroids.T[::-1])
    centroids = centroids[order]
    labels = _sq_dist(points, centroids).argmin(axis=1)
    return KMeansResult(centroids=centroids, labels=labels, inertia_history=history, n_iter=n_iter)


@dataclass
class NormStats:
    """Per-cluster, per-channel min/max plus the operating-condition centroids."""

    mode: str
    centroids: np.ndarray
    mins: np.ndarray
    maxs: np.ndarray
    seed: int = 0
    channels: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "seed": self.seed,
            "channels": list(self.channels),
            "centroids": self.centroids.tolist(),
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        stats = cls(
            mode=d["mode"],
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            mins=np.asarray(d["mins"], dtype=np.float64),
            maxs=np.asarray(d["maxs"], dtype=np.float64),
            seed=int(d.get("seed", 0)),
            channels=list(d.get("channels", [])),
        )
        if stats.k != int(d["k"]):
            raise ValueError("centroid count does not match k")
        return stats

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormStats):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def assign_many(op_vectors, stats: NormStats) -> np.ndarray:
    """1-based nearest-centroid labels; ties go to the lowest label."""
    op_vectors = np.atleast_2d(np.asarray(op_vectors, dtype=np.float64))
    return _sq_dist(op_vectors, stats.centroids).argmin(axis=1) + 1


def assign(op_vector, stats: NormStats) -> int:
    return int(assign_many(op_vector, stats)[0])


def fit_norm(train: Sequence[EngineTrajectory], mode: str = "unified", k: Optional[int] = None, seed: int = 0) -> NormStats:
    """Learn min/max statistics from training trajectories.

    ``unified`` keeps one global range per channel.  ``clustered`` clusters the
    operating settings into ``k`` groups and keeps one range per group.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    if not train:
        raise ParameterError("fit_norm needs at least one trajectory")
    ops = np.concatenate([t.op_settings for t in train])
    feats = np.concatenate([t.features for t in train])

    if mode == "unified":
        centroids = ops.mean(axis=0, keepdims=True)
        labels = np.zeros(len(ops), dtype=np.int64)
    else:
        k = 1 if k is None else int(k)
        result = fit_kmeans(ops, k, seed=seed)
        centroids = result.centroids
        labels = result.labels

    n_clusters = len(centroids)
    mins = np.empty((n_clusters, feats.shape[1]))
    maxs = np.empty((n_clusters, feats.shape[1]))
    for c in range(n_clusters):
        block = feats[labels == c]
        if len(block) == 0:
            raise ClusteringError(f"cluster {c + 1} has no training cycles")
        mins[c] = block.min(axis=0)
        maxs[c] = block.max(axis=0)

    channels = CHANNEL_NAMES if feats.shape[1] == len(CHANNEL_NAMES) else []
    return NormStats(mode=mode, centroids=centroids, mins=mins, maxs=maxs, seed=seed, channels=list(channels))


def normalize_features(features: np.ndarray, labels: np.ndarray, stats: NormStats) -> np.ndarray:
    lo = stats.mins[labels - 1]
    span = stats.maxs[labels - 1] - lo
    flat = span == 0
    # constant channels carry no information and map to 0
    return np.where(flat, 0.0, (features - lo) / np.where(flat, 1.0, span))


def apply_norm(traj: EngineTrajectory, stats: NormStats) -> EngineTrajectory:
    """Min-max scale every channel with the range of each cycle's cluster.

    Values outside the training range are left unclipped.
    """
    labels = assign_many(traj.op_settings, stats)
    return traj.with_features(normalize_features(traj.features, labels, stats))


def apply_norm_all(trajs: Sequence[EngineTrajectory], stats: NormStats) -> list[EngineTrajectory]:
    return [apply_norm(t, stats) for t in trajs]
