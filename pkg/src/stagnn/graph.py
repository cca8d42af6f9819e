"""Sensor graph from thresholded pairwise correlation."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError

MEASURES = ("pearson", "covariance")


@dataclass
class AdjacencyMatrix:
    """Binary sensor adjacency and its normalized propagation matrix."""

    A: np.ndarray
    A_hat: np.ndarray
    lam: float
    measure: str = "pearson"

    @property
    def n_nodes(self) -> int:
        return self.A.shape[0]

    @property
    def neighbourhood(self) -> np.ndarray:
        """Boolean mask of each node's neighbours, itself included."""
        return (self.A + np.eye(self.n_nodes)) > 0

    @property
    def n_edges(self) -> int:
        return int(self.A.sum()) // 2

    @classmethod
    def from_binary(cls, A, lam: float = float("nan"), measure: str = "pearson") -> "AdjacencyMatrix":
        A = np.asarray(A, dtype=np.float64)
        return cls(A=A, A_hat=normalize_propagation(A), lam=lam, measure=measure)

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.A, fmt="%d", delimiter=",")
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load_csv(cls, path, lam: float = float("nan"), measure: str = "pearson") -> "AdjacencyMatrix":
        A = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls.from_binary(A, lam=lam, measure=measure)


def _stack(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        x = data
    else:
        # sequence of trajectories
        x = np.concatenate([t.features for t in data])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a (cycles, channels) matrix, got shape {x.shape}")
    return x


def pairwise_relation(x: np.ndarray, measure: str = "pearson") -> np.ndarray:
    """Pearson correlation (or raw covariance) between channel columns.

    Zero-variance channels get a correlation of 0 with every other channel.
    """
    if measure not in MEASURES:
        raise ParameterError(f"measure must be one of {MEASURES}, got {measure!r}")
    if len(x) < 2:
        raise ParameterError("need at least 2 cycles to estimate a relation")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (len(x) - 1)
    if measure == "covariance":
        return cov
    std = np.sqrt(np.diag(cov))
    denom = np.outer(std, std)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0, cov / denom, 0.0)
    return np.clip(rho, -1.0, 1.0)


def build_adjacency(data, lam: float = 0.5, measure: str = "pearson") -> AdjacencyMatrix:
    """``A[i, j] = 1`` iff ``|relation(i, j)| > lam`` for ``i != j``.

    ``data`` is a ``(cycles, channels)`` array or a sequence of trajectories
    whose cycles are stacked.
    """
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {lam}")
    rel = pairwise_relation(_stack(data), measure)
    A = (np.abs(rel) > lam).astype(np.float64)
    np.fill_diagonal(A, 0.0)
    return AdjacencyMatrix(A=A, A_hat=normalize_propagation(A), lam=float(lam), measure=measure)


def normalize_propagation(A) -> np.ndarray:
    """Symmetric normalization with self-loops: ``D^-1/2 (A + I) D^-1/2``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be square, got {A.shape}")
    A_tilde = A + np.eye(len(A))
    d = 1.0 / np.sqrt(A_tilde.sum(axis=1))
    return A_tilde * d[:, None] * d[None, :]
