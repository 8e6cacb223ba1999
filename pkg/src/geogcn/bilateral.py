"""Normal-guided bilateral position updates.

Each iteration moves every point by a sum over its current k nearest
neighbors (the graph is rebuilt every iteration; normals stay fixed):

    p_i += gamma * sum_j [ w(n_i, n_j) * (n_i . d_ij) n_i
                           + lam * (n_j . d_ij) n_j ],   d_ij = p_j - p_i

with w(n_i, n_j) = exp(-||n_i - n_j||^2 / sigma^2) and gamma = 1/(3k).
The two projection terms pull points onto the local tangent planes
implied by their own and their neighbors' normals; across sharp edges w
collapses, so features survive smoothing. literal_update swaps in the
plain scalar-weighted form p_i += gamma * sum_j (w + lam) * d_ij, which
reads the update as a weighted Laplacian instead; it smooths but cannot
preserve edges, and is kept for comparison.

All updates within an iteration use the previous iteration's positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import KnnGraph, PointCloud, build_knn_graph
from .errors import InvalidArgumentError

_DEFAULT_SIGMA = 0.3
_DEFAULT_LAMBDA = 0.5
_DEFAULT_ITERATIONS = 10
_DEFAULT_K = 16


@dataclass(frozen=True)
class FilterConfig:
    """Bilateral filter settings; defaults match the intended pipeline."""

    sigma: float = _DEFAULT_SIGMA
    lam: float = _DEFAULT_LAMBDA
    iterations: int = _DEFAULT_ITERATIONS
    k_neighbors: int = _DEFAULT_K
    literal_update: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0.0):
            raise InvalidArgumentError(f"sigma must be positive, got {self.sigma}")
        if not (np.isfinite(self.lam) and self.lam >= 0.0):
            raise InvalidArgumentError(f"lam must be non-negative, got {self.lam}")
        if self.iterations < 0:
            raise InvalidArgumentError(
                f"iterations must be non-negative, got {self.iterations}")
        if self.k_neighbors < 1:
            raise InvalidArgumentError(
                f"k_neighbors must be positive, got {self.k_neighbors}")

    def to_json(self) -> dict:
        return {
            "sigma": self.sigma,
            "lam": self.lam,
            "iterations": self.iterations,
            "k_neighbors": self.k_neighbors,
            "literal_update": self.literal_update,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FilterConfig":
        return cls(
            sigma=float(doc.get("sigma", _DEFAULT_SIGMA)),
            lam=float(doc.get("lam", _DEFAULT_LAMBDA)),
            iterations=int(doc.get("iterations", _DEFAULT_ITERATIONS)),
            k_neighbors=int(doc.get("k_neighbors", _DEFAULT_K)),
            literal_update=bool(doc.get("literal_update", False)),
        )


def bilateral_weight(n_i, n_j, sigma: float):
    """exp(-||n_i - n_j||^2 / sigma^2), elementwise over leading axes."""
    if sigma <= 0.0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    n_i = np.asarray(n_i, dtype=np.float64)
    n_j = np.asarray(n_j, dtype=np.float64)
    sq = ((n_i - n_j) ** 2).sum(axis=-1)
    out = np.exp(-sq / (sigma * sigma))
    return float(out) if out.ndim == 0 else out


def filter_step(positions: np.ndarray, normals: np.ndarray,
                graph, config: FilterConfig) -> np.ndarray:
    """One synchronous update of every position; inputs are not modified.

    graph is a KnnGraph or a raw (N, k) neighbor-index array.
    """
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    neighbor_indices = np.asarray(
        graph.neighbor_indices if isinstance(graph, KnnGraph) else graph,
        dtype=np.int64)
    n = positions.shape[0]
    if positions.shape != (n, 3) or normals.shape != (n, 3):
        raise InvalidArgumentError("positions and normals must both be (N, 3)")
    if neighbor_indices.ndim != 2 or neighbor_indices.shape[0] != n:
        raise InvalidArgumentError("neighbor indices must be (N, k)")
    k = neighbor_indices.shape[1]
    p_j = positions[neighbor_indices]
    n_j = normals[neighbor_indices]
    d = p_j - positions[:, None, :]
    w = bilateral_weight(normals[:, None, :], n_j, config.sigma)
    if config.literal_update:
        move = ((w + config.lam)[:, :, None] * d).sum(axis=1)
    else:
        along_i = np.einsum("nkd,nd->nk", d, normals)
        along_j = np.einsum("nkd,nkd->nk", d, n_j)
        move = ((w * along_i)[:, :, None] * normals[:, None, :]
                + (config.lam * along_j)[:, :, None] * n_j).sum(axis=1)
    gamma = 1.0 / (3.0 * k)
    return positions + gamma * move


def final_denoise(cloud: PointCloud, config: FilterConfig) -> PointCloud:
    """Run the configured number of filter iterations on a cloud.

    The cloud must carry normals; they guide every iteration unchanged.
    The kNN graph is rebuilt from the updated positions each iteration.
    """
    if cloud.normals is None:
        raise InvalidArgumentError("bilateral filtering needs normals on the cloud")
    if len(cloud) <= config.k_neighbors:
        raise InvalidArgumentError(
            f"cloud of {len(cloud)} points is too small for k={config.k_neighbors}")
    positions = cloud.positions.copy()
    normals = cloud.normals
    for _ in range(config.iterations):
        graph = build_knn_graph(cloud.with_positions(positions), config.k_neighbors)
        positions = filter_step(positions, normals, graph.neighbor_indices, config)
    return cloud.with_positions(positions)
