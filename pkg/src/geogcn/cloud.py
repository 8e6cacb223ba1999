"""Point cloud containers, exact kNN queries, patches, and PCA normals.

All neighbor queries are exact and deterministic: candidates are ordered
by (distance, index), so equidistant neighbors resolve to the lower
index. Clouds below _BRUTE_FORCE_LIMIT points use a dense distance
matrix; larger clouds go through a k-d tree whose candidate lists are
re-sorted into the same order, with a brute-force fallback for rows
whose tie group might be truncated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, InvalidArgumentError, ValidationError

_BRUTE_FORCE_LIMIT = 1000
_UNIT_TOL = 1e-6
# Extra candidates fetched from the tree to absorb distance ties.
_TIE_SLACK = 8


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    out = np.array(values, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3-D points, optionally with unit normals.

    positions is (N, 3) float64 and immutable; normals, when present,
    matches it row for row. Point order is meaningful: noisy/clean pairs
    correspond by index.
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise InvalidArgumentError(
                f"positions must be (N, 3), got {positions.shape}")
        if positions.shape[0] == 0:
            raise InvalidArgumentError("a point cloud cannot be empty")
        if not np.isfinite(positions).all():
            raise ValidationError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "positions", _frozen_array(positions))
        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64)
            if normals.shape != positions.shape:
                raise InvalidArgumentError(
                    f"normals shape {normals.shape} does not match positions")
            if not np.isfinite(normals).all():
                raise ValidationError("normals contain non-finite values")
            lengths = np.linalg.norm(normals, axis=1)
            worst = float(np.abs(lengths - 1.0).max())
            if worst > _UNIT_TOL:
                raise ValidationError(
                    f"normals must be unit length within {_UNIT_TOL:g} "
                    f"(worst deviation {worst:.3g})")
            object.__setattr__(self, "normals", _frozen_array(normals))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def bbox_diagonal(self) -> float:
        extent = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(extent))

    def with_positions(self, positions) -> "PointCloud":
        return PointCloud(positions, self.normals, self.name)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.positions, normals, self.name)


@dataclass(frozen=True)
class Normal:
    """A unit direction; oriented=False means the sign is arbitrary."""

    direction: np.ndarray
    oriented: bool = False

    def __post_init__(self):
        direction = np.asarray(self.direction, dtype=np.float64)
        if direction.shape != (3,):
            raise InvalidArgumentError(f"normal must be a 3-vector, got {direction.shape}")
        length = float(np.linalg.norm(direction))
        if not np.isfinite(length) or abs(length - 1.0) > _UNIT_TOL:
            raise InvalidArgumentError(f"normal must be unit length, got |n|={length:.6g}")
        object.__setattr__(self, "direction", _frozen_array(direction))


@dataclass(frozen=True)
class KnnGraph:
    """Exact k-nearest-neighbor indices, one row of k per point."""

    k: int
    neighbor_indices: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.neighbor_indices, dtype=np.int64)
        if indices.ndim != 2 or indices.shape[1] != self.k:
            raise InvalidArgumentError(
                f"neighbor_indices must be (N, {self.k}), got {indices.shape}")
        n = indices.shape[0]
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise InvalidArgumentError("neighbor index out of range")
        if (indices == np.arange(n)[:, None]).any():
            raise InvalidArgumentError("a point cannot be its own neighbor")
        object.__setattr__(self, "neighbor_indices", _frozen_array(indices, np.int64))

    def __len__(self) -> int:
        return self.neighbor_indices.shape[0]


@dataclass(frozen=True)
class Patch:
    """A local neighborhood plus the transform that normalized it.

    member_indices[0] is the seed. normalized_positions maps members into
    the patch frame (seed at the origin, scaled by the seed's farthest
    member distance); denormalize inverts that for network outputs.
    """

    seed_index: int
    member_indices: np.ndarray
    centroid_offset: np.ndarray
    scale: float

    def __post_init__(self):
        members = np.asarray(self.member_indices, dtype=np.int64)
        if members.ndim != 1 or members.size == 0:
            raise InvalidArgumentError("member_indices must be a non-empty 1-D array")
        if np.unique(members).size != members.size:
            raise InvalidArgumentError("patch members must be distinct")
        if members[0] != self.seed_index:
            raise InvalidArgumentError("member_indices must start with the seed")
        offset = np.asarray(self.centroid_offset, dtype=np.float64)
        if offset.shape != (3,):
            raise InvalidArgumentError("centroid_offset must be a 3-vector")
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise InvalidArgumentError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "member_indices", _frozen_array(members, np.int64))
        object.__setattr__(self, "centroid_offset", _frozen_array(offset))

    def __len__(self) -> int:
        return self.member_indices.shape[0]

    def normalized_positions(self, cloud: PointCloud) -> np.ndarray:
        gathered = cloud.positions[self.member_indices]
        return (gathered - self.centroid_offset) / self.scale

    def denormalize(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64)
        return positions * self.scale + self.centroid_offset


def _neighbor_order(distances: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Order candidate columns by (distance, index), rows independent."""
    by_index = np.argsort(indices, axis=1, kind="stable")
    dist_sorted = np.take_along_axis(distances, by_index, axis=1)
    by_dist = np.argsort(dist_sorted, axis=1, kind="stable")
    return np.take_along_axis(by_index, by_dist, axis=1)


def _knn_brute(points: np.ndarray, k: int, rows: np.ndarray | None = None) -> np.ndarray:
    """Exact kNN by dense distances; rows selects a subset of query points."""
    query = points if rows is None else points[rows]
    deltas = query[:, None, :] - points[None, :, :]
    dist2 = np.einsum("qnd,qnd->qn", deltas, deltas)
    own = np.arange(len(points)) if rows is None else rows
    dist2[np.arange(len(query)), own] = np.inf
    # Stable argsort on the index-ordered array is exactly (distance, index).
    return np.argsort(dist2, axis=1, kind="stable")[:, :k]


def _knn_tree(points: np.ndarray, k: int) -> np.ndarray:
    n = len(points)
    tree = cKDTree(points)
    fetch = min(k + 1 + _TIE_SLACK, n)
    dist, idx = tree.query(points, k=fetch)
    order = _neighbor_order(dist, idx)
    idx = np.take_along_axis(idx, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    keep = idx != np.arange(n)[:, None]
    result = np.empty((n, k), dtype=np.int64)
    suspect = []
    for i in range(n):
        candidates = idx[i][keep[i]]
        if candidates.size < k:
            suspect.append(i)
            continue
        result[i] = candidates[:k]
        # A tie crossing the fetch boundary may hide a lower index beyond it.
        picked = dist[i][keep[i]]
        if fetch < n and picked[k - 1] >= dist[i][-1]:
            suspect.append(i)
    if suspect:
        rows = np.asarray(suspect, dtype=np.int64)
        result[rows] = _knn_brute(points, k, rows)
    return result


def build_knn_graph(cloud: PointCloud, k: int) -> KnnGraph:
    """Exact kNN graph with deterministic (distance, index) tie order.

    Requires 1 <= k < len(cloud) so every point has k distinct neighbors.
    """
    n = len(cloud)
    if k < 1:
        raise InvalidArgumentError(f"k must be at least 1, got {k}")
    if k >= n:
        raise InvalidArgumentError(
            f"k={k} needs a cloud with more than {k} points, got {n}")
    points = cloud.positions
    if n <= _BRUTE_FORCE_LIMIT:
        indices = _knn_brute(points, k)
    else:
        indices = _knn_tree(points, k)
    return KnnGraph(k=k, neighbor_indices=indices)


def extract_patch(cloud: PointCloud, seed_index: int, k: int,
                  tree: cKDTree | None = None) -> Patch:
    """The seed plus its k-1 nearest neighbors, normalized to the seed frame.

    The patch scale is the largest seed-to-member distance (1.0 for a
    single-member patch). Pass a cKDTree over cloud.positions to avoid
    rebuilding one per call on large clouds.
    """
    n = len(cloud)
    if not 0 <= seed_index < n:
        raise InvalidArgumentError(f"seed_index {seed_index} out of range for {n} points")
    if k < 1 or k > n:
        raise InvalidArgumentError(f"patch size {k} must be within [1, {n}]")
    seed = cloud.positions[seed_index]
    if k == 1:
        members = np.array([seed_index], dtype=np.int64)
        return Patch(seed_index, members, seed.copy(), 1.0)

    if tree is not None and n > _BRUTE_FORCE_LIMIT:
        fetch = min(k + _TIE_SLACK, n)
        dist, idx = tree.query(seed, k=fetch)
        order = _neighbor_order(dist[None, :], idx[None, :])[0]
        idx = idx[order]
        dist = dist[order]
        candidates = idx[idx != seed_index]
        exact = candidates.size >= k - 1 and (
            fetch == n or dist[idx != seed_index][k - 2] < dist[-1])
        if exact:
            members = np.concatenate(([seed_index], candidates[:k - 1]))
        else:
            members = None
    else:
        members = None

    if members is None:
        deltas = cloud.positions - seed
        dist2 = np.einsum("nd,nd->n", deltas, deltas)
        dist2[seed_index] = -np.inf
        order = np.argsort(dist2, kind="stable")
        members = order[:k]

    span = np.linalg.norm(cloud.positions[members] - seed, axis=1)
    scale = float(span.max())
    if scale <= 0.0:
        scale = 1.0
    return Patch(seed_index, members, seed.copy(), scale)


def pca_normal(points: np.ndarray) -> Normal:
    """Unoriented surface normal of a neighborhood via PCA.

    The normal is the eigenvector of the positional covariance with the
    smallest eigenvalue. The sign is fixed so the component with the
    largest magnitude is positive, making the result rotation-covariant
    up to that convention. Fewer than 3 points, or all points coincident,
    is degenerate.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidArgumentError(f"points must be (N, 3), got {points.shape}")
    if points.shape[0] < 3:
        raise DegenerateInputError(
            f"PCA normal needs at least 3 points, got {points.shape[0]}")
    if (points == points[0]).all():
        raise DegenerateInputError("all points coincident; normal undefined")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered
    _, vectors = np.linalg.eigh(cov)
    return Normal(_sign_fixed(vectors[:, 0]), oriented=False)


def _sign_fixed(vector: np.ndarray) -> np.ndarray:
    pivot = int(np.argmax(np.abs(vector)))
    if vector[pivot] < 0.0:
        vector = -vector
    length = np.linalg.norm(vector)
    return vector / length


def pca_directions(neighborhoods: np.ndarray) -> np.ndarray:
    """Smallest-variance unit direction of each (N, K, 3) neighborhood.

    Batched version of pca_normal's core with the same sign convention.
    Fully degenerate neighborhoods are not rejected here; callers that
    need that check must apply it themselves.
    """
    neighborhoods = np.asarray(neighborhoods, dtype=np.float64)
    if neighborhoods.ndim != 3 or neighborhoods.shape[2] != 3 \
            or neighborhoods.shape[1] < 3:
        raise InvalidArgumentError(
            f"neighborhoods must be (N, K>=3, 3), got {neighborhoods.shape}")
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vectors = np.linalg.eigh(cov)
    normals = vectors[:, :, 0]
    n = normals.shape[0]
    pivots = np.argmax(np.abs(normals), axis=1)
    signs = np.sign(normals[np.arange(n), pivots])
    signs[signs == 0.0] = 1.0
    normals = normals * signs[:, None]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def estimate_all_normals(cloud: PointCloud, graph: KnnGraph) -> PointCloud:
    """PCA normals for every point from {point} + its graph neighbors.

    Requires k >= 2 so each neighborhood holds at least 3 points. Returns
    a new cloud carrying the estimated (unoriented) normals.
    """
    n = len(cloud)
    if len(graph) != n:
        raise InvalidArgumentError(
            f"graph covers {len(graph)} points but the cloud has {n}")
    if graph.k < 2:
        raise InvalidArgumentError("normal estimation needs a graph with k >= 2")
    neighborhoods = np.concatenate(
        [cloud.positions[:, None, :], cloud.positions[graph.neighbor_indices]], axis=1)
    degenerate = ~np.any(neighborhoods != neighborhoods[:, :1, :], axis=(1, 2))
    if degenerate.any():
        rows = np.flatnonzero(degenerate)[:8]
        raise DegenerateInputError(
            f"coincident neighborhoods at points {rows.tolist()}")
    return cloud.with_normals(pca_directions(neighborhoods))
