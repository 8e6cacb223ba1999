"""Training losses and evaluation metrics.

The earth mover's term solves an exact assignment between two
equal-size clouds and averages the matched distances; its gradient
treats the assignment as fixed, which is the standard subgradient. The
real-normal term sums (not averages) per-point squared errors under the
better of the two signs, since estimated normals are unoriented. Both
evaluation metrics are plain numbers, not differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .cloud import PointCloud
from .errors import InvalidArgumentError

# Exact assignment is cubic; refuse sizes that would silently stall.
MAX_EXACT_ASSIGNMENT = 512


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: alpha * emd + (1 - alpha) * vn + beta * rn."""

    alpha: float = 0.9
    beta: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise InvalidArgumentError(f"beta must be non-negative, got {self.beta}")


@dataclass(frozen=True)
class Assignment:
    """A bijection row i -> permutation[i] with its total matched cost."""

    permutation: np.ndarray
    total_cost: float

    def __post_init__(self):
        permutation = np.asarray(self.permutation, dtype=np.int64)
        n = permutation.shape[0]
        if permutation.ndim != 1 or not np.array_equal(
                np.sort(permutation), np.arange(n)):
            raise InvalidArgumentError("permutation must be a bijection on 0..n-1")
        permutation = permutation.copy()
        permutation.setflags(write=False)
        object.__setattr__(self, "permutation", permutation)


def _positions_of(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.positions
    positions = np.asarray(cloud, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise InvalidArgumentError(f"expected an (N, 3) cloud, got {positions.shape}")
    return positions


def emd_assignment(predicted, target,
                   max_exact: int = MAX_EXACT_ASSIGNMENT) -> Assignment:
    """Exact minimum-cost matching between two same-size clouds.

    Cost is the Euclidean distance matrix. Sizes above max_exact are
    rejected rather than left to cubic runtime.
    """
    p = _positions_of(predicted)
    q = _positions_of(target)
    if p.shape[0] != q.shape[0]:
        raise InvalidArgumentError(
            f"assignment needs equal sizes, got {p.shape[0]} and {q.shape[0]}")
    if p.shape[0] == 0:
        raise InvalidArgumentError("assignment needs non-empty clouds")
    if p.shape[0] > max_exact:
        raise InvalidArgumentError(
            f"{p.shape[0]} points exceeds the exact-assignment cap {max_exact}")
    cost = cdist(p, q)
    rows, cols = linear_sum_assignment(cost)
    return Assignment(cols, float(cost[rows, cols].sum()))


def emd_loss(predicted, target) -> ad.DiffArray:
    """Mean matched distance under the optimal assignment.

    Differentiable in `predicted`; the assignment itself is held fixed
    during backward.
    """
    pred = predicted if isinstance(predicted, ad.DiffArray) else ad.DiffArray(
        _positions_of(predicted))
    target_pos = _positions_of(target)
    assignment = emd_assignment(pred.values, target_pos)
    matched = target_pos[assignment.permutation]
    diff = pred - matched
    distances = ad.sqrt(ad.sum_along(diff * diff, axis=1))
    return ad.mean_all(distances)


def rn_loss(predicted_normals, target_normals) -> ad.DiffArray:
    """Sign-invariant squared normal error, summed over points:
    sum_i min(||n_gt - n||^2, ||n_gt + n||^2). Ties take the minus branch.
    """
    pred = predicted_normals if isinstance(predicted_normals, ad.DiffArray) \
        else ad.DiffArray(np.asarray(predicted_normals, dtype=np.float64))
    target = np.asarray(target_normals, dtype=np.float64)
    if pred.values.shape != target.shape or pred.values.ndim != 2 \
            or pred.values.shape[1] != 3:
        raise InvalidArgumentError(
            f"normal arrays must share an (N, 3) shape, got "
            f"{pred.values.shape} and {target.shape}")
    minus = ad.sum_along((pred - target) * (pred - target), axis=1)
    plus = ad.sum_along((pred + target) * (pred + target), axis=1)
    return ad.sum_along(ad.minimum(minus, plus))


def total_loss(emd, vn, rn, weights: LossWeights):
    """alpha * emd + (1 - alpha) * vn + beta * rn.

    Works on floats and DiffArrays alike; mixing kinds promotes to
    DiffArray.
    """
    return weights.alpha * emd + (1.0 - weights.alpha) * vn + weights.beta * rn


def chamfer_distance(a, b) -> float:
    """Symmetric mean squared nearest-neighbor distance:
    0.5 * (mean_a min_b ||.||^2 + mean_b min_a ||.||^2).
    """
    pa = _positions_of(a)
    pb = _positions_of(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise InvalidArgumentError("chamfer distance needs non-empty clouds")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(0.5 * (np.mean(d_ab ** 2) + np.mean(d_ba ** 2)))


def mse_to_reference(cloud, reference) -> float:
    """Mean squared distance from each cloud point to its nearest
    reference point (one-directional)."""
    p = _positions_of(cloud)
    r = _positions_of(reference)
    if p.shape[0] == 0 or r.shape[0] == 0:
        raise InvalidArgumentError("mse needs non-empty clouds")
    return float(np.mean(cKDTree(r).query(p)[0] ** 2))


def diagonal_normalized(cloud, reference) -> tuple[np.ndarray, np.ndarray]:
    """Scale both clouds by the reference's bbox diagonal, for metric
    comparability across model sizes."""
    p = _positions_of(cloud)
    r = _positions_of(reference)
    extent = r.max(axis=0) - r.min(axis=0)
    diagonal = float(np.linalg.norm(extent))
    if diagonal <= 0.0:
        raise InvalidArgumentError("reference cloud has a zero bounding box")
    return p / diagonal, r / diagonal
