"""Virtual normals: randomly sampled well-conditioned triangles.

A virtual normal is the unit normal of a triangle formed by three
distinct point indices. A triangle qualifies when every interior angle
lies in [45, 90] degrees and every edge is at least the edge threshold
long; both constraints reject slivers whose normals are numerically
unstable. Index triples sampled on a clean cloud transfer to the
index-aligned predicted cloud, so the same triple yields comparable
normals on both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cloud import Normal, PointCloud
from .errors import (DegenerateInputError, InvalidArgumentError,
                     SamplingExhaustedError)

_ANGLE_LOW = np.pi / 4.0
_ANGLE_HIGH = np.pi / 2.0
# Angles are reconstructed through arccos; boundary cases land within
# float error of the limits, so the inclusive check carries a tolerance.
_ANGLE_TOL = 1e-9
_SAMPLE_CHUNK = 512


@dataclass(frozen=True)
class TriangleSample:
    """Three distinct point indices; order fixes the normal's sign."""

    indices: tuple[int, int, int]

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        if len(indices) != 3 or len(set(indices)) != 3:
            raise InvalidArgumentError(f"indices must be 3 distinct ints, got {self.indices}")
        if min(indices) < 0:
            raise InvalidArgumentError(f"indices must be non-negative, got {indices}")
        object.__setattr__(self, "indices", indices)


@dataclass(frozen=True)
class VnSampleSet:
    """The triangles drawn for one cloud, plus how they were drawn."""

    samples: tuple[TriangleSample, ...]
    edge_threshold: float
    rng_seed: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def indices_array(self) -> np.ndarray:
        return np.array([s.indices for s in self.samples], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "edge_threshold": self.edge_threshold,
            "rng_seed": self.rng_seed,
            "triangles": [list(s.indices) for s in self.samples],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VnSampleSet":
        return cls(
            samples=tuple(TriangleSample(tuple(t)) for t in doc["triangles"]),
            edge_threshold=float(doc["edge_threshold"]),
            rng_seed=int(doc["rng_seed"]),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")
        return path


def _triangle_valid_mask(positions: np.ndarray, triples: np.ndarray,
                         edge_threshold: float) -> np.ndarray:
    """Vectorized validity test for (M, 3) index triples."""
    pa = positions[triples[:, 0]]
    pb = positions[triples[:, 1]]
    pc = positions[triples[:, 2]]
    ab = pb - pa
    bc = pc - pb
    ca = pa - pc
    lab = np.linalg.norm(ab, axis=1)
    lbc = np.linalg.norm(bc, axis=1)
    lca = np.linalg.norm(ca, axis=1)
    ok = (lab >= edge_threshold) & (lbc >= edge_threshold) & (lca >= edge_threshold)
    ok &= (lab > 0.0) & (lbc > 0.0) & (lca > 0.0)
    if not ok.any():
        return ok
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_a = np.einsum("md,md->m", ab, -ca) / (lab * lca)
        cos_b = np.einsum("md,md->m", -ab, bc) / (lab * lbc)
        cos_c = np.einsum("md,md->m", ca, -bc) / (lca * lbc)
    for cosine in (cos_a, cos_b, cos_c):
        angle = np.arccos(np.clip(cosine, -1.0, 1.0))
        ok &= (angle >= _ANGLE_LOW - _ANGLE_TOL) & (angle <= _ANGLE_HIGH + _ANGLE_TOL)
    return ok


def triangle_is_valid(a, b, c, edge_threshold: float) -> bool:
    """Whether triangle (a, b, c) meets the angle and edge constraints.

    Angles must lie in [45, 90] degrees inclusive and every edge must be
    at least edge_threshold long. Degenerate (collinear or coincident)
    triangles are invalid.
    """
    points = np.asarray([a, b, c], dtype=np.float64)
    if points.shape != (3, 3):
        raise InvalidArgumentError("triangle vertices must be 3-vectors")
    if edge_threshold < 0.0:
        raise InvalidArgumentError("edge_threshold must be non-negative")
    triples = np.array([[0, 1, 2]], dtype=np.int64)
    return bool(_triangle_valid_mask(points, triples, edge_threshold)[0])


def sample_vn_set(cloud: PointCloud, count: int, edge_threshold: float,
                  rng_seed: int, max_attempts: int | None = None) -> VnSampleSet:
    """Draw `count` valid triangles by seeded rejection sampling.

    Triples are drawn uniformly over index combinations and kept when
    they pass triangle_is_valid on this cloud. Identical arguments give
    identical sets. Raises SamplingExhaustedError, reporting the
    acceptance rate, if max_attempts (default 1000 * count) triples are
    drawn before `count` valid ones appear.
    """
    n = len(cloud)
    if n < 3:
        raise InvalidArgumentError(f"need at least 3 points to form triangles, got {n}")
    if count < 1:
        raise InvalidArgumentError(f"count must be positive, got {count}")
    if edge_threshold < 0.0:
        raise InvalidArgumentError("edge_threshold must be non-negative")
    if max_attempts is None:
        max_attempts = 1000 * count
    rng = np.random.default_rng(rng_seed)
    positions = cloud.positions
    accepted: list[tuple[int, int, int]] = []
    attempts = 0
    while len(accepted) < count and attempts < max_attempts:
        chunk = min(_SAMPLE_CHUNK, max_attempts - attempts)
        triples = rng.integers(0, n, size=(chunk, 3))
        attempts += chunk
        distinct = ((triples[:, 0] != triples[:, 1])
                    & (triples[:, 0] != triples[:, 2])
                    & (triples[:, 1] != triples[:, 2]))
        triples = triples[distinct]
        if triples.size == 0:
            continue
        valid = _triangle_valid_mask(positions, triples, edge_threshold)
        for row in triples[valid]:
            accepted.append((int(row[0]), int(row[1]), int(row[2])))
            if len(accepted) == count:
                break
    if len(accepted) < count:
        rate = len(accepted) / max(attempts, 1)
        raise SamplingExhaustedError(
            f"only {len(accepted)}/{count} valid triangles after {attempts} "
            f"attempts (acceptance rate {rate:.2%}); relax edge_threshold "
            f"or reduce count")
    samples = tuple(TriangleSample(t) for t in accepted)
    return VnSampleSet(samples=samples, edge_threshold=edge_threshold, rng_seed=rng_seed)


def _positions_of(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.positions
    return np.asarray(cloud, dtype=np.float64)


def virtual_normal(cloud, sample: TriangleSample) -> Normal:
    """Unit normal of one sampled triangle, signed by index order."""
    positions = _positions_of(cloud)
    i, j, k = sample.indices
    if max(i, j, k) >= len(positions):
        raise InvalidArgumentError(
            f"triangle {sample.indices} out of range for {len(positions)} points")
    cross = np.cross(positions[j] - positions[i], positions[k] - positions[i])
    norm = float(np.linalg.norm(cross))
    if norm == 0.0:
        raise DegenerateInputError(
            f"triangle {sample.indices} is degenerate (zero-area)")
    return Normal(cross / norm, oriented=True)


def vn_loss(predicted, clean, sample_set: VnSampleSet) -> ad.DiffArray:
    """Mean distance between predicted and clean virtual normals:
    (1/N) sum_t ||n_pred(t) - n_clean(t)||_2.

    `predicted` may be a DiffArray for gradient flow; `clean` supplies
    the target normals. Both clouds must be index-aligned and at least as
    long as the largest sampled index. Predicted normals pass through an
    eps-guarded normalization, so near-degenerate predicted triangles
    yield finite values and gradients.
    """
    pred = predicted if isinstance(predicted, ad.DiffArray) else ad.DiffArray(_positions_of(predicted))
    clean_pos = _positions_of(clean)
    if pred.values.ndim != 2 or pred.values.shape[1] != 3:
        raise InvalidArgumentError(f"predicted must be (N, 3), got {pred.values.shape}")
    if pred.values.shape[0] != clean_pos.shape[0]:
        raise InvalidArgumentError(
            f"predicted has {pred.values.shape[0]} points, clean has {clean_pos.shape[0]}")
    if len(sample_set) == 0:
        raise InvalidArgumentError("sample set is empty")
    triples = sample_set.indices_array()
    if triples.max() >= clean_pos.shape[0]:
        raise InvalidArgumentError("sample set indexes past the end of the clouds")

    gt_cross = np.cross(clean_pos[triples[:, 1]] - clean_pos[triples[:, 0]],
                        clean_pos[triples[:, 2]] - clean_pos[triples[:, 0]])
    gt_norms = np.linalg.norm(gt_cross, axis=1, keepdims=True)
    if (gt_norms == 0.0).any():
        raise DegenerateInputError("sample set contains a zero-area clean triangle")
    gt_normals = gt_cross / gt_norms

    pa = ad.gather_rows(pred, triples[:, 0])
    pb = ad.gather_rows(pred, triples[:, 1])
    pc = ad.gather_rows(pred, triples[:, 2])
    pred_normals = ad.normalize_rows(ad.cross_rows(pb - pa, pc - pa))
    diff = pred_normals - gt_normals
    distances = ad.sqrt(ad.sum_along(diff * diff, axis=1))
    return ad.mean_all(distances)
