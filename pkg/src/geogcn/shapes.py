"""Synthetic shape sampling, noise corruption, and dataset manifests.

Every generator samples uniformly by surface area and attaches the
exact analytic normal at each sample. Corruption adds isotropic
Gaussian noise whose standard deviation is noise_scale times the clean
bounding-box diagonal; clean and noisy clouds correspond row by row.
Rebuilding a manifest with the same arguments reproduces every file
byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import InvalidArgumentError, InvalidManifestError
from .io import write_cloud

SHAPE_KINDS = ("sphere", "torus", "cylinder", "cube", "plane-with-ridge")
# Shapes with sharp creases; the complement is the smooth split.
SHARP_KINDS = frozenset({"cylinder", "cube", "plane-with-ridge"})
MAX_NOISE_SCALE = 0.05

_DEFAULT_PARAMS = {
    "sphere": {"radius": 1.0},
    "torus": {"major_radius": 1.0, "minor_radius": 0.3},
    "cylinder": {"radius": 0.6, "height": 1.6},
    "cube": {"edge": 2.0},
    "plane-with-ridge": {"size": 2.0, "ridge_width": 0.5, "ridge_height": 0.5},
}


@dataclass(frozen=True)
class ShapeSpec:
    """What to sample: a shape kind, its dimensions, a size, and a seed."""

    kind: str
    n_points: int
    rng_seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InvalidArgumentError(
                f"unknown shape kind {self.kind!r}; choose from {SHAPE_KINDS}")
        if self.n_points < 100:
            raise InvalidArgumentError(
                f"n_points must be at least 100, got {self.n_points}")
        merged = dict(_DEFAULT_PARAMS[self.kind])
        for key, value in self.params.items():
            if key not in merged:
                raise InvalidArgumentError(
                    f"{self.kind} has no parameter {key!r}")
            if not (np.isfinite(value) and value > 0.0):
                raise InvalidArgumentError(
                    f"{self.kind}.{key} must be positive, got {value}")
            merged[key] = float(value)
        object.__setattr__(self, "params", merged)

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.rng_seed}"


@dataclass(frozen=True)
class NoisySample:
    """A clean cloud and its index-aligned noisy corruption."""

    clean: PointCloud
    noisy: PointCloud
    noise_scale: float
    rng_seed: int

    def __post_init__(self):
        if len(self.clean) != len(self.noisy):
            raise InvalidArgumentError("clean and noisy clouds must be index-aligned")


def _sample_sphere(rng, n, params):
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return params["radius"] * directions, directions


def _sample_torus(rng, n, params):
    big, small = params["major_radius"], params["minor_radius"]
    if small >= big:
        raise InvalidArgumentError(
            f"torus needs minor_radius < major_radius, got {small} >= {big}")
    tube = np.empty(n)
    around = np.empty(n)
    have = 0
    # Area element scales with (R + r cos u): rejection keeps it uniform.
    while have < n:
        draw = max(n - have, 64)
        u = rng.uniform(0.0, 2.0 * np.pi, size=draw)
        v = rng.uniform(0.0, 2.0 * np.pi, size=draw)
        keep = rng.uniform(size=draw) < (big + small * np.cos(u)) / (big + small)
        took = min(int(keep.sum()), n - have)
        tube[have:have + took] = u[keep][:took]
        around[have:have + took] = v[keep][:took]
        have += took
    cos_u, sin_u = np.cos(tube), np.sin(tube)
    cos_v, sin_v = np.cos(around), np.sin(around)
    ring = big + small * cos_u
    positions = np.stack([ring * cos_v, ring * sin_v, small * sin_u], axis=1)
    normals = np.stack([cos_u * cos_v, cos_u * sin_v, sin_u], axis=1)
    return positions, normals


def _sample_cylinder(rng, n, params):
    radius, height = params["radius"], params["height"]
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius * radius
    total = side_area + 2.0 * cap_area
    faces = rng.uniform(0.0, total, size=n)
    positions = np.empty((n, 3))
    normals = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    on_side = faces < side_area
    z = rng.uniform(-0.5 * height, 0.5 * height, size=n)
    positions[on_side] = np.stack([radius * np.cos(theta[on_side]),
                                   radius * np.sin(theta[on_side]),
                                   z[on_side]], axis=1)
    normals[on_side] = np.stack([np.cos(theta[on_side]),
                                 np.sin(theta[on_side]),
                                 np.zeros(int(on_side.sum()))], axis=1)
    on_cap = ~on_side
    top = faces >= side_area + cap_area
    rad = radius * np.sqrt(rng.uniform(size=n))
    sign = np.where(top, 1.0, -1.0)
    positions[on_cap] = np.stack([rad[on_cap] * np.cos(theta[on_cap]),
                                  rad[on_cap] * np.sin(theta[on_cap]),
                                  sign[on_cap] * 0.5 * height], axis=1)
    normals[on_cap] = np.stack([np.zeros(int(on_cap.sum())),
                                np.zeros(int(on_cap.sum())),
                                sign[on_cap]], axis=1)
    return positions, normals


def _sample_cube(rng, n, params):
    edge = params["edge"]
    half = 0.5 * edge
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    positions = np.empty((n, 3))
    normals = np.zeros((n, 3))
    rows = np.arange(n)
    positions[rows, axis] = sign * half
    others = np.stack([(axis + 1) % 3, (axis + 2) % 3], axis=1)
    positions[rows[:, None], others] = uv
    normals[rows, axis] = sign
    return positions, normals


def _sample_ridge(rng, n, params):
    size, width, height = params["size"], params["ridge_width"], params["ridge_height"]
    if width >= size:
        raise InvalidArgumentError(
            f"ridge_width must be smaller than size, got {width} >= {size}")
    half, half_w = 0.5 * size, 0.5 * width
    strip = half - half_w
    # Flat plate with a raised rectangular ridge along y: two base strips,
    # two vertical walls, one plateau. Pick faces by area.
    areas = np.array([size * strip, size * strip,
                      size * height, size * height,
                      size * width])
    edges = np.cumsum(areas)
    pick = rng.uniform(0.0, edges[-1], size=n)
    face = np.searchsorted(edges, pick, side="right")
    y = rng.uniform(-half, half, size=n)
    t = rng.uniform(size=n)
    positions = np.empty((n, 3))
    normals = np.zeros((n, 3))
    for which in range(5):
        rows = face == which
        count = int(rows.sum())
        if count == 0:
            continue
        if which in (0, 1):
            x0 = half_w if which == 0 else -half
            positions[rows] = np.stack(
                [x0 + t[rows] * strip, y[rows], np.zeros(count)], axis=1)
            normals[rows, 2] = 1.0
        elif which in (2, 3):
            sign = 1.0 if which == 2 else -1.0
            positions[rows] = np.stack(
                [np.full(count, sign * half_w), y[rows], t[rows] * height], axis=1)
            normals[rows, 0] = sign
        else:
            positions[rows] = np.stack(
                [-half_w + t[rows] * width, y[rows], np.full(count, height)], axis=1)
            normals[rows, 2] = 1.0
    return positions, normals


_GENERATORS = {
    "sphere": _sample_sphere,
    "torus": _sample_torus,
    "cylinder": _sample_cylinder,
    "cube": _sample_cube,
    "plane-with-ridge": _sample_ridge,
}


def generate_shape(spec: ShapeSpec) -> PointCloud:
    """Sample spec.n_points surface points with exact normals."""
    rng = np.random.default_rng(spec.rng_seed)
    positions, normals = _GENERATORS[spec.kind](rng, spec.n_points, spec.params)
    return PointCloud(positions, normals, name=spec.name)


def corrupt(clean: PointCloud, noise_scale: float, rng_seed: int) -> NoisySample:
    """Add Gaussian noise with std = noise_scale * bbox diagonal.

    noise_scale must lie in (0, 0.05]; beyond that the surface is
    unrecoverable and the request is almost certainly a unit mistake.
    The noisy cloud keeps the clean cloud's point order and drops its
    normals.
    """
    if not (np.isfinite(noise_scale) and 0.0 < noise_scale <= MAX_NOISE_SCALE):
        raise InvalidArgumentError(
            f"noise_scale must be in (0, {MAX_NOISE_SCALE}], got {noise_scale}")
    std = noise_scale * clean.bbox_diagonal
    if std <= 0.0:
        raise InvalidArgumentError("clean cloud has a zero bounding box")
    rng = np.random.default_rng(rng_seed)
    noisy = clean.positions + rng.normal(0.0, std, size=clean.positions.shape)
    return NoisySample(
        clean=clean,
        noisy=PointCloud(noisy, name=f"{clean.name}-noisy"),
        noise_scale=noise_scale,
        rng_seed=rng_seed,
    )


def default_shape_specs(n_points: int = 5000, base_seed: int = 0,
                        variant: int = 0) -> list[ShapeSpec]:
    """The standard eight-shape training set: four smooth, four sharp.

    variant > 0 shifts every seed and rescales every dimension, giving
    held-out sets from the same families.
    """
    scale = 1.0 + 0.12 * variant
    seed = base_seed + 1000 * variant
    return [
        ShapeSpec("sphere", n_points, seed + 0, {"radius": 1.0 * scale}),
        ShapeSpec("sphere", n_points, seed + 1, {"radius": 0.7 * scale}),
        ShapeSpec("torus", n_points, seed + 2,
                  {"major_radius": 1.0 * scale, "minor_radius": 0.3 * scale}),
        ShapeSpec("torus", n_points, seed + 3,
                  {"major_radius": 0.8 * scale, "minor_radius": 0.35 * scale}),
        ShapeSpec("cube", n_points, seed + 4, {"edge": 2.0 * scale}),
        ShapeSpec("cube", n_points, seed + 5, {"edge": 1.4 * scale}),
        ShapeSpec("cylinder", n_points, seed + 6,
                  {"radius": 0.6 * scale, "height": 1.6 * scale}),
        ShapeSpec("plane-with-ridge", n_points, seed + 7,
                  {"size": 2.0 * scale, "ridge_width": 0.5 * scale,
                   "ridge_height": 0.5 * scale}),
    ]


@dataclass(frozen=True)
class ManifestEntry:
    """One (clean, noisy) pair of an on-disk dataset."""

    clean_path: Path
    noisy_path: Path
    noise_scale: float
    rng_seed: int
    kind: str


def _noise_seed(shape_seed: int, scale_index: int) -> int:
    return shape_seed * 1009 + 101 * scale_index + 17


def build_manifest(specs: list[ShapeSpec], noise_scales: list[float],
                   out_dir) -> Path:
    """Generate clouds and noisy variants on disk plus a JSON manifest.

    Every spec yields one clean .xyz (with normals) and one noisy .xyz
    per scale. Identical arguments reproduce identical bytes, manifest
    included. Returns the manifest path.
    """
    if not specs:
        raise InvalidArgumentError("need at least one shape spec")
    if not noise_scales:
        raise InvalidArgumentError("need at least one noise scale")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InvalidArgumentError(f"shape names collide: {sorted(names)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        clean = generate_shape(spec)
        clean_name = f"{spec.name}_clean.xyz"
        write_cloud(clean, out_dir / clean_name)
        for scale_index, scale in enumerate(noise_scales):
            seed = _noise_seed(spec.rng_seed, scale_index)
            sample = corrupt(clean, scale, seed)
            tag = f"{scale:g}".replace(".", "p")
            noisy_name = f"{spec.name}_noise_{tag}.xyz"
            write_cloud(sample.noisy, out_dir / noisy_name)
            entries.append({
                "clean": clean_name,
                "noisy": noisy_name,
                "scale": scale,
                "seed": seed,
                "kind": spec.kind,
            })
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path) -> list[ManifestEntry]:
    """Read and validate a manifest; paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidManifestError(f"{path}: cannot read manifest ({exc})") from None
    if not isinstance(doc, list) or not doc:
        raise InvalidManifestError(f"{path}: manifest must be a non-empty list")
    entries = []
    for i, row in enumerate(doc):
        try:
            entry = ManifestEntry(
                clean_path=path.parent / row["clean"],
                noisy_path=path.parent / row["noisy"],
                noise_scale=float(row["scale"]),
                rng_seed=int(row["seed"]),
                kind=str(row["kind"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidManifestError(f"{path}: entry {i} malformed ({exc})") from None
        if entry.kind not in SHAPE_KINDS:
            raise InvalidManifestError(
                f"{path}: entry {i} has unknown kind {entry.kind!r}")
        for file in (entry.clean_path, entry.noisy_path):
            if not file.is_file():
                raise InvalidManifestError(f"{path}: entry {i} references missing {file}")
        entries.append(entry)
    return entries
