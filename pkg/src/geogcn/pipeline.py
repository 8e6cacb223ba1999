"""Patch-based training, inference, evaluation, and the ablation harness.

Training draws fixed-size patches around seeds sampled uniformly
without replacement per model per epoch, shuffles all (model, seed)
jobs, and walks them in batches. Every patch is normalized to its seed
frame; losses are computed in that frame. Batches are evaluated in
micro groups of patches stacked into one block-diagonal graph so the
networks see a single large input, which keeps the arithmetic in BLAS;
gradients accumulate across groups before one SGD step, so the split is
invisible to the result.

Inference covers the cloud with farthest-point-sampled patches, merges
overlapping predictions by plain averaging (sign-aligned averaging for
normals), and for the final stage runs the bilateral filter on the
merged cloud.

Stages: S1 trains the position network on the assignment loss alone,
S2 adds the virtual-normal loss, S3 adds the normal network, its
real-normal loss, and the final filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .bilateral import FilterConfig, final_denoise
from .cloud import PointCloud, Patch, extract_patch, pca_directions
from .errors import (CoverageError, InvalidArgumentError,
                     InvalidManifestError, TrainingDivergenceError)
from .io import read_cloud, write_cloud
from .losses import (LossWeights, chamfer_distance, diagonal_normalized,
                     emd_loss, mse_to_reference, rn_loss, total_loss)
from .network import (NetworkParams, forward_ngcn, forward_sgcn,
                      load_checkpoint, lr_schedule, save_checkpoint, sgd_step)
from .shapes import SHARP_KINDS, load_manifest
from .vnormal import sample_vn_set, vn_loss

_TREE_THRESHOLD = 1000


class AblationStage(str, Enum):
    S1 = "s1"
    S2 = "s2"
    S3 = "s3"

    @classmethod
    def parse(cls, text: str) -> "AblationStage":
        try:
            return cls(text.lower())
        except ValueError:
            raise InvalidArgumentError(
                f"unknown stage {text!r}; choose from s1, s2, s3") from None


TRAIN_MODES = ("joint", "sequential")


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline; defaults are the desk-scale protocol.

    edge_threshold, when set, is an absolute length used for every
    virtual-normal sampling; when None, each patch uses
    edge_threshold_factor times its clean bounding-box diagonal.
    micro_batch only groups patch forwards for speed; it never changes
    results. train_mode "joint" lets the real-normal loss reach the
    position network through the denoised coordinates; "sequential"
    stops that gradient (the PCA step is non-differentiable either way).
    """

    patch_size: int = 128
    patches_per_model: int = 256
    batch_size: int = 64
    epochs: int = 10
    alpha: float = 0.9
    beta: float = 0.1
    vn_count: int = 100
    edge_threshold: float | None = None
    edge_threshold_factor: float = 0.1
    graph_k: int = 10
    pca_k: int = 16
    momentum: float = 0.9
    rng_seed: int = 0
    train_mode: str = "joint"
    micro_batch: int = 16
    eval_scale: float = 0.005
    filter: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        for name in ("patch_size", "patches_per_model", "batch_size", "epochs",
                     "vn_count", "graph_k", "pca_k", "micro_batch"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive int, got {value}")
        LossWeights(self.alpha, self.beta)
        if self.edge_threshold is not None and not self.edge_threshold > 0.0:
            raise InvalidArgumentError(
                f"edge_threshold must be positive, got {self.edge_threshold}")
        if not self.edge_threshold_factor > 0.0:
            raise InvalidArgumentError("edge_threshold_factor must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.train_mode not in TRAIN_MODES:
            raise InvalidArgumentError(
                f"train_mode must be one of {TRAIN_MODES}, got {self.train_mode!r}")
        if self.graph_k >= self.patch_size or self.pca_k >= self.patch_size:
            raise InvalidArgumentError(
                "graph_k and pca_k must be smaller than patch_size")
        if not self.eval_scale > 0.0:
            raise InvalidArgumentError("eval_scale must be positive")

    def weights_for(self, stage: AblationStage) -> LossWeights:
        if stage is AblationStage.S1:
            return LossWeights(1.0, 0.0)
        if stage is AblationStage.S2:
            return LossWeights(self.alpha, 0.0)
        return LossWeights(self.alpha, self.beta)

    def to_json(self) -> dict:
        doc = {name: getattr(self, name) for name in (
            "patch_size", "patches_per_model", "batch_size", "epochs",
            "alpha", "beta", "vn_count", "edge_threshold",
            "edge_threshold_factor", "graph_k", "pca_k", "momentum",
            "rng_seed", "train_mode", "micro_batch", "eval_scale")}
        doc["filter"] = self.filter.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        if "filter" in kwargs:
            kwargs["filter"] = FilterConfig.from_json(kwargs["filter"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgumentError(f"{path}: cannot read config ({exc})") from None
        if not isinstance(doc, dict):
            raise InvalidArgumentError(f"{path}: config must be a JSON object")
        return cls.from_json(doc)


@dataclass
class _Model:
    """One manifest entry loaded for training."""

    noisy: PointCloud
    clean: PointCloud
    tree: cKDTree | None


def _load_models(manifest_path) -> list[_Model]:
    models = []
    for entry in load_manifest(manifest_path):
        clean = read_cloud(entry.clean_path)
        noisy = read_cloud(entry.noisy_path)
        if clean.normals is None:
            raise InvalidManifestError(
                f"{entry.clean_path}: clean cloud has no normals")
        if len(clean) != len(noisy):
            raise InvalidManifestError(
                f"{entry.noisy_path}: not index-aligned with {entry.clean_path} "
                f"({len(noisy)} vs {len(clean)} points)")
        tree = cKDTree(noisy.positions) if len(noisy) > _TREE_THRESHOLD else None
        models.append(_Model(noisy=noisy, clean=clean, tree=tree))
    return models


@dataclass
class _TrainItem:
    """One patch of one model, in its normalized seed frame."""

    noisy_local: np.ndarray
    clean_local: np.ndarray
    gt_normals: np.ndarray
    vn_seed: int


def _prepare_item(model: _Model, seed_index: int, config: PipelineConfig,
                  vn_seed: int) -> _TrainItem:
    patch = extract_patch(model.noisy, seed_index, config.patch_size, model.tree)
    noisy_local = patch.normalized_positions(model.noisy)
    clean_local = (model.clean.positions[patch.member_indices]
                   - patch.centroid_offset) / patch.scale
    return _TrainItem(
        noisy_local=noisy_local,
        clean_local=clean_local,
        gt_normals=model.clean.normals[patch.member_indices],
        vn_seed=vn_seed,
    )


def _block_sorted_neighbors(points: np.ndarray, k: int) -> np.ndarray:
    """Per-patch kNN inside an (m, p, 3) stack, as global (m*p, k) indices.

    Each patch is its own block; ties resolve by lower local index,
    matching build_knn_graph's ordering.
    """
    m, p, _ = points.shape
    deltas = points[:, :, None, :] - points[:, None, :, :]
    dist2 = np.einsum("mijd,mijd->mij", deltas, deltas)
    diag = np.arange(p)
    dist2[:, diag, diag] = np.inf
    order = np.argsort(dist2, axis=2, kind="stable")[:, :, :k]
    offsets = (np.arange(m) * p)[:, None, None]
    return (order + offsets).reshape(m * p, k)


def _initial_normals(flat_positions: np.ndarray, neighbor_indices: np.ndarray) -> np.ndarray:
    neighborhoods = np.concatenate(
        [flat_positions[:, None, :], flat_positions[neighbor_indices]], axis=1)
    return pca_directions(neighborhoods)


def _stack_forward(params: NetworkParams, stacked: np.ndarray,
                   config: PipelineConfig, use_ngcn: bool, joint: bool) -> dict:
    """Both networks over an (m, p, 3) stack of normalized patches.

    Returns DiffArrays keyed "denoised" and, when use_ngcn, "fine_normals"
    plus the constant "initial_normals", all flattened to (m*p, ...).
    """
    m, p, _ = stacked.shape
    flat = stacked.reshape(m * p, 3)
    sgcn_nbr = _block_sorted_neighbors(stacked, config.graph_k)
    sgcn_plan = ad.ScatterPlan(m * p, sgcn_nbr)
    denoised = forward_sgcn(params, flat, sgcn_nbr, sgcn_plan)
    out = {"denoised": denoised}
    if use_ngcn:
        moved = denoised.values.reshape(m, p, 3)
        wide = _block_sorted_neighbors(moved, max(config.graph_k, config.pca_k))
        initial = _initial_normals(denoised.values, wide[:, :config.pca_k])
        ngcn_nbr = wide[:, :config.graph_k]
        ngcn_plan = ad.ScatterPlan(m * p, ngcn_nbr)
        positions_in = denoised if joint else ad.detach(denoised)
        features = ad.concat([positions_in, ad.DiffArray(initial)], axis=1)
        out["initial_normals"] = initial
        out["fine_normals"] = forward_ngcn(params, features, ngcn_nbr, ngcn_plan)
    return out


def _item_threshold(item: _TrainItem, config: PipelineConfig) -> float:
    if config.edge_threshold is not None:
        return config.edge_threshold
    extent = item.clean_local.max(axis=0) - item.clean_local.min(axis=0)
    return config.edge_threshold_factor * float(np.linalg.norm(extent))


def _train_chunk(params: NetworkParams, items: list[_TrainItem],
                 config: PipelineConfig, stage: AblationStage,
                 collect_vn: list | None):
    """Forward one micro group; returns (sum-of-losses DiffArray, stats)."""
    p = config.patch_size
    stacked = np.stack([item.noisy_local for item in items])
    use_vn = stage is not AblationStage.S1
    use_ngcn = stage is AblationStage.S3
    weights = config.weights_for(stage)
    forwarded = _stack_forward(params, stacked, config,
                               use_ngcn=use_ngcn,
                               joint=config.train_mode == "joint")
    denoised = forwarded["denoised"]
    chunk_sum = None
    stats = []
    for i, item in enumerate(items):
        predicted = ad.slice_rows(denoised, i * p, (i + 1) * p)
        emd_i = emd_loss(predicted, item.clean_local)
        vn_i: ad.DiffArray | float = 0.0
        rn_i: ad.DiffArray | float = 0.0
        if use_vn:
            vn_set = sample_vn_set(
                PointCloud(item.clean_local), config.vn_count,
                _item_threshold(item, config), item.vn_seed)
            if collect_vn is not None:
                collect_vn.append(vn_set)
            vn_i = vn_loss(predicted, item.clean_local, vn_set)
        if use_ngcn:
            fine = ad.slice_rows(forwarded["fine_normals"], i * p, (i + 1) * p)
            rn_i = rn_loss(fine, item.gt_normals)
        total_i = total_loss(emd_i, vn_i, rn_i, weights)
        chunk_sum = total_i if chunk_sum is None else chunk_sum + total_i
        stats.append({
            "emd": float(emd_i.values),
            "vn": float(vn_i.values) if isinstance(vn_i, ad.DiffArray) else vn_i,
            "rn": float(rn_i.values) if isinstance(rn_i, ad.DiffArray) else rn_i,
            "total": float(total_i.values),
        })
    return chunk_sum, stats


def train(manifest_path, config: PipelineConfig, out_checkpoint,
          stage: AblationStage = AblationStage.S3,
          dump_vn_path=None) -> dict:
    """Train both networks on a manifest and write checkpoint + report.

    The report (returned, and written next to the checkpoint as
    *.report.json) carries per-epoch, per-batch means of each loss
    component. Identical (manifest, config, stage) runs produce
    identical checkpoints. dump_vn_path, when given, receives the
    virtual-normal sample sets of the first batch as JSON.
    """
    models = _load_models(manifest_path)
    smallest = min(len(m.noisy) for m in models)
    if config.patch_size > smallest:
        raise InvalidArgumentError(
            f"patch_size {config.patch_size} exceeds the smallest model ({smallest})")
    if config.patches_per_model > smallest:
        raise InvalidArgumentError(
            f"patches_per_model {config.patches_per_model} exceeds the smallest "
            f"model ({smallest}); seeds are drawn without replacement")
    params = NetworkParams.initialize(config.rng_seed)
    epochs_log = []
    vn_dump: list | None = [] if dump_vn_path is not None else None
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.rng_seed, 7919, epoch])
        jobs = []
        for model_index, model in enumerate(models):
            seeds = rng.choice(len(model.noisy), size=config.patches_per_model,
                               replace=False)
            jobs.extend((model_index, int(s)) for s in seeds)
        jobs = np.asarray(jobs, dtype=np.int64)
        rng.shuffle(jobs, axis=0)
        lr = lr_schedule(epoch, config.epochs)
        batch_logs = []
        for start in range(0, len(jobs), config.batch_size):
            rows = jobs[start:start + config.batch_size]
            items = [
                _prepare_item(models[mi], si, config,
                              vn_seed=int(rng.integers(0, 2 ** 31)))
                for mi, si in rows
            ]
            batch_stats = []
            want_vn = vn_dump is not None and epoch == 0 and start == 0
            for lo in range(0, len(items), config.micro_batch):
                chunk = items[lo:lo + config.micro_batch]
                chunk_sum, stats = _train_chunk(
                    params, chunk, config, stage,
                    collect_vn=vn_dump if want_vn else None)
                batch_stats.extend(stats)
                scaled = chunk_sum * (1.0 / len(items))
                if not math.isfinite(float(scaled.values)):
                    raise TrainingDivergenceError(
                        f"non-finite loss at epoch {epoch}, "
                        f"batch {start // config.batch_size}")
                scaled.backward()
            sgd_step(params, lr, config.momentum)
            batch_logs.append({
                key: float(np.mean([s[key] for s in batch_stats]))
                for key in ("emd", "vn", "rn", "total")
            })
        epochs_log.append({
            "epoch": epoch,
            "lr": lr,
            "batches": batch_logs,
            "mean_total": float(np.mean([b["total"] for b in batch_logs])),
        })
    params.epoch = config.epochs
    out_checkpoint = Path(out_checkpoint)
    save_checkpoint(params, out_checkpoint)
    report = {
        "stage": stage.value,
        "train_mode": config.train_mode,
        "models": len(models),
        "epochs": epochs_log,
        "checkpoint": out_checkpoint.name,
        "config": config.to_json(),
    }
    out_checkpoint.with_suffix(".report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")
    if dump_vn_path is not None:
        Path(dump_vn_path).write_text(json.dumps(
            {"epoch": 0, "batch": 0, "sets": [s.to_json() for s in vn_dump]},
            sort_keys=True, indent=2) + "\n")
    return report


def _fps_patches(cloud: PointCloud, patch_size: int,
                 tree: cKDTree | None) -> list[Patch]:
    """Farthest-point seeds, extracting patches until every point is covered."""
    n = len(cloud)
    positions = cloud.positions
    centroid = positions.mean(axis=0)
    seed = int(np.argmax(np.linalg.norm(positions - centroid, axis=1)))
    covered = np.zeros(n, dtype=bool)
    min_dist = np.full(n, np.inf)
    patches: list[Patch] = []
    for _ in range(n):
        patch = extract_patch(cloud, seed, patch_size, tree)
        patches.append(patch)
        covered[patch.member_indices] = True
        if covered.all():
            return patches
        min_dist = np.minimum(
            min_dist, np.linalg.norm(positions - positions[seed], axis=1))
        candidate = int(np.argmax(min_dist))
        if min_dist[candidate] <= 0.0:
            # Duplicates of existing seeds: fall back to any uncovered point.
            candidate = int(np.flatnonzero(~covered)[0])
        seed = candidate
    raise CoverageError(f"failed to cover {int((~covered).sum())} of {n} points")


def denoise_cloud(noisy: PointCloud, params: NetworkParams,
                  config: PipelineConfig,
                  stage: AblationStage = AblationStage.S3) -> tuple[PointCloud, dict]:
    """Denoise one cloud in memory; returns (cloud, coverage report).

    Stages S1/S2 return merged position predictions only. S3 also merges
    the fine normals and runs the bilateral filter; its output carries
    normals.
    """
    n = len(noisy)
    if config.patch_size > n:
        raise InvalidArgumentError(
            f"patch_size {config.patch_size} exceeds the cloud ({n} points)")
    use_ngcn = stage is AblationStage.S3
    tree = cKDTree(noisy.positions) if n > _TREE_THRESHOLD else None
    patches = _fps_patches(noisy, config.patch_size, tree)
    # Accumulating world-frame displacements (not absolute positions)
    # keeps a zero-displacement network an exact identity.
    displacement_sum = np.zeros((n, 3))
    weight = np.zeros(n)
    normal_sum = np.zeros((n, 3))
    p = config.patch_size
    for lo in range(0, len(patches), config.micro_batch):
        group = patches[lo:lo + config.micro_batch]
        stacked = np.stack([pt.normalized_positions(noisy) for pt in group])
        forwarded = _stack_forward(params, stacked, config,
                                   use_ngcn=use_ngcn, joint=False)
        moved = forwarded["denoised"].values.reshape(len(group), p, 3)
        fine = (forwarded["fine_normals"].values.reshape(len(group), p, 3)
                if use_ngcn else None)
        for gi, patch in enumerate(group):
            members = patch.member_indices
            displacement_sum[members] += (moved[gi] - stacked[gi]) * patch.scale
            weight[members] += 1.0
            if fine is not None:
                # Normals are sign-free: align each contribution with the
                # running per-point sum before accumulating.
                contribution = fine[gi].copy()
                flip = np.einsum(
                    "kd,kd->k", normal_sum[members], contribution) < 0.0
                contribution[flip] = -contribution[flip]
                normal_sum[members] += contribution
    if not (weight > 0.0).all():
        raise CoverageError(f"{int((weight == 0).sum())} points left uncovered")
    merged_positions = noisy.positions + displacement_sum / weight[:, None]
    report = {
        "stage": stage.value,
        "n_points": n,
        "n_patches": len(patches),
        "coverage_min": int(weight.min()),
        "coverage_max": int(weight.max()),
    }
    if not use_ngcn:
        return PointCloud(merged_positions, name=noisy.name), report
    lengths = np.linalg.norm(normal_sum, axis=1, keepdims=True)
    merged_normals = normal_sum / np.maximum(lengths, 1e-300)
    merged = PointCloud(merged_positions, merged_normals, name=noisy.name)
    filtered = final_denoise(merged, config.filter)
    report["filter_iterations"] = config.filter.iterations
    return filtered, report


def denoise(cloud_path, checkpoint_path, config: PipelineConfig,
            stage: AblationStage, out_path) -> tuple[PointCloud, dict]:
    """File-level denoise: read, process, write; returns (cloud, report)."""
    noisy = read_cloud(cloud_path)
    params = load_checkpoint(checkpoint_path)
    cloud, report = denoise_cloud(noisy, params, config, stage)
    write_cloud(cloud, out_path)
    report["input"] = str(cloud_path)
    report["output"] = str(out_path)
    return cloud, report


def evaluate_clouds(denoised: PointCloud, clean: PointCloud) -> dict:
    """CD and MSE with both clouds scaled by the clean bbox diagonal."""
    scaled_d, scaled_c = diagonal_normalized(denoised.positions, clean.positions)
    return {
        "cd": chamfer_distance(scaled_d, scaled_c),
        "mse": mse_to_reference(scaled_d, scaled_c),
    }


def evaluate(denoised_path, clean_path) -> dict:
    record = evaluate_clouds(read_cloud(denoised_path), read_cloud(clean_path))
    record["denoised"] = str(denoised_path)
    record["clean"] = str(clean_path)
    return record


def _group_of(kind: str) -> str:
    return "cad" if kind in SHARP_KINDS else "non-cad"


def ablate(manifest_path, config: PipelineConfig, out_report,
           eval_manifest=None) -> dict:
    """Train S1, S2, S3 with one shared seed and tabulate per-split MSE/CD.

    Rows are input, s1, s2, s3; columns split sharp ("cad") versus
    smooth ("non-cad") shapes. Evaluation uses the manifest entries at
    config.eval_scale (from eval_manifest when given, else the training
    manifest). Writes JSON to out_report and a markdown table next to
    it; per-stage checkpoints land beside the report.
    """
    out_report = Path(out_report)
    entries = load_manifest(eval_manifest if eval_manifest else manifest_path)
    eval_entries = [e for e in entries
                    if abs(e.noise_scale - config.eval_scale) < 1e-12]
    if not eval_entries:
        raise InvalidArgumentError(
            f"no manifest entries at eval scale {config.eval_scale:g}")
    loaded = [(e, read_cloud(e.noisy_path), read_cloud(e.clean_path))
              for e in eval_entries]
    groups = {g: [i for i, (e, _, _) in enumerate(loaded)
                  if _group_of(e.kind) == g] for g in ("cad", "non-cad")}
    if not all(groups.values()):
        raise InvalidArgumentError(
            "evaluation needs both sharp and smooth shapes; got only "
            + ", ".join(g for g, rows in groups.items() if rows))

    def group_means(records: list[dict]) -> dict:
        return {g: {key: float(np.mean([records[i][key] for i in rows]))
                    for key in ("mse", "cd")}
                for g, rows in groups.items()}

    rows = {"input": group_means(
        [evaluate_clouds(noisy, clean) for _, noisy, clean in loaded])}
    out_report.parent.mkdir(parents=True, exist_ok=True)
    for stage in AblationStage:
        ckpt = out_report.with_name(f"{out_report.stem}_{stage.value}.ckpt.json")
        train(manifest_path, config, ckpt, stage=stage)
        params = load_checkpoint(ckpt)
        records = []
        for _, noisy, clean in loaded:
            cloud, _ = denoise_cloud(noisy, params, config, stage)
            records.append(evaluate_clouds(cloud, clean))
        rows[stage.value] = group_means(records)
    report = {
        "rows": rows,
        "eval_scale": config.eval_scale,
        "eval_entries": len(loaded),
        "config": config.to_json(),
    }
    out_report.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    lines = ["| stage | cad mse | non-cad mse | cad cd | non-cad cd |",
             "|---|---|---|---|---|"]
    for name in ("input", "s1", "s2", "s3"):
        row = rows[name]
        lines.append(
            f"| {name} | {row['cad']['mse']:.3e} | {row['non-cad']['mse']:.3e} "
            f"| {row['cad']['cd']:.3e} | {row['non-cad']['cd']:.3e} |")
    out_report.with_suffix(".md").write_text("\n".join(lines) + "\n")
    return report
