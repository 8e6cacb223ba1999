"""Training loop, patch-based inference, evaluation, and ablation."""

import json

import numpy as np
import pytest

from geogcn import autodiff as ad
from geogcn import pipeline as pl
from geogcn.bilateral import FilterConfig
from geogcn.cloud import PointCloud
from geogcn.errors import (InvalidArgumentError, InvalidManifestError,
                           TrainingDivergenceError)
from geogcn.io import read_cloud, write_cloud
from geogcn.losses import LossWeights
from geogcn.network import NetworkParams, load_checkpoint, save_checkpoint
from geogcn.pipeline import (AblationStage, PipelineConfig, ablate,
                             denoise, denoise_cloud, evaluate, evaluate_clouds,
                             train)
from geogcn.shapes import ShapeSpec, build_manifest, corrupt, generate_shape
from geogcn.vnormal import VnSampleSet


def tiny_config(**over):
    base = dict(patch_size=32, patches_per_model=4, batch_size=4, epochs=2,
                vn_count=8, graph_k=6, pca_k=8, micro_batch=4, rng_seed=3)
    base.update(over)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    specs = [ShapeSpec("sphere", 200, 1), ShapeSpec("cube", 200, 2)]
    return build_manifest(specs, [0.005], tmp_path_factory.mktemp("data"))


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(patch_size=0)
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(epochs=2.5)
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(momentum=1.0)
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(train_mode="both")
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(graph_k=128, patch_size=128)
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(edge_threshold=0.0)
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(eval_scale=-0.01)


def test_config_stage_weights():
    config = tiny_config(alpha=0.7, beta=0.2)
    assert config.weights_for(AblationStage.S1) == LossWeights(1.0, 0.0)
    assert config.weights_for(AblationStage.S2) == LossWeights(0.7, 0.0)
    assert config.weights_for(AblationStage.S3) == LossWeights(0.7, 0.2)


def test_config_json_round_trip(tmp_path):
    config = tiny_config(edge_threshold=0.5, train_mode="sequential",
                         filter=FilterConfig(sigma=0.4, iterations=3))
    doc = config.to_json()
    assert PipelineConfig.from_json(doc) == config
    assert doc["filter"]["sigma"] == 0.4
    with pytest.raises(InvalidArgumentError):
        PipelineConfig.from_json({"patch_sizes": 64})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    assert PipelineConfig.load(path) == config
    with pytest.raises(InvalidArgumentError):
        PipelineConfig.load(tmp_path / "missing.json")
    path.write_text("[1, 2]")
    with pytest.raises(InvalidArgumentError):
        PipelineConfig.load(path)
    path.write_text("{broken")
    with pytest.raises(InvalidArgumentError):
        PipelineConfig.load(path)


def test_stage_parse():
    assert AblationStage.parse("S2") is AblationStage.S2
    assert AblationStage.parse("s3") is AblationStage.S3
    with pytest.raises(InvalidArgumentError):
        AblationStage.parse("s4")


def test_train_report_structure(manifest, tmp_path):
    ckpt = tmp_path / "model.ckpt.json"
    report = train(manifest, tiny_config(), ckpt, stage=AblationStage.S1)
    assert ckpt.is_file()
    assert ckpt.with_suffix(".report.json").is_file()
    assert report["stage"] == "s1"
    assert report["models"] == 2
    assert len(report["epochs"]) == 2
    # 2 models x 4 patches / batch 4 = 2 batches per epoch
    assert all(len(ep["batches"]) == 2 for ep in report["epochs"])
    assert report["epochs"][0]["lr"] == pytest.approx(1e-3)
    assert report["epochs"][1]["lr"] == pytest.approx(1e-6)
    params = load_checkpoint(ckpt)
    assert params.epoch == 2


def test_train_is_deterministic(manifest, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = tmp_path / "a" / "model.ckpt.json"
    b = tmp_path / "b" / "model.ckpt.json"
    train(manifest, tiny_config(), a, stage=AblationStage.S3)
    train(manifest, tiny_config(), b, stage=AblationStage.S3)
    assert a.read_bytes() == b.read_bytes()
    assert (a.with_suffix(".report.json").read_bytes()
            == b.with_suffix(".report.json").read_bytes())


def test_micro_batch_never_changes_results(manifest, tmp_path):
    a, b = tmp_path / "a.ckpt.json", tmp_path / "b.ckpt.json"
    train(manifest, tiny_config(micro_batch=4), a, stage=AblationStage.S3)
    train(manifest, tiny_config(micro_batch=1), b, stage=AblationStage.S3)
    pa, pb = load_checkpoint(a), load_checkpoint(b)
    # grouping only reorders BLAS accumulation; agreement is ULP-level
    for x, y in zip(pa.parameters(), pb.parameters()):
        assert np.allclose(x.values, y.values, atol=1e-12, rtol=0)


def test_stage_gates_loss_terms(manifest, tmp_path):
    seen = {}
    for stage in AblationStage:
        ckpt = tmp_path / f"{stage.value}.ckpt.json"
        report = train(manifest, tiny_config(epochs=1), ckpt, stage=stage)
        batch = report["epochs"][0]["batches"][0]
        seen[stage] = batch
    assert seen[AblationStage.S1]["vn"] == 0.0
    assert seen[AblationStage.S1]["rn"] == 0.0
    assert seen[AblationStage.S2]["vn"] > 0.0
    assert seen[AblationStage.S2]["rn"] == 0.0
    assert seen[AblationStage.S3]["vn"] > 0.0
    assert seen[AblationStage.S3]["rn"] > 0.0
    # same data, same seed: the emd term is identical across stages
    assert seen[AblationStage.S1]["emd"] == pytest.approx(
        seen[AblationStage.S3]["emd"])


def test_train_dumps_vn_sets(manifest, tmp_path):
    ckpt = tmp_path / "model.ckpt.json"
    dump = tmp_path / "vn.json"
    train(manifest, tiny_config(epochs=1), ckpt, stage=AblationStage.S2,
          dump_vn_path=dump)
    doc = json.loads(dump.read_text())
    assert doc["epoch"] == 0 and doc["batch"] == 0
    # one sample set per patch of the first batch
    assert len(doc["sets"]) == 4
    for raw in doc["sets"]:
        vn_set = VnSampleSet.from_json(raw)
        assert len(vn_set.samples) == 8


def test_train_validation(manifest, tmp_path):
    with pytest.raises(InvalidArgumentError):
        train(manifest, tiny_config(patch_size=201), tmp_path / "x.json")
    with pytest.raises(InvalidArgumentError):
        train(manifest, tiny_config(patches_per_model=201), tmp_path / "x.json")


def test_train_rejects_normal_free_clean(tmp_path):
    cloud = generate_shape(ShapeSpec("sphere", 120, 1))
    bare = PointCloud(cloud.positions)
    write_cloud(bare, tmp_path / "clean.xyz")
    write_cloud(bare, tmp_path / "noisy.xyz")
    (tmp_path / "manifest.json").write_text(json.dumps([{
        "clean": "clean.xyz", "noisy": "noisy.xyz",
        "scale": 0.01, "seed": 1, "kind": "sphere"}]))
    with pytest.raises(InvalidManifestError, match="no normals"):
        train(tmp_path / "manifest.json", tiny_config(), tmp_path / "x.json")


def test_train_raises_on_divergence(manifest, tmp_path, monkeypatch):
    monkeypatch.setattr(
        pl, "total_loss",
        lambda emd, vn, rn, weights: ad.DiffArray(np.array(float("inf"))))
    with pytest.raises(TrainingDivergenceError):
        train(manifest, tiny_config(epochs=1), tmp_path / "x.json")


def test_untrained_network_is_identity(manifest, tmp_path):
    params = NetworkParams.initialize(0)
    noisy = read_cloud(json.loads(manifest.read_text())
                       and (manifest.parent / "sphere-1_noise_0p005.xyz"))
    for stage in (AblationStage.S1, AblationStage.S2):
        out, report = denoise_cloud(noisy, params, tiny_config(), stage)
        assert np.array_equal(out.positions, noisy.positions)
        assert out.normals is None
        assert report["coverage_min"] >= 1
    config = tiny_config(filter=FilterConfig(iterations=0))
    out, report = denoise_cloud(noisy, params, config, AblationStage.S3)
    assert np.array_equal(out.positions, noisy.positions)
    assert out.normals is not None
    assert np.allclose(np.linalg.norm(out.normals, axis=1), 1.0)
    assert report["filter_iterations"] == 0


def test_denoise_covers_duplicated_points():
    # three locations, twelve coincident copies each: farthest-point
    # seeding stalls at distance zero and must fall back to uncovered rows
    base = np.array([[0.0, 0, 0], [4.0, 0, 0], [0.0, 5, 0]])
    positions = np.repeat(base, 12, axis=0)
    params = NetworkParams.initialize(0)
    out, report = denoise_cloud(PointCloud(positions), params,
                                tiny_config(patch_size=12),
                                AblationStage.S1)
    assert np.array_equal(out.positions, positions)
    assert report["coverage_min"] >= 1
    assert report["n_patches"] <= 36


def test_denoise_s3_filter_moves_points(manifest):
    noisy = read_cloud(manifest.parent / "sphere-1_noise_0p005.xyz")
    params = NetworkParams.initialize(0)
    merged, _ = denoise_cloud(noisy, params,
                              tiny_config(filter=FilterConfig(iterations=0)),
                              AblationStage.S3)
    filtered, report = denoise_cloud(noisy, params, tiny_config(),
                                     AblationStage.S3)
    assert report["filter_iterations"] == 10
    assert not np.array_equal(filtered.positions, merged.positions)


def test_denoise_rejects_small_cloud():
    params = NetworkParams.initialize(0)
    with pytest.raises(InvalidArgumentError):
        denoise_cloud(PointCloud(np.zeros((10, 3))), params,
                      tiny_config(patch_size=32), AblationStage.S1)


def test_denoise_file_round_trip(manifest, tmp_path):
    ckpt = tmp_path / "fresh.ckpt.json"
    save_checkpoint(NetworkParams.initialize(0), ckpt)
    noisy_path = manifest.parent / "cube-2_noise_0p005.xyz"
    out_path = tmp_path / "denoised.xyz"
    cloud, report = denoise(noisy_path, ckpt, tiny_config(),
                            AblationStage.S1, out_path)
    assert out_path.is_file()
    assert report["input"] == str(noisy_path)
    stored = read_cloud(out_path)
    assert np.allclose(stored.positions, cloud.positions, rtol=1e-8)
    record = evaluate(out_path, manifest.parent / "cube-2_clean.xyz")
    assert set(record) == {"cd", "mse", "denoised", "clean"}


def test_evaluate_clouds_hand_values():
    clean = PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    denoised = PointCloud(np.array([[0.0, 0, 0], [2.2, 0, 0]]))
    record = evaluate_clouds(denoised, clean)
    # clean diagonal 2 scales the offset to 0.1
    assert record["mse"] == pytest.approx(0.005)
    assert record["cd"] == pytest.approx(0.005)
    exact = evaluate_clouds(clean, clean)
    assert exact["mse"] == 0.0 and exact["cd"] == 0.0


def test_evaluate_scale_invariance():
    rng = np.random.default_rng(11)
    clean = rng.normal(size=(40, 3))
    noisy = clean + 0.05 * rng.normal(size=(40, 3))
    a = evaluate_clouds(PointCloud(noisy), PointCloud(clean))
    b = evaluate_clouds(PointCloud(3.0 * noisy), PointCloud(3.0 * clean))
    assert a["mse"] == pytest.approx(b["mse"])
    assert a["cd"] == pytest.approx(b["cd"])


def test_evaluate_tracks_noise_energy():
    # noise std is scale times the diagonal, so in diagonal-normalized
    # units the per-axis variance is scale^2 and the expected squared
    # displacement 3*scale^2; nearest-point snapping pulls the measured
    # mse below that (2.41*scale^2 here)
    clean = generate_shape(ShapeSpec("sphere", 3000, 2))
    sample = corrupt(clean, 0.005, rng_seed=5)
    record = evaluate_clouds(sample.noisy, clean)
    sigma2 = 0.005 ** 2
    assert record["cd"] > 0.0
    assert sigma2 / 3.0 < record["mse"] < 3.0 * sigma2


def test_ablate_report(manifest, tmp_path):
    out = tmp_path / "ablation.json"
    report = ablate(manifest, tiny_config(epochs=1), out)
    assert set(report["rows"]) == {"input", "s1", "s2", "s3"}
    for row in report["rows"].values():
        assert set(row) == {"cad", "non-cad"}
        for group in row.values():
            assert set(group) == {"mse", "cd"}
    assert report["eval_entries"] == 2
    assert out.is_file() and out.with_suffix(".md").is_file()
    for stage in ("s1", "s2", "s3"):
        assert out.with_name(f"ablation_{stage}.ckpt.json").is_file()
    table = out.with_suffix(".md").read_text().strip().splitlines()
    assert len(table) == 6
    # input row equals a direct evaluation of the loaded pairs
    sphere = evaluate_clouds(
        read_cloud(manifest.parent / "sphere-1_noise_0p005.xyz"),
        read_cloud(manifest.parent / "sphere-1_clean.xyz"))
    assert report["rows"]["input"]["non-cad"]["mse"] == pytest.approx(sphere["mse"])


def test_ablate_requires_eval_scale(manifest, tmp_path):
    with pytest.raises(InvalidArgumentError, match="eval scale"):
        ablate(manifest, tiny_config(eval_scale=0.02), tmp_path / "r.json")


def test_ablate_requires_both_splits(tmp_path):
    specs = [ShapeSpec("sphere", 120, 1), ShapeSpec("torus", 120, 2)]
    manifest = build_manifest(specs, [0.005], tmp_path / "data")
    with pytest.raises(InvalidArgumentError, match="sharp"):
        ablate(manifest, tiny_config(), tmp_path / "r.json")
