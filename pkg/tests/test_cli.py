"""Command-line interface: exit codes, JSON summaries, flag plumbing."""

import json
import subprocess
import sys

import numpy as np
import pytest

from geogcn import autodiff as ad
from geogcn import cli
from geogcn import pipeline as pl
from geogcn.bilateral import FilterConfig
from geogcn.cli import main
from geogcn.io import read_cloud
from geogcn.shapes import load_manifest

TINY = dict(patch_size=32, patches_per_model=4, batch_size=4, epochs=1,
            vn_count=8, graph_k=6, pca_k=8, rng_seed=3)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture()
def dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code, stdout, _ = run(capsys, "gen-data", "--out", str(out),
                          "--shapes", "sphere,cube", "--scales", "0.005",
                          "--points", "200")
    assert code == 0
    return json.loads(stdout)["manifest"]


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_gen_data_summary(dataset):
    entries = load_manifest(dataset)
    assert len(entries) == 2
    assert {e.kind for e in entries} == {"sphere", "cube"}


def test_gen_data_rejects_unknown_shape(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path),
                       "--shapes", "dodecahedron")
    assert code == 2
    assert "invalid arguments" in err


def test_gen_data_rejects_bad_scales(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path),
                       "--shapes", "sphere", "--scales", "lots")
    assert code == 2
    assert "--scales" in err


def test_train_denoise_eval_round_trip(dataset, config_path, tmp_path, capsys):
    ckpt = tmp_path / "model.ckpt.json"
    code, stdout, _ = run(capsys, "train", "--manifest", dataset,
                          "--out", str(ckpt), "--config", str(config_path),
                          "--stage", "s1", "--seed", "5")
    assert code == 0
    summary = json.loads(stdout)
    assert summary["stage"] == "s1"
    assert ckpt.is_file()

    entries = load_manifest(dataset)
    noisy = str(entries[0].noisy_path)
    clean = str(entries[0].clean_path)
    out_cloud = tmp_path / "denoised.xyz"
    code, stdout, _ = run(capsys, "denoise", "--in", noisy,
                          "--ckpt", str(ckpt), "--out", str(out_cloud),
                          "--stage", "s1", "--config", str(config_path))
    assert code == 0
    assert json.loads(stdout)["stage"] == "s1"
    assert out_cloud.is_file()

    code, stdout, _ = run(capsys, "eval", "--denoised", str(out_cloud),
                          "--clean", clean)
    assert code == 0
    record = json.loads(stdout)
    assert set(record) >= {"cd", "mse"}
    assert record["mse"] >= 0.0


def test_train_rejects_bad_stage(dataset, config_path, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--manifest", dataset,
                       "--out", str(tmp_path / "x.json"),
                       "--config", str(config_path), "--stage", "s9")
    assert code == 2
    assert "unknown stage" in err


def test_train_missing_manifest_is_data_error(tmp_path, config_path, capsys):
    code, _, err = run(capsys, "train", "--manifest",
                       str(tmp_path / "absent.json"),
                       "--out", str(tmp_path / "x.json"),
                       "--config", str(config_path))
    assert code == 3
    assert "data error" in err


def test_denoise_missing_checkpoint(dataset, config_path, tmp_path, capsys):
    entries = load_manifest(dataset)
    code, _, err = run(capsys, "denoise", "--in", str(entries[0].noisy_path),
                       "--ckpt", str(tmp_path / "absent.ckpt.json"),
                       "--out", str(tmp_path / "y.xyz"),
                       "--config", str(config_path))
    assert code == 3
    assert "data error" in err


def test_divergence_exit_code(dataset, config_path, tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(
        pl, "total_loss",
        lambda emd, vn, rn, weights: ad.DiffArray(np.array(float("nan"))))
    code, _, err = run(capsys, "train", "--manifest", dataset,
                       "--out", str(tmp_path / "x.json"),
                       "--config", str(config_path))
    assert code == 4
    assert "diverged" in err


def test_filter_flags_reach_the_filter_config(tmp_path, capsys, monkeypatch):
    captured = {}

    def fake_denoise(cloud_path, ckpt_path, config, stage, out_path):
        captured["config"] = config
        captured["stage"] = stage
        return None, {"stage": stage.value}

    monkeypatch.setattr(cli, "denoise", fake_denoise)
    code, _, _ = run(capsys, "denoise", "--in", "a.xyz", "--ckpt", "c.json",
                     "--out", "b.xyz", "--filter-iters", "3",
                     "--filter-sigma", "0.4", "--filter-lambda", "0.7",
                     "--filter-k", "5", "--eq5-literal")
    assert code == 0
    assert captured["config"].filter == FilterConfig(
        sigma=0.4, lam=0.7, iterations=3, k_neighbors=5, literal_update=True)
    assert captured["stage"] is pl.AblationStage.S3


def test_config_file_and_overrides(tmp_path, capsys, monkeypatch):
    config_file = tmp_path / "config.json"
    config_file.write_text(json.dumps(dict(TINY, momentum=0.5)))
    captured = {}

    def fake_train(manifest, config, out, stage, dump_vn_path=None):
        captured["config"] = config
        return {"epochs": [{"mean_total": 0.0}]}

    monkeypatch.setattr(cli, "train", fake_train)
    code, _, _ = run(capsys, "train", "--manifest", "m.json", "--out", "c.json",
                     "--config", str(config_file), "--seed", "9",
                     "--train-mode", "sequential")
    assert code == 0
    config = captured["config"]
    assert config.momentum == 0.5
    assert config.patch_size == 32
    # command-line overrides beat the file
    assert config.rng_seed == 9
    assert config.train_mode == "sequential"


def test_ablate_passes_eval_manifest(tmp_path, capsys, monkeypatch):
    captured = {}

    def fake_ablate(manifest, config, out, eval_manifest=None):
        captured["args"] = (str(manifest), str(out), eval_manifest)
        return {"rows": {}}

    monkeypatch.setattr(cli, "ablate", fake_ablate)
    code, _, _ = run(capsys, "ablate", "--manifest", "m.json",
                     "--out", "r.json", "--eval-manifest", "held.json")
    assert code == 0
    assert captured["args"] == ("m.json", "r.json", "held.json")


def test_module_entry_point(tmp_path):
    # the package must be runnable as python3 -m geogcn.cli
    proc = subprocess.run(
        [sys.executable, "-m", "geogcn.cli", "gen-data",
         "--out", str(tmp_path / "d"), "--shapes", "sphere",
         "--scales", "0.01", "--points", "120"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    summary = json.loads(proc.stdout)
    assert summary["entries"] == 1
    cloud = read_cloud(load_manifest(summary["manifest"])[0].noisy_path)
    assert len(cloud) == 120
