import json
import math
from pathlib import Path

import numpy as np
import pytest

import gepd

TOY = [
    "synth.n_hc=4",
    "synth.n_pd=4",
    "synth.n_channels=4",
    "synth.duration_s=6",
    "synth.discriminative_channels=0,1",
    "preprocess.target_rate_hz=64",
    "preprocess.epoch_length_s=1",
    "preprocess.filter_taps=33",
    "preprocess.band_high_hz=20",
    "gan.noise_dim=8",
    "gan.epochs=3",
    "quality.hidden_size=4",
    "quality.epochs=2",
    "pruning.combine=union",
    "classifier.epochs=2",
    "experiment.write_images=false",
]


def test_divergences():
    assert gepd.js([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.311278, abs=1e-6)
    p = np.array([0.2, 0.3, 0.5])
    q = np.array([0.4, 0.4, 0.2])
    assert gepd.js(p, q) == gepd.js(q, p)
    assert gepd.kl(p, p) == 0.0
    direct = sum(a * math.log2(a / b) for a, b in zip(p, q))
    assert gepd.kl(p, q) == pytest.approx(direct, abs=1e-12)


def test_cosine_schedule():
    assert gepd.cosine_lr(0, 100) == pytest.approx(1e-3)
    assert gepd.cosine_lr(100, 100) == pytest.approx(1e-4)
    assert gepd.cosine_lr(50, 100) == pytest.approx(5.5e-4)


def test_config_defaults_and_overrides(tmp_path):
    cfg = gepd.config()
    assert cfg["experiment"]["delta"] == "1.7"
    assert cfg["pruning"]["alpha"] == "0.5"
    changed = gepd.config(overrides=["pruning.beta=0.25"])
    assert changed["pruning"]["beta"] == "0.25"
    ini = tmp_path / "exp.ini"
    ini.write_text(gepd.format_config(overrides=["gan.epochs=7"]))
    assert gepd.config(ini)["gan"]["epochs"] == "7"
    with pytest.raises(ValueError):
        gepd.config(overrides=["gan.nonsense=1"])


def test_synth_and_preprocess(tmp_path):
    manifest = gepd.synth(tmp_path / "site", seed=3, overrides=TOY)
    epochs = gepd.preprocess(manifest, overrides=TOY)
    assert epochs["data"].shape == (48, 4, 64)
    assert sorted(set(epochs["labels"])) == [0, 1]
    assert len(epochs["subjects"]) == 48
    assert np.isfinite(epochs["data"]).all()


def test_run_experiment_cross_dataset(tmp_path):
    a = gepd.synth(tmp_path / "a", seed=1, overrides=TOY)
    b = gepd.synth(tmp_path / "b", seed=2, overrides=TOY + ["synth.subject_prefix=B", "synth.site_gain=1.3"])
    overrides = TOY + [f"experiment.train_dataset={a}", f"experiment.test_dataset={b}", "experiment.seeds=0"]
    report = gepd.run_experiment(overrides=overrides, output_root=tmp_path / "runs")
    run_dir = Path(report["run_dir"])
    assert run_dir.name == "run-001"
    assert len(report["seeds"]) == 1
    assert 0.0 <= report["summary"]["accuracy_mean"] <= 1.0
    on_disk = json.loads((run_dir / "report.json").read_text())
    assert on_disk["summary"] == report["summary"]
    assert (run_dir / report["seeds"][0]["artifacts"]["mask"]).exists()

    with pytest.raises(gepd.StageError, match=r"\[preprocess\]"):
        gepd.run_experiment(
            overrides=TOY + [f"experiment.train_dataset={tmp_path / 'missing.ini'}", f"experiment.test_dataset={b}"],
            output_root=tmp_path / "runs",
        )
