"""End-to-end command-line flows over temp directories."""

import json

import numpy as np
import pytest

from ssmprobe.cli import main
from ssmprobe.features import read_features
from ssmprobe.routing import save_plan


SYNTH_SPEC = """
n_samples = 40
grid_h = 2
grid_w = 2
d = 6
num_classes = 3
needle_count = 1
signal_scale = 3.0
noise_scale = 0.4
distractor_rate = 0.2
seed = 5
split_tag = "{split}"
"""

TRAIN_CONFIG = """
[data]
train = "{train}"
eval = "{eval}"

[train]
lr = 1e-3
batch_size = 16
epochs = 2
seed = 3

[[heads]]
kind = "gap"

[[heads]]
kind = "s4-scan"
family = "raster"
n_state = 2

[[heads]]
kind = "s4-sinkhorn"
n_state = 2
sinkhorn_iterations = 3
"""


@pytest.fixture()
def data_files(tmp_path):
    paths = {}
    for split in ("train", "val"):
        spec = tmp_path / f"{split}.toml"
        spec.write_text(SYNTH_SPEC.format(split=split))
        out = tmp_path / f"{split}.ssmp"
        assert main(["synth", str(spec), "--out", str(out)]) == 0
        paths[split] = out
    return paths


def write_train_config(tmp_path, data_files, name="cfg.toml"):
    cfg = tmp_path / name
    cfg.write_text(TRAIN_CONFIG.format(train=data_files["train"],
                                       eval=data_files["val"]))
    return cfg


class TestSynth:
    def test_creates_readable_file(self, tmp_path, data_files, capsys):
        fset = read_features(data_files["train"])
        assert len(fset) == 40
        assert main(["inspect", str(data_files["train"])]) == 0
        out = capsys.readouterr().out
        assert "40 samples" in out and "d=6" in out

    def test_deterministic_bytes(self, tmp_path):
        spec = tmp_path / "s.toml"
        spec.write_text(SYNTH_SPEC.format(split="train"))
        a, b = tmp_path / "a.ssmp", tmp_path / "b.ssmp"
        assert main(["synth", str(spec), "--out", str(a)]) == 0
        assert main(["synth", str(spec), "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_spec_nonzero_exit(self, tmp_path, capsys):
        spec = tmp_path / "bad.toml"
        spec.write_text(SYNTH_SPEC.format(split="train").replace(
            "needle_count = 1", "needle_count = 99"))
        assert main(["synth", str(spec), "--out", str(tmp_path / "x.ssmp")]) != 0
        assert "needle_count" in capsys.readouterr().err


class TestInspect:
    def test_corrupt_file_nonzero(self, tmp_path, data_files):
        bad = tmp_path / "bad.ssmp"
        bad.write_bytes(data_files["train"].read_bytes()[:40])
        assert main(["inspect", str(bad)]) != 0


class TestTrain:
    def test_full_run_artifacts(self, tmp_path, data_files):
        cfg = write_train_config(tmp_path, data_files)
        run_dir = tmp_path / "run"
        assert main(["train", str(cfg), "--run-dir", str(run_dir)]) == 0
        metrics = (run_dir / "metrics.csv").read_text()
        for name in ("gap", "s4-raster", "s4-sinkhorn"):
            assert name in metrics
            assert (run_dir / "checkpoints" / f"{name}.json").exists()
            assert (run_dir / "checkpoints" / f"{name}.bin").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 3

    def test_rerun_bit_identical_metrics(self, tmp_path, data_files):
        cfg = write_train_config(tmp_path, data_files)
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", str(cfg), "--run-dir", str(d1)]) == 0
        assert main(["train", str(cfg), "--run-dir", str(d2)]) == 0
        assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()
        for name in ("gap", "s4-raster", "s4-sinkhorn"):
            assert ((d1 / "checkpoints" / f"{name}.bin").read_bytes()
                    == (d2 / "checkpoints" / f"{name}.bin").read_bytes())

    def test_manifest_reexec_reproduces(self, tmp_path, data_files):
        cfg = write_train_config(tmp_path, data_files)
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", str(cfg), "--run-dir", str(d1)]) == 0
        assert main(["train", str(d1 / "manifest.json"), "--run-dir", str(d2)]) == 0
        assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()

    def test_missing_feature_file(self, tmp_path, data_files, capsys):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(TRAIN_CONFIG.format(train=tmp_path / "nope.ssmp",
                                           eval=data_files["val"]))
        assert main(["train", str(cfg), "--run-dir", str(tmp_path / "r")]) != 0

    def test_unknown_head_kind_message(self, tmp_path, data_files, capsys):
        cfg = write_train_config(tmp_path, data_files)
        cfg.write_text(cfg.read_text().replace('kind = "gap"', 'kind = "gapp"'))
        assert main(["train", str(cfg), "--run-dir", str(tmp_path / "r")]) != 0
        assert "unknown kind" in capsys.readouterr().err


SWEEP_CONFIG = """
[data]
train = "{train}"
eval = "{eval}"

[train]
batch_size = 32
epochs = 1
seed = 2

[head]
kind = "s4-sinkhorn"
n_state = 2
sinkhorn_iterations = 2

[sweep]
iterations = [1, 2]
taus = [0.2, 0.5]
n_states = [1, 2]
seeds = [2, 3]
"""


class TestSweep:
    def test_sinkhorn_grid_csv(self, tmp_path, data_files):
        cfg = tmp_path / "sweep.toml"
        cfg.write_text(SWEEP_CONFIG.format(train=data_files["train"],
                                           eval=data_files["val"]))
        run_dir = tmp_path / "sw"
        assert main(["sweep", str(cfg), "--kind", "sinkhorn-grid",
                     "--run-dir", str(run_dir)]) == 0
        lines = (run_dir / "sinkhorn-grid.csv").read_text().strip().splitlines()
        assert lines[0] == "iterations,tau,mean_acc,std_acc,n_seeds"
        assert len(lines) == 5  # 2x2 grid
        assert all(line.endswith(",2") for line in lines[1:])  # 2 seeds

    def test_state_dim_csv(self, tmp_path, data_files):
        cfg = tmp_path / "sweep.toml"
        cfg.write_text(SWEEP_CONFIG.format(train=data_files["train"],
                                           eval=data_files["val"]))
        run_dir = tmp_path / "sd"
        assert main(["sweep", str(cfg), "--kind", "state-dim",
                     "--run-dir", str(run_dir)]) == 0
        lines = (run_dir / "state-dim.csv").read_text().strip().splitlines()
        assert lines[0] == "n_state,mean_acc,std_acc,n_seeds"
        assert len(lines) == 3

    def test_unknown_kind_usage_error(self, tmp_path, data_files):
        cfg = tmp_path / "sweep.toml"
        cfg.write_text(SWEEP_CONFIG.format(train=data_files["train"],
                                           eval=data_files["val"]))
        with pytest.raises(SystemExit):
            main(["sweep", str(cfg), "--kind", "mystery"])


class TestDiagnose:
    @pytest.fixture()
    def trained(self, tmp_path, data_files):
        cfg = write_train_config(tmp_path, data_files)
        run_dir = tmp_path / "run"
        assert main(["train", str(cfg), "--run-dir", str(run_dir)]) == 0
        return run_dir

    def test_gap_checkpoint_has_no_plans(self, tmp_path, trained, data_files, capsys):
        rc = main(["diagnose", "--checkpoint", str(trained / "checkpoints" / "gap"),
                   "--features", str(data_files["val"]), "--plans",
                   "--run-dir", str(tmp_path / "d")])
        assert rc != 0
        assert "no transport plan" in capsys.readouterr().err

    def test_sinkhorn_plans_per_sample(self, tmp_path, trained, data_files):
        out = tmp_path / "diag"
        rc = main(["diagnose",
                   "--checkpoint", str(trained / "checkpoints" / "s4-sinkhorn"),
                   "--features", str(data_files["val"]), "--plans",
                   "--run-dir", str(out)])
        assert rc == 0
        payload = json.loads((out / "report.json").read_text())
        assert len(payload["plans"]) == 40
        assert len(payload["stochasticity"]) == 40

    def test_aggregate_flag(self, tmp_path, trained, data_files):
        out = tmp_path / "diag-agg"
        rc = main(["diagnose",
                   "--checkpoint", str(trained / "checkpoints" / "s4-sinkhorn"),
                   "--features", str(data_files["val"]), "--plans", "--aggregate",
                   "--run-dir", str(out)])
        assert rc == 0
        payload = json.loads((out / "report.json").read_text())
        assert len(payload["plans"]) == 1

    def test_evidence_curves(self, tmp_path, trained, data_files):
        out = tmp_path / "diag-ev"
        rc = main(["diagnose",
                   "--checkpoint", str(trained / "checkpoints" / "s4-sinkhorn"),
                   "--features", str(data_files["val"]), "--evidence", "0",
                   "--run-dir", str(out)])
        assert rc == 0
        payload = json.loads((out / "report.json").read_text())
        orderings = sorted(c["ordering"] for c in payload["curves"])
        assert orderings == ["raster", "routed"]
        csv_lines = (out / "report_curves.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 1 + 2 * 4  # header + two curves of N=4

    def test_checkpoint_without_features_rejected(self, tmp_path, trained, capsys):
        rc = main(["diagnose",
                   "--checkpoint", str(trained / "checkpoints" / "s4-sinkhorn"),
                   "--plans", "--run-dir", str(tmp_path / "d")])
        assert rc != 0
        assert "--features" in capsys.readouterr().err

    def test_external_plan_file(self, tmp_path):
        plan_path = tmp_path / "p.bin"
        rng = np.random.default_rng(0)
        save_plan(plan_path, rng.random((6, 6)))
        out = tmp_path / "diag-plan"
        rc = main(["diagnose", "--plan-file", str(plan_path),
                   "--run-dir", str(out)])
        assert rc == 0
        payload = json.loads((out / "report.json").read_text())
        assert len(payload["plans"]) == 1


class TestAblate:
    def test_scramble_table(self, tmp_path, data_files):
        cfg = write_train_config(tmp_path, data_files)
        run_dir = tmp_path / "run"
        assert main(["train", str(cfg), "--run-dir", str(run_dir)]) == 0
        out = tmp_path / "abl"
        rc = main(["ablate-scramble",
                   "--checkpoint", str(run_dir / "checkpoints" / "s4-sinkhorn"),
                   "--features", str(data_files["val"]),
                   "--seeds", "0", "1", "--run-dir", str(out)])
        assert rc == 0
        lines = (out / "scramble.csv").read_text().strip().splitlines()
        assert lines[0] == "seed,condition,accuracy"
        assert len(lines) == 1 + 2 * 4  # 2 seeds x 4 conditions

    def test_gap_checkpoint_rejected(self, tmp_path, data_files, capsys):
        cfg = write_train_config(tmp_path, data_files)
        run_dir = tmp_path / "run"
        assert main(["train", str(cfg), "--run-dir", str(run_dir)]) == 0
        rc = main(["ablate-scramble",
                   "--checkpoint", str(run_dir / "checkpoints" / "gap"),
                   "--features", str(data_files["val"]),
                   "--run-dir", str(tmp_path / "x")])
        assert rc != 0
