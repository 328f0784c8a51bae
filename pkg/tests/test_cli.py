import json
import subprocess
import sys

import pytest

from idm import nn
from idm.cli import PROFILES, main, resolve_config, UsageError
from idm.data import MNIST_FILES


def write_config(tmp_path, **overrides):
    cfg = dict(PROFILES["synthetic-idm"], samples_per_env=200, steps=8, warmup_g=3,
               hidden_dim=6)
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


class TestFetch:
    def test_download_and_skip(self, mirror, tmp_path):
        url, requests = mirror
        out = tmp_path / "mnist"
        assert main(["fetch", "--mirror", url, "--out", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == sorted(n + ".gz" for n in MNIST_FILES.values())
        assert not list(out.glob("*.part"))
        n_before = len(requests)
        assert main(["fetch", "--mirror", url, "--out", str(out)]) == 0
        assert len(requests) == n_before

    def test_truncated_file_is_replaced(self, mirror, tmp_path):
        url, requests = mirror
        out = tmp_path / "mnist"
        assert main(["fetch", "--mirror", url, "--out", str(out)]) == 0
        victim = out / (MNIST_FILES["train_labels"] + ".gz")
        good = victim.read_bytes()
        victim.write_bytes(good[:100])
        n_before = len(requests)
        assert main(["fetch", "--mirror", url, "--out", str(out)]) == 0
        assert len(requests) == n_before + 1
        assert victim.read_bytes() == good

    def test_unreachable_mirror(self, tmp_path, capsys):
        assert main(["fetch", "--mirror", "http://127.0.0.1:9", "--out", str(tmp_path)]) == 1
        assert "retriable" in capsys.readouterr().err

    def test_missing_files_on_mirror(self, mirror, tmp_path, capsys):
        url, _ = mirror
        assert main(["fetch", "--mirror", url + "/nowhere", "--out", str(tmp_path)]) == 1
        assert "not found" in capsys.readouterr().err


class TestResolveConfig:
    def test_profile_and_seed_override(self):
        cfg, opts = resolve_config(profile="cmnist-idm", seed=4)
        assert cfg.seed == 4 and cfg.hidden_dim == 433 and cfg.warmup_g == 154
        assert opts["dataset"] == "cmnist"

    def test_exactly_one_source(self, tmp_path):
        with pytest.raises(UsageError):
            resolve_config()
        with pytest.raises(UsageError):
            resolve_config(write_config(tmp_path), "synthetic-idm")

    def test_bad_dataset(self, tmp_path):
        with pytest.raises(UsageError, match="dataset"):
            resolve_config(write_config(tmp_path, dataset="svhn"))


class TestTrainCommand:
    def test_unknown_profile(self, tmp_path, capsys):
        assert main(["train", "--profile", "nope", "--out", str(tmp_path)]) == 2
        assert "unknown profile" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        path = write_config(tmp_path, lamda1=3.0)
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "lamda1" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_missing_arguments_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["train", "--out", str(tmp_path)])
        assert info.value.code == 2

    def test_synthetic_run_outputs(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(write_config(tmp_path)), "--out", str(out),
                     "--seed", "2"]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"metrics.jsonl", "summary.csv", "traces.csv", "model.idm1",
                "manifest.json"} <= names
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 2
        assert manifest["datasets"]["train"][0]["samples"] == 200
        assert {a["kind"] for a in manifest["artifacts"]} >= {"metrics", "checkpoint"}
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 8
        assert nn.load_checkpoint(out / "model.idm1").hidden_dim == 6

    def test_cmnist_run_on_fake_data(self, tmp_path, mnist_dir):
        path = write_config(tmp_path, dataset="cmnist", samples_per_env=300, steps=3,
                            warmup_g=1, lambda1=10.0)
        out = tmp_path / "run"
        assert main(["train", "--config", str(path), "--data", str(mnist_dir),
                     "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["datasets"]["test"]["samples"] == 60000 - 600
        assert manifest["datasets"]["gray"]["samples"] == 10000

    def test_cmnist_without_data(self, tmp_path, monkeypatch):
        monkeypatch.delenv("IDM_DATA_DIR", raising=False)
        path = write_config(tmp_path, dataset="cmnist")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert main(["train", "--config", str(path), "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort_exit_3(self, tmp_path):
        # an enormous learning rate blows the logits past the float range within a few steps
        path = write_config(tmp_path, penalty_mode="erm", lr=1e150, steps=40, warmup_g=0,
                            weight_decay=0.0, reset_optimizer=False)
        out = tmp_path / "run"
        assert main(["train", "--config", str(path), "--out", str(out)]) == 3
        diag = json.loads((out / "diagnostics.json").read_text())
        assert "step" in diag["record"]

    def test_byte_identical_reruns(self, tmp_path):
        path = write_config(tmp_path)
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["train", "--config", str(path), "--out", str(out)]) == 0
        for name in ("metrics.jsonl", "model.idm1", "summary.csv", "traces.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


class TestVerifyTheory:
    def test_small_suite_passes(self, tmp_path):
        report = tmp_path / "r.json"
        assert main(["verify-theory", "--report", str(report), "--scale", "0.1"]) == 0
        data = json.loads(report.read_text())
        assert data["all_passed"] and len(data["checks"]) >= 8
        assert all({"name", "passed", "instances", "margin"} <= set(c) for c in data["checks"])

    def test_injected_fault_fails(self, tmp_path):
        report = tmp_path / "r.json"
        code = main(["verify-theory", "--report", str(report), "--scale", "0.1",
                     "--inject-fault", "sorted-matching"])
        assert code == 1
        data = json.loads(report.read_text())
        failed = [c["name"] for c in data["checks"] if not c["passed"]]
        assert failed == ["sorted_matching_optimality"]

    def test_bad_scale(self, tmp_path):
        assert main(["verify-theory", "--report", str(tmp_path / "r"), "--scale", "0"]) == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "idm", "verify-theory", "--report",
                               str(tmp_path / "r.json"), "--scale", "0.05"],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "PASS" in proc.stdout
