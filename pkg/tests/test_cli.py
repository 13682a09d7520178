import json
import subprocess
import sys

import pytest

from mcalab.cli import main

DATA_SET = ["--set", "n_train=128", "--set", "n_ind_test=24", "--set", "n_ood_test=24",
            "--set", "pool_size=8", "--set", "n_hard_distractors=2"]
TRAIN_SET = ["--set", "steps=6", "--set", "warmup_steps=2", "--set", "batch_size=32", "--set", "eval_every=3",
             "--set", "encoder.d_model=8", "--set", "encoder.d_out=8"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--seed", "3", *DATA_SET]) == 0
    return out / "dataset.mcalab"


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(data), "--out", str(out), *TRAIN_SET]) == 0
    return out


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_gen_data(data, capsys):
    m = manifest(data.parent)
    assert m["command"] == "gen-data" and m["seed"] == 3 and "dataset.mcalab" in m["artifacts"]
    cal = json.loads((data.parent / "calibration.json").read_text())
    assert set(cal) == {"image_only", "latent"}


def test_train_outputs(trained):
    for name in ("final.ckpt", "metrics.jsonl", "probes.jsonl", "timing.jsonl", "manifest.json"):
        assert (trained / name).is_file()
    assert len((trained / "metrics.jsonl").read_text().splitlines()) == 6
    assert manifest(trained)["config"]["batch_size"] == 32


def test_eval_and_export(data, trained, tmp_path, capsys):
    args = ["--data", str(data), "--checkpoint", str(trained / "final.ckpt")]
    assert main(["eval", *args, "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert set(report) == {"ind", "ood"} and report["ood"]["n_queries"] == 24
    assert main(["export-emb", *args, "--out", str(tmp_path / "ex"), "--set", "max_queries=5"]) == 0
    assert (tmp_path / "ex" / "embeddings-ood.mcalab").is_file()
    assert manifest(tmp_path / "ex")["command"] == "export-emb"


def test_zero_weights_reproduce_baseline(data, tmp_path):
    """--set alpha=0 beta=0 gives the same log as an explicitly vanilla config file."""
    cfg = tmp_path / "vanilla.json"
    cfg.write_text(json.dumps({"mca": {"alpha": 0.0, "beta": 0.0, "mixer": "mean_pool"}}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--data", str(data), "--out", str(a), *TRAIN_SET,
                 "--set", "mca.alpha=0", "--set", "mca.beta=0", "--set", "mca.mixer=mean_pool"]) == 0
    assert main(["train", "--data", str(data), "--out", str(b), "--config", str(cfg), *TRAIN_SET]) == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()


def test_experiment_command(tmp_path, capsys):
    grid = {"variants": [{"name": "cl", "mca": {"alpha": 0, "beta": 0}}, {"name": "mca", "mca": {}}],
            "train": {"steps": 3, "warmup_steps": 1, "batch_size": 16, "eval_every": 0,
                      "encoder": {"d_model": 8, "d_out": 8}},
            "data": {"n_train": 64, "n_ind_test": 16, "n_ood_test": 16, "pool_size": 8, "n_hard_distractors": 2}}
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(grid))
    assert main(["experiment", "--config", str(path), "--out", str(tmp_path / "x"), "--seed", "7"]) == 0
    doc = json.loads((tmp_path / "x" / "summary.json").read_text())
    assert doc["grid"]["seeds"] == [7] and len(doc["cells"]) == 2
    assert "variant" in capsys.readouterr().out


def test_grad_check(tmp_path, capsys):
    assert main(["grad-check", "--set", "n_seeds=1", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 8 and "FAIL" not in out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["cl"]["passed"]


@pytest.mark.parametrize("argv, needle", [
    (["gen-data", "--out", "{tmp}", "--set", "unimodal_pair_fraction=1.5"], "unimodal_pair_fraction"),
    (["gen-data", "--out", "{tmp}", "--set", "no_such_key=1"], "latent_dim"),
    (["train", "--out", "{tmp}"], "--data"),
    (["frobnicate"], ""),
    (["gen-data"], ""),
])
def test_usage_errors_exit_2(argv, needle, tmp_path, capsys):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    assert main(argv) == 2
    assert needle in capsys.readouterr().err


def test_runtime_errors_exit_1(data, tmp_path, capsys):
    bad = tmp_path / "bad.mcalab"
    bad.write_bytes(b"garbage" * 10)
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "t")]) == 1
    assert "format error" in capsys.readouterr().err
    blob = bytearray(data.read_bytes())
    blob[-5] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert main(["eval", "--data", str(bad), "--checkpoint", str(bad), "--out", str(tmp_path / "e")]) == 1


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mcalab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "eval", "export-emb", "grad-check", "experiment"):
        assert cmd in proc.stdout
