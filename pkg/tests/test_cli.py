import json
import subprocess
import sys
import time

import numpy as np
import pytest
from PIL import Image

from sharedlatent.cli import main
from sharedlatent.datagen import load_dataset
from sharedlatent.metrics import read_records

SMOKE = {
    "dataset": {"kind": "glyphs", "n_train": 300, "n_test": 100, "n_modalities": 2, "seed": 0},
    "model": {"latent_dim": 8, "embed_dim": 16, "fused_dim": 32, "width": 8},
    "stage1": {"iterations": 200, "batch_size": 32, "seed": 0},
    "stage2": {"iterations": 200, "width": 32, "depth": 1, "steps": 250, "seed": 0},
    "eval": {"classifier_iterations": 300, "classifier_gate": 0.9},
    "seed": 0,
}


def write_config(path, out_dir, **overrides):
    cfg = json.loads(json.dumps(SMOKE))
    for section, values in overrides.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    cfg["output_dir"] = str(out_dir)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = write_config(root / "config.json", root / "run")
    t0 = time.perf_counter()
    assert main(["train-stage1", "--config", cfg]) == 0
    assert main(["train-stage2", "--config", cfg]) == 0
    assert main(["generate", "--config", cfg, "--joint", "--n", "16", "--seed", "0"]) == 0
    elapsed = time.perf_counter() - t0
    return root, cfg, elapsed


def test_smoke_run_is_fast(smoke_run):
    _, _, elapsed = smoke_run
    assert elapsed < 60


def test_training_outputs(smoke_run):
    root, _, _ = smoke_run
    run = root / "run"
    for stage in ("stage1", "stage2"):
        assert (run / stage / "manifest.json").exists()
        assert (run / stage / "curve.jsonl").read_text().strip()
        assert read_records(run / stage / "metrics.jsonl")
    assert json.loads((run / "config.json").read_text())["stage1"]["iterations"] == 200


def test_joint_generate_reports_nfe(smoke_run, capsys):
    root, cfg, _ = smoke_run
    assert main(["generate", "--config", cfg, "--joint", "--n", "4", "--seed", "1"]) == 0
    assert "NFE: 251" in capsys.readouterr().out
    out = root / "run" / "generate" / "joint-seed1"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["nfe"] == 251 and len(manifest["provenance"]) == 4
    assert len(load_dataset(out / "samples")) == 4
    for fig in manifest["figures"]:
        assert fig["seed"] == 1 and len(fig["config_digest"]) == 64
        assert Image.open(out / fig["file"]).size[0] > 0


def test_same_seed_same_bytes(smoke_run):
    root, cfg, _ = smoke_run
    for name in ("a", "b"):
        assert main(["generate", "--config", cfg, "--joint", "--n", "6", "--seed", "7", "--name", name]) == 0
    gen = root / "run" / "generate"
    for f in ("modality_0.bin", "modality_1.bin"):
        assert (gen / "a" / "samples" / f).read_bytes() == (gen / "b" / "samples" / f).read_bytes()


def test_joint_with_zero_samples(smoke_run):
    root, cfg, _ = smoke_run
    assert main(["generate", "--config", cfg, "--joint", "--n", "0", "--name", "empty"]) == 0
    out = root / "run" / "generate" / "empty"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["provenance"] == [] and manifest["figures"] == []
    assert len(load_dataset(out / "samples")) == 0


def test_cross_correct_style(smoke_run):
    root, cfg, _ = smoke_run
    assert main(["generate", "--config", cfg, "--cross", "--mask", "1", "--n", "8"]) == 0
    cross = json.loads((root / "run" / "generate" / "cross-seed0" / "manifest.json").read_text())
    assert all(p["conditioning_modality"] == 0 for p in cross["provenance"])
    assert main(["generate", "--config", cfg, "--correct", "--mask", "1", "--k", "62", "--n", "8"]) == 0
    corr = json.loads((root / "run" / "generate" / "correct-seed0-k62" / "manifest.json").read_text())
    assert corr["nfe"] == 63
    ref = root / "run" / "generate" / "cross-seed0" / "samples"
    assert main(["generate", "--config", cfg, "--style", "--reference", str(ref), "--k", "62", "--n", "8"]) == 0


@pytest.mark.parametrize("argv", [
    ["--cross", "--mask", "0,1"],
    ["--style", "--k", "10"],
    ["--correct", "--k", "10"],
    ["--correct", "--mask", "0", "--k", "999"],
    ["--joint", "--k", "3"],
    ["--cross", "--mask", "5"],
])
def test_generate_usage_errors(smoke_run, argv, capsys):
    _, cfg, _ = smoke_run
    assert main(["generate", "--config", cfg, "--n", "4"] + argv) == 2
    assert "error:" in capsys.readouterr().err


def test_mode_flags_are_exclusive(smoke_run):
    _, cfg, _ = smoke_run
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--config", cfg, "--joint", "--cross"])
    assert exc.value.code == 2


def test_rerun_gives_identical_checkpoint_digests(smoke_run, tmp_path):
    root, _, _ = smoke_run
    cfg = write_config(tmp_path / "c.json", tmp_path / "again")
    assert main(["train-stage1", "--config", cfg]) == 0
    a = json.loads((root / "run" / "stage1" / "manifest.json").read_text())["digest"]
    b = json.loads((tmp_path / "again" / "stage1" / "manifest.json").read_text())["digest"]
    assert a == b


def test_stage2_refuses_wrong_stage1_digest(smoke_run, tmp_path, capsys):
    root, _, _ = smoke_run
    cfg = write_config(tmp_path / "c.json", root / "run", stage2={"stage1_digest": "0" * 64})
    assert main(["train-stage2", "--config", cfg]) == 2
    assert "digest mismatch" in capsys.readouterr().err


def test_generate_refuses_foreign_format_version(smoke_run, tmp_path):
    import shutil

    root, _, _ = smoke_run
    run = tmp_path / "copy"
    shutil.copytree(root / "run" / "stage1", run / "stage1")
    shutil.copytree(root / "run" / "stage2", run / "stage2")
    mf = run / "stage2" / "manifest.json"
    manifest = json.loads(mf.read_text())
    manifest["format_version"] = 99
    mf.write_text(json.dumps(manifest))
    cfg = write_config(tmp_path / "c.json", run)
    assert main(["generate", "--config", cfg, "--joint", "--n", "2"]) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"kind": "nope"}}))
    assert main(["train-stage1", "--config", str(bad)]) == 2
    assert main(["train-stage1", "--config", str(tmp_path / "missing.json")]) == 2


def test_evaluate_tables_and_determinism(smoke_run, tmp_path):
    root, _, _ = smoke_run
    cfg = write_config(tmp_path / "c.json", root / "run",
                       eval={"baselines": {"ghost": str(tmp_path / "nowhere")}})
    assert main(["evaluate", "--config", cfg]) == 0
    first = (root / "run" / "eval" / "metrics.jsonl").read_bytes()
    assert main(["evaluate", "--config", cfg]) == 0
    assert (root / "run" / "eval" / "metrics.jsonl").read_bytes() == first
    records = {r.name: r.value for r in read_records(root / "run" / "eval" / "metrics.jsonl")}
    assert records["ground_truth/joint_coherence"] >= 0.99
    assert "cross-seed0/label_agreement" in records
    table = (root / "run" / "eval" / "table.csv").read_text().splitlines()
    assert table[0] == "metric,this_run,ghost"
    assert all(line.endswith(",absent") for line in table[1:])
    manifest = json.loads((root / "run" / "eval" / "manifest.json").read_text())
    assert {t["file"] for t in manifest["tables"]} == {"table.txt", "table.csv"}


def test_evaluate_reads_existing_baseline(smoke_run, tmp_path):
    root, _, _ = smoke_run
    base = tmp_path / "base"
    (base / "eval").mkdir(parents=True)
    (base / "eval" / "metrics.jsonl").write_text(
        json.dumps({"name": "ground_truth/joint_coherence", "value": 0.5, "n": 10, "config_digest": "",
                    "seed": 0, "estimator": ""}) + "\n")
    cfg = write_config(tmp_path / "c.json", root / "run", eval={"baselines": {"base": str(base)}})
    assert main(["evaluate", "--config", cfg]) == 0
    rows = {l.split(",")[0]: l.split(",")[1:] for l in (root / "run" / "eval" / "table.csv").read_text().splitlines()}
    assert rows["ground_truth/joint_coherence"][1] == "0.5"


def test_evaluate_classifier_gate_failure_exits_3(smoke_run, tmp_path):
    import shutil

    root, _, _ = smoke_run
    run = tmp_path / "run"
    shutil.copytree(root / "run" / "stage1", run / "stage1")
    cfg = write_config(tmp_path / "c.json", run, eval={"classifier_gate": 1.01, "classifier_iterations": 20})
    assert main(["evaluate", "--config", cfg]) == 3


def test_unknown_suite_lists_suites():
    proc = subprocess.run([sys.executable, "-m", "sharedlatent", "reproduce", "nosuch"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    for name in ("oracle", "prior2d", "glyphs", "multiview", "ablations"):
        assert name in proc.stderr


def test_output_root_env(tmp_path, monkeypatch):
    from sharedlatent.config import OUTPUT_ROOT_ENV

    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = tmp_path / "c.json"
    data = json.loads(json.dumps(SMOKE))
    data["stage1"]["iterations"] = 2
    data["output_dir"] = "rel"
    cfg.write_text(json.dumps(data))
    assert main(["train-stage1", "--config", str(cfg)]) == 0
    assert (tmp_path / "rel" / "stage1" / "manifest.json").exists()
