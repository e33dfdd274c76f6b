import csv
import json

import pytest

from hclrec.cli import main
from hclrec.experiments import ExperimentSpec, UsageError, apply_flags, constrained_grid, sweep_cells
from hclrec.model import load_checkpoint
from hclrec.synthetic import bundled_path
from hclrec.train import TrainConfig

TINY = ["epochs=2", "warmup_epochs=1", "d=8", "layers=1", "max_len=10", "batch_size=100"]


def train(out, *extra, env_seed=None, monkeypatch=None):
    if monkeypatch is not None and env_seed is not None:
        monkeypatch.setenv("HCLREC_SEED", str(env_seed))
    return main(["train", "--data", "synthetic", "--out", str(out), "--override", *TINY, *extra])


def test_preprocess_writes_split(tmp_path, capsys):
    assert main(["preprocess", "--input", str(bundled_path()), "--format", "tsv",
                 "--out", str(tmp_path)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["users"] == 200 and stats["items"] == 50
    assert (tmp_path / "sequences.jsonl").exists()


def test_usage_and_data_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["train", "--data", "synthetic", "--override", "bogus=1", "--out", str(tmp_path)]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("u\ti\n")
    assert main(["preprocess", "--input", str(bad), "--format", "tsv", "--out", str(tmp_path)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path):
    assert train(tmp_path, "learning_rate=1e30") == 3
    assert (tmp_path / "nonfinite_batch.json").exists()


def test_train_then_eval_with_and_without_blocks(tmp_path, capsys):
    assert train(tmp_path / "run") == 0
    header = json.loads((tmp_path / "run" / "run.json").read_text())
    assert set(header) >= {"config", "seed", "dataset_sha256"}
    assert (tmp_path / "run" / "test_report.json").exists()
    capsys.readouterr()
    ckpt = str(tmp_path / "run" / "best.npz")
    assert main(["eval", "--checkpoint", ckpt, "--data", "synthetic", "--out", str(tmp_path / "e1")]) == 0
    full = json.loads(capsys.readouterr().out)
    assert main(["eval", "--checkpoint", ckpt, "--data", "synthetic", "--no-blocks"]) == 0
    assert json.loads(capsys.readouterr().out) == full
    assert main(["eval", "--checkpoint", ckpt, "--data", "synthetic", "--cohort-threshold", "8"]) == 0
    cohorts = json.loads(capsys.readouterr().out)
    assert set(cohorts) == {"short", "long"}
    assert cohorts["short"]["users"] + cohorts["long"]["users"] == full["all"]["users"]


def test_rerun_from_written_config_is_identical(tmp_path):
    assert train(tmp_path / "a") == 0
    assert main(["train", "--data", "synthetic", "--out", str(tmp_path / "b"),
                 "--config", str(tmp_path / "a" / "run.json")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_env_seed_overrides(tmp_path, monkeypatch):
    assert train(tmp_path, env_seed=7, monkeypatch=monkeypatch) == 0
    assert json.loads((tmp_path / "run.json").read_text())["seed"] == 7


def test_no_blocks_variant_allocates_no_blocks(tmp_path):
    assert train(tmp_path, "--variant", "no_blocks") == 0
    model, header = load_checkpoint(tmp_path / "last.npz")
    assert header["n_blocks"] == 0 and model.n_blocks == 0
    assert main(["train", "--data", "synthetic", "--out", str(tmp_path / "x"), "--variant", "wings"]) == 1


def test_ablation_table(tmp_path, capsys):
    code = main(["ablate", "--data", "synthetic", "--out", str(tmp_path), "--override", *TINY,
                 "--variants", "full,no_warmup,no_blocks+flat_aug"])
    assert code == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert table[0] == "| Model | synthetic Hit@10 | synthetic NDCG@10 |"
    assert len(table) == 5
    first = {}
    for name in ("full", "no_warmup"):
        with open(tmp_path / "synthetic" / name / "metrics.csv") as fh:
            first[name] = next(csv.DictReader(fh))
    assert float(first["full"]["l_cl_1"]) == 0.0
    assert float(first["no_warmup"]["l_cl_1"]) > 0.0


def test_sweep_rejects_variants_and_budget(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"axes": {"d": [8, 16, 24]}, "budget": 2}))
    base = ["sweep", "--data", "synthetic", "--grid", str(grid), "--out", str(tmp_path)]
    assert main(base + ["--variants", "no_blocks"]) == 1
    assert main(base) == 1


def test_sweep_batch_grid_rows_and_plots(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"axes": {"batch_size": [64, 128, 256, 512]}}))
    assert main(["sweep", "--data", "synthetic", "--grid", str(grid), "--out", str(tmp_path / "s"),
                 "--override", *TINY[:-1]]) == 0
    with open(tmp_path / "s" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["batch_size"]) for r in rows] == [64, 128, 256, 512]
    assert (tmp_path / "s" / "sweep_batch_size.png").stat().st_size > 0


def test_constrained_lambda_grid_has_single_cell():
    assert constrained_grid([0.05, 0.075, 0.1], 3) == [(0.1, 0.075, 0.05)]
    taus = constrained_grid([1.0, 1.25, 1.5, 1.75, 2.0], 3, order="ascending")
    assert (1.0, 1.5, 2.0) in taus and all(a < b < c for a, b, c in taus)
    assert len(sweep_cells({"d": [32, 64, 128]}, "per_axis")) == 3
    assert len(sweep_cells({"d": [32, 64], "batch_size": [1, 2, 3]}, "cartesian")) == 6


def test_experiment_spec_validation():
    with pytest.raises(UsageError):
        ExperimentSpec("sweep", grids={})
    with pytest.raises(UsageError):
        ExperimentSpec("sweep", grids={"d": [8]}, variants=[("no_blocks",)])
    with pytest.raises(UsageError):
        ExperimentSpec("sweep", grids={"dropout": [0.1]})
    with pytest.raises(UsageError):
        ExperimentSpec("deploy")
    ExperimentSpec("ablate", variants=[("no_blocks", "flat_aug", "no_warmup")])
    cfg = apply_flags(TrainConfig(), ("coserec_mode", "no_warmup"))
    assert cfg.max_level == 1 and cfg.lambdas == (0.1,) and cfg.warmup_epochs == 0
