import csv
import json
import os

import numpy as np
import pytest

from promptreloc import cli
from promptreloc.checkpoint import load_arrays
from promptreloc.data import load_dataset
from promptreloc.prompts import read_history
from promptreloc.trainer import read_metrics

TASK = "synthetic:b=2,n_train=48,n_test=48"


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("PROMPT_RELOC_OUT", str(tmp_path))
    return tmp_path


def train(*extra, name="r"):
    return cli.main(["train", "--strategy", "provpt", "--seed", "0", "--epochs", "3", "--task", TASK,
                     "--name", name, *extra])


def test_train_writes_four_artifacts(out):
    assert train() == 0
    run = out / "r"
    assert sorted(os.listdir(run)) == ["checkpoint.pvpt", "distribution.jsonl", "manifest.json", "metrics.csv"]
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 0 and man["config"]["total_epochs"] == 3
    assert sum(man["timings"].values()) <= man["wall_time"]
    assert set(man["timings"]) == set(cli.PHASES)
    assert len(read_metrics(run / "metrics.csv")) == 3
    assert len(read_history(run / "distribution.jsonl")) == 3
    assert "prompts" in load_arrays(run / "checkpoint.pvpt")


def test_rerun_is_byte_identical(out):
    assert train(name="a") == 0 and train(name="b") == 0
    for f in ("metrics.csv", "distribution.jsonl", "checkpoint.pvpt"):
        assert (out / "a" / f).read_bytes() == (out / "b" / f).read_bytes()


@pytest.mark.parametrize("argv", [
    ["train", "--strategy", "greedy"],
    ["train", "--epochs", "x"],
    ["train", "--task", "imagenet:b=1"],
    ["train", "--set", "nonsense=1"],
    ["sweep", "--strategies", "provpt,nope"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_2(out, argv, capsys):
    assert cli.main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exits_1(out, capsys):
    # the run directory does not exist
    assert cli.main(["plot", str(out / "missing")]) == 1
    assert "failed" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# comment\nlearning_rate = 0.05\nprompts_total=18\nseed=4\n")
    file_vals = cli.read_config_file(str(cfg_file))
    cfg, task = cli.build_config(file_vals, {"prompts": 24, "epochs": None})
    assert (cfg.learning_rate, cfg.prompts_total, cfg.seed, cfg.total_epochs) == (0.05, 24, 4, 100)
    assert task == "synthetic:b=3"
    cfg, _ = cli.build_config({}, {})
    assert cfg.learning_rate == 0.1


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate 0.1\n")
    with pytest.raises(cli.UsageError, match=":1:"):
        cli.read_config_file(str(bad))


def test_parse_task():
    spec, seed = cli.parse_task("synthetic:b=4,L=5,seed=9")
    assert (spec.sensitive_block, spec.num_blocks, seed) == (4, 5, 9)
    with pytest.raises(cli.UsageError):
        cli.parse_task("synthetic:b=9")
    with pytest.raises(cli.UsageError):
        cli.parse_task("synthetic:colour=red")


def _sweep(*extra):
    return cli.main(["sweep", "--strategies", "provpt,vpt_deep", "--seeds", "0-2", "--epochs", "2",
                     "--task", TASK, "--name", "sw", *extra])


def test_sweep_rows_and_summary(out):
    assert _sweep() == 0
    with open(out / "sw" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert sorted((r["strategy"], int(r["seed"])) for r in rows) == \
        sorted((s, k) for s in ("provpt", "vpt_deep") for k in range(3))
    with open(out / "sw" / "summary_table.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["strategy", "runs", "median", "q25", "q75", "complete"]
    assert [r[-1] for r in table[1:]] == ["yes", "yes"]
    accs = [float(r["final_accuracy"]) for r in rows if r["strategy"] == "vpt_deep"]
    assert float(table[2][2]) == pytest.approx(np.median(accs), abs=1e-6)


def test_concurrent_sweep_matches_serial(out):
    assert _sweep("--jobs", "2") == 0
    par = sorted(csv.reader(open(out / "sw" / "summary.csv")))
    assert _sweep() == 0
    assert sorted(csv.reader(open(out / "sw" / "summary.csv"))) == par


def test_interrupted_sweep_flushes_partial_rows(out, monkeypatch):
    real = cli._sweep_job
    calls = []

    def job(*a):
        calls.append(1)
        if len(calls) == 3:
            raise KeyboardInterrupt
        return real(*a)

    monkeypatch.setattr(cli, "_sweep_job", job)
    assert _sweep() == 1
    with open(out / "sw" / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    with open(out / "sw" / "summary_table.csv") as fh:
        table = list(csv.reader(fh))
    assert [r[-1] for r in table[1:]] == ["no", "no"]


def test_plot_emits_figures(out, capsys):
    assert train(name="p") == 0
    assert cli.main(["plot", str(out / "p"), "--out", str(out / "figs"), "--images", "8"]) == 0
    assert sorted(os.listdir(out / "figs")) == ["accuracy.svg", "p-attention.svg", "p-distribution.svg"]


def test_plot_missing_artifact_exits_1(out):
    assert train(name="p") == 0
    os.remove(out / "p" / "checkpoint.pvpt")
    assert cli.main(["plot", str(out / "p")]) == 1


def test_checkpoint_attention_rows(out):
    assert train(name="p") == 0
    man = cli.RunManifest.load(str(out / "p" / "manifest.json"))
    M = cli.checkpoint_attention(man, load_arrays(man.artifacts["checkpoint"]), n_images=8)
    assert M.shape == (6, 12) and np.all(M.sum(axis=1) <= 1 + 1e-12)


def test_gen_data(out):
    assert cli.main(["gen-data", "--task", "synthetic:b=5,n_train=10,n_test=6", "--seed", "1",
                     "--weights", str(out / "w.pvpt")]) == 0
    ds = load_dataset(out / "data" / "synthetic-b5-seed1.pvds")
    assert len(ds) == 16 and len(ds.indices("test")) == 6
    assert "head.W" in load_arrays(out / "w.pvpt")


def test_manifest_rejects_missing_artifacts(tmp_path):
    man = cli.RunManifest({}, TASK, "v", 0, {"metrics": str(tmp_path / "nope.csv")}, {}, 1.0, 0.5)
    with pytest.raises(cli.ContractError):
        man.validate()
    man = cli.RunManifest({}, TASK, "v", 0, {}, {"tune": 2.0}, 1.0, 0.5)
    with pytest.raises(cli.ContractError):
        man.validate()


def test_verify_quick(capsys):
    assert cli.main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-1].endswith("checks passed")
    assert all(l.startswith(("PASS", "FAIL")) for l in lines[:-1])
