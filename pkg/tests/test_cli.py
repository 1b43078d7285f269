import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from auxnet import config as C
from auxnet.checkpoint import load_checkpoint
from auxnet.cli import main
from auxnet.data import DataSpec, load_dataset, write_idx
from auxnet.inference import evaluate_heads
from auxnet.instrumentation import read_ratio_csv

TINY = {
    "model": {"depth": 4, "stage_channels": [6], "kernel_size": 1, "dtype": "float64"},
    "heads": {"positions": [2, 4], "min_position": 1},
    "data": {"source": "synthetic", "samples": 150, "classes": 3, "noise": 0.1, "seed": 2},
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.05, "ratio_samples": 20},
}


def write_config(tmp_path, doc=TINY):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d)
    assert main(["train", "--config", cfg, "--out-dir", str(d / "out"), "--seed", "1"]) == 0
    return d / "out"


def without_seconds(path):
    rows = list(csv.reader(open(path)))
    cut = rows[0].index("seconds")
    return [r[:cut] + r[cut + 1:] for r in rows]


def test_train_outputs(trained):
    assert {"metrics.csv", "model.ckpt", "ratios.csv", "resolved_config.json"} <= set(os.listdir(trained))
    rows = list(csv.reader(open(trained / "metrics.csv")))
    assert len(rows) == 3 and rows[1][1] == "multipath"
    doc = json.loads((trained / "resolved_config.json").read_text())
    assert doc["train"]["seed"] == 1 and doc["data"]["mean"] is not None
    ratios = read_ratio_csv(str(trained / "ratios.csv"))
    # trained strategy every epoch, the other three at the last one
    assert len(ratios) == 4 * (2 + 3)
    assert {s for e, s, _, _ in ratios if e == 2} == {"plain", "joint", "pairwise", "multipath"}


def test_train_replay_deterministic(trained, tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "b"), "--seed", "1"]) == 0
    assert without_seconds(trained / "metrics.csv") == without_seconds(tmp_path / "b" / "metrics.csv")
    assert (trained / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_eval_matches_evaluate_heads(trained, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--out-dir", str(tmp_path)]) == 0
    out = json.loads((tmp_path / "eval.json").read_text())
    model, doc = load_checkpoint(str(trained / "model.ckpt"), with_document=True)
    _, (x, y) = load_dataset(DataSpec(**doc["data"]))
    ev = evaluate_heads(model, x, y)
    assert out["head_errors"] == ev.head_errors and out["safe_error"] == ev.safe_error
    assert "safe prediction error" in capsys.readouterr().out


def test_eval_on_idx_file(trained, tmp_path, capsys):
    model, doc = load_checkpoint(str(trained / "model.ckpt"), with_document=True)
    spec = DataSpec(**doc["data"])
    from auxnet.data import load_raw
    _, (xr, y) = load_raw(spec)
    write_idx(str(tmp_path / "test.idx"), xr[:, :, 0, 0].astype(np.float64))
    write_idx(str(tmp_path / "test-labels.idx"), y.astype(np.uint8))
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(tmp_path / "test.idx"),
                 "--out-dir", str(tmp_path)]) == 0
    _, (x, _) = load_dataset(spec)
    assert json.loads((tmp_path / "eval.json").read_text())["head_errors"] == evaluate_heads(model, x, y).head_errors


@pytest.mark.parametrize("flags", [[], ["--safe"], ["--entropy-threshold", "0.5"]])
def test_predict_json_lines(trained, capsys, flags):
    assert main(["predict", "--checkpoint", str(trained / "model.ckpt"), *flags]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == round(0.25 * 150)
    recs = [json.loads(l) for l in lines]
    assert [r["sample_id"] for r in recs] == list(range(len(recs)))
    assert all(1 <= r["chosen_head"] <= 2 and len(r["per_head"]) == 2 for r in recs)
    if not flags:
        assert all(r["chosen_head"] == 2 for r in recs)


def test_predict_modes_exclusive(trained):
    with pytest.raises(SystemExit) as e:
        main(["predict", "--checkpoint", str(trained / "model.ckpt"), "--safe", "--entropy-threshold", "1"])
    assert e.value.code == 2


def test_inspect_ratio(trained, tmp_path, capsys):
    assert main(["inspect-ratio", "--checkpoint", str(trained / "model.ckpt"), "--strategy", "plain,multipath",
                 "--out-dir", str(tmp_path), "--samples", "16"]) == 0
    rows = read_ratio_csv(str(tmp_path / "ratios.csv"))
    assert len(rows) == 2 * 4 and {r[1] for r in rows} == {"plain", "multipath"}
    assert all(r[0] == 2 for r in rows)


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--shapes", "3", "--kernel", "fullyconnected", "--kernel", "relu"]) == 0
    assert "all kernels pass" in capsys.readouterr().out


def test_gradcheck_failure_exit_code(capsys):
    assert main(["gradcheck", "--shapes", "2", "--kernel", "fullyconnected", "--tolerance", "0"]) == 1


def test_missing_config_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--config", str(tmp_path / "nope.json")])
    assert e.value.code == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["fit"])
    assert e.value.code == 2


def test_bad_checkpoint_reports_error(tmp_path, capsys):
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt")]) == 1
    assert "magic" in capsys.readouterr().err


def test_bad_config_key_reports_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {**TINY, "train": {"momentum_typo": 1}})
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path)]) == 1
    assert "unknown train config keys" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "auxnet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "eval", "predict", "inspect-ratio", "gradcheck"):
        assert cmd in r.stdout


def test_resolved_config_round_trips(trained):
    doc = json.loads((trained / "resolved_config.json").read_text())
    assert C.resolve(doc) == doc
