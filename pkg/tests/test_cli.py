import filecmp
import json
import os
from pathlib import Path

import numpy as np
import pytest

from vanreid.cli import main
from vanreid.io import load_checkpoint
from vanreid.pipeline import LOSS_CSV_HEADER

TINY = [
    "--set", "data.num_identities=4",
    "--set", "data.images_per_identity=6",
    "--set", "data.num_cameras=4",
    "--set", "data.height=32", "--set", "data.width=16",
    "--set", "data.texture_size=32",
    "--set", "data.gallery_train_per_id=1",
    "--set", "data.query_per_id=1",
    "--set", "model.stage_channels=[8,16]",
    "--set", "model.heads=2",
    "--set", "model.fusion_stages=[2]",
    "--set", "texture.steps=2",
    "--set", "texture.size=32",
    "--set", "train.epochs=1",
    "--set", "train.p_identities=2",
    "--set", "train.k_instances=2",
    "--seed", "5",
]


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["gen-data", "--out", str(out)] + TINY) == 0
    return out


def test_gen_data_twice_identical_trees(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--out", str(a)] + TINY) == 0
    assert main(["gen-data", "--out", str(b)] + TINY) == 0
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert set(ta) == set(tb)
    assert all(ta[k] == tb[k] for k in ta)


def test_gen_data_layout(run_dir):
    assert (run_dir / "manifest.json").is_file()
    assert (run_dir / "config.json").is_file()
    images = list((run_dir / "images").glob("*.png"))
    assert len(images) == 4 * 6
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["format"] == "vanreid-manifest"
    assert manifest["split"]["train"]


def test_train_epochs_zero_writes_untrained_checkpoint(run_dir):
    assert main(["train", "--out", str(run_dir), "--epochs", "0"] + TINY) == 0
    csv = (run_dir / "metrics" / "train_loss.csv").read_text().splitlines()
    assert csv == [LOSS_CSV_HEADER]
    state = load_checkpoint(run_dir / "checkpoints" / "model.van")
    assert state  # parameter tensors present before any step


def test_train_then_eval_metrics(run_dir, capsys):
    assert main(["train", "--out", str(run_dir)] + TINY) == 0
    csv = (run_dir / "metrics" / "train_loss.csv").read_text().splitlines()
    assert csv[0] == LOSS_CSV_HEADER
    assert len(csv) > 1
    row = csv[1].split(",")
    assert len(row) == len(LOSS_CSV_HEADER.split(","))
    total = float(row[-2])
    parts = [float(x) for x in row[2:-2]]
    assert total == pytest.approx(sum(parts), abs=1e-9)

    capsys.readouterr()
    assert main(["eval", "--out", str(run_dir)] + TINY) == 0
    shown = capsys.readouterr().out
    lines = (run_dir / "metrics" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "metric,value"
    names = [ln.split(",")[0] for ln in lines[1:]]
    assert names[:2] == ["map", "cmc1"]
    assert "cmc10" in names and "num_skipped_queries" in names
    for ln in lines[1:]:
        assert ln in shown
    desc = load_checkpoint(run_dir / "metrics" / "descriptors.van")
    assert desc["query"].shape[1] == desc["gallery"].shape[1]
    assert desc["query"].shape[0] == len(desc["query_ids"])


def test_eval_deterministic(run_dir, tmp_path):
    first = (run_dir / "metrics" / "metrics.csv").read_bytes()
    assert main(["eval", "--out", str(run_dir)] + TINY) == 0
    assert (run_dir / "metrics" / "metrics.csv").read_bytes() == first


def test_render_writes_four_views(run_dir, capsys):
    assert main(["render", "--out", str(run_dir), "--sample", "3"] + TINY) == 0
    out = capsys.readouterr().out
    for view in ("forward", "backward", "left", "right"):
        path = run_dir / "renders" / f"00003_{view}.png"
        assert path.is_file()
        assert str(path) in out
    assert main(["render", "--out", str(run_dir), "--sample", "999"] + TINY) == 1


def test_eval_without_checkpoint_fails(tmp_path, capsys):
    out = tmp_path / "fresh"
    assert main(["gen-data", "--out", str(out)] + TINY) == 0
    assert main(["eval", "--out", str(out)] + TINY) == 1
    assert "error" in capsys.readouterr().err


def test_train_without_corpus_fails(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "empty")] + TINY) == 1
    assert "gen-data" in capsys.readouterr().err


def test_config_errors_exit_two(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"),
                 "--set", "data.nope=3"]) == 2
    assert "unknown key 'data.nope'" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path / "x"),
                 "--set", "train.epochs=soon"]) == 2
    assert "train.epochs" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "no.json"),
                 "--out", str(tmp_path / "x")]) == 2


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("VAN_THREADS", "junk")
    assert main(["gen-data", "--out", str(tmp_path / "x")] + TINY) == 2
    monkeypatch.setenv("VAN_THREADS", "2")
    assert main(["gen-data", "--out", str(tmp_path / "y")] + TINY) == 0
    monkeypatch.delenv("VAN_THREADS")
    a = tmp_path / "y"
    b = tmp_path / "z"
    assert main(["gen-data", "--out", str(b), "--threads", "1"] + TINY) == 0
    ta, tb = tree_bytes(a), tree_bytes(b)
    ta.pop("config.json"), tb.pop("config.json")
    assert ta == tb


def test_check_fast(capsys):
    assert main(["check", "--fast"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert "FAIL" not in out
