import csv
import json

import numpy as np
import pytest

from osaa.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, parse_grid
from osaa.trainer import ConfigError

SMALL_SPEC = {"length": 96, "n_per_domain": 60}
TINY_FLAGS = ["--channels", "4", "--feature-dim", "8", "--hidden", "8", "--batch-size", "6", "--epochs", "1",
              "--quiet"]


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SMALL_SPEC))
    assert main(["gen", "--spec", str(root / "spec.json"), "--seed", "3", "--out", str(root / "data")]) == EXIT_OK
    return root


def test_gen_is_deterministic(world, tmp_path):
    assert main(["gen", "--spec", str(world / "spec.json"), "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK
    for d in ("source", "target"):
        assert (tmp_path / d / "signals.bin").read_bytes() == (world / "data" / d / "signals.bin").read_bytes()
        assert (tmp_path / d / "labels.bin").read_bytes() == (world / "data" / d / "labels.bin").read_bytes()


def test_gen_rejects_bad_fraction(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({**SMALL_SPEC, "distant_fraction": 1.5}))
    assert main(["gen", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "distant_fraction" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def _train(world, out, *extra):
    return main(["train", "--source", str(world / "data" / "source"), "--target", str(world / "data" / "target"),
                 "--seeds", "2", "--out", str(out), *TINY_FLAGS, *extra])


def test_train_eval_replay_round_trip(world, tmp_path):
    out = tmp_path / "run"
    assert _train(world, out, "--mask-trace") == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1] and manifest["config"]["channels"] == 4
    results = json.loads((out / "results.json").read_text())
    assert len(results["per_seed_f1"]) == 2
    assert (out / "seed_1" / "masks.jsonl").read_text().count("\n") > 0

    assert main(["eval", "--checkpoint", str(out / "seed_1" / "checkpoint.osaa"),
                 "--data", str(out / "data" / "target_test"), "--out", str(tmp_path / "eval.json")]) == EXIT_OK
    assert json.loads((tmp_path / "eval.json").read_text())["macro_f1"] == results["per_seed_f1"][1]

    again = tmp_path / "replay"
    assert main(["replay", "--manifest", str(out / "manifest.json"), "--out", str(again), "--quiet"]) == EXIT_OK
    assert (again / "results.json").read_bytes() == (out / "results.json").read_bytes()
    for s in (0, 1):
        ckpt = f"seed_{s}/checkpoint.osaa"
        assert (again / ckpt).read_bytes() == (out / ckpt).read_bytes()


def test_source_only_mode(world, tmp_path):
    assert _train(world, tmp_path / "so", "--mode", "source-only") == EXIT_OK
    assert json.loads((tmp_path / "so" / "results.json").read_text())["mode"] == "source-only"


def test_exit_codes(world, tmp_path, capsys):
    assert main(["train", "--source", str(tmp_path / "nope"), "--target", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert _train(world, tmp_path / "o", "--lambda1", "-1") == EXIT_CONFIG
    (tmp_path / "cfg.json").write_text(json.dumps({"lamda1": 1}))
    assert _train(world, tmp_path / "o", "--config", str(tmp_path / "cfg.json")) == EXIT_CONFIG
    assert "lamda1" in capsys.readouterr().err
    assert main(["train", "--bogus"]) == EXIT_CONFIG


def test_out_defaults_to_env_root(world, tmp_path, monkeypatch):
    monkeypatch.setenv("OSAA_OUT", str(tmp_path / "env"))
    assert main(["gen", "--spec", str(world / "spec.json")]) == EXIT_OK
    assert (tmp_path / "env" / "gen" / "source" / "meta.json").is_file()
    monkeypatch.delenv("OSAA_OUT")
    assert main(["gen", "--spec", str(world / "spec.json")]) == EXIT_CONFIG


def test_nothing_written_outside_out(world, tmp_path, monkeypatch):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    before = sorted(p.name for p in (world / "data").rglob("*"))
    assert _train(world, tmp_path / "run") == EXIT_OK
    assert list(cwd.iterdir()) == []
    assert sorted(p.name for p in (world / "data").rglob("*")) == before
    assert {p.name for p in tmp_path.iterdir()} == {"cwd", "run"}


def test_gradcheck_negative_control_fails(tmp_path, capsys):
    assert main(["gradcheck", "--scope", "losses", "--seeds", "1", "--negative-control",
                 "--out", str(tmp_path)]) == EXIT_CHECK
    out = capsys.readouterr().out
    assert "FAIL" in out and "PASS [losses] cross_entropy" in out
    assert main(["gradcheck", "--scope", "losses", "--seeds", "1"]) == EXIT_OK


def test_keep_grid_range_gives_25_cells(world, tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", "--axis", "keep", "--grid", "0:100:25", "--source", str(world / "data" / "source"),
            "--target", str(world / "data" / "target"), "--out", str(out), *TINY_FLAGS, "--epochs", "0"]
    assert main(args) == EXIT_OK
    with (out / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 25
    assert {(float(r["p_source"]), float(r["p_intermediate"])) for r in rows} == {
        (a, b) for a in (0, 25, 50, 75, 100) for b in (0, 25, 50, 75, 100)}
    assert main(args) == EXIT_OK  # resumed: nothing recomputed, nothing duplicated
    assert (out / "sweep.csv").read_text().count("\n") == 26


def test_keep_sweep_refuses_out_of_range_grid(world, tmp_path):
    assert main(["sweep", "--axis", "keep", "--grid", "50,150", "--source", str(world / "data" / "source"),
                 "--target", str(world / "data" / "target"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_parse_grid():
    assert parse_grid("0:100:25") == [0, 25, 50, 75, 100]
    assert parse_grid("0.03,0.3,3,30") == [0.03, 0.3, 3, 30]
    with pytest.raises(ConfigError):
        parse_grid("a,b")


def test_convert_documents_window_lengths(capsys):
    assert main(["convert"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "m=5120" in text and "m=1024" in text
