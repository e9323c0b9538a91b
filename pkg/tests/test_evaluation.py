import numpy as np
import pytest

from osaa.data import DomainDataset
from osaa.evaluation import (SWEEP_COLUMNS, cell_seed, evaluate, keep_portion_cells, loss_weight_cells, predict,
                             prepare_domains, read_sweep_csv, run_one, sweep_keep_portion, sweep_loss_weights)
from osaa.networks import OSAANetworks
from osaa.trainer import ConfigError

from helpers import tiny_config, tiny_domains


def test_predict_matches_manual_composition():
    nets = OSAANetworks(96, 3, channels=4, feature_dim=8, hidden=8)
    ds = DomainDataset(np.random.default_rng(0).standard_normal((7, 96)), np.zeros(7, int), 3)
    from osaa.autodiff import Tensor
    nets.eval()
    h, _ = nets.encoder(Tensor(ds.signals[:, None]))
    manual = nets.classifier(h).data.argmax(axis=1)
    np.testing.assert_array_equal(predict(nets, ds), manual)
    np.testing.assert_array_equal(predict(nets, ds), predict(nets, ds))


def test_predict_is_per_sample():
    nets = OSAANetworks(96, 3, channels=4, feature_dim=8, hidden=8)
    rng = np.random.default_rng(1)
    ds = DomainDataset(rng.standard_normal((9, 96)), np.zeros(9, int), 3)
    perm = rng.permutation(9)
    np.testing.assert_array_equal(predict(nets, ds)[perm], predict(nets, ds.subset(perm)))


def test_zero_weight_network_predicts_class_zero():
    nets = OSAANetworks(96, 4, channels=4, feature_dim=8, hidden=8)
    for _, p in nets.named_parameters():
        p.data[...] = 0
    ds = DomainDataset(np.random.default_rng(0).standard_normal((5, 96)), np.zeros(5, int), 4)
    np.testing.assert_array_equal(predict(nets, ds), 0)


def test_predict_length_mismatch_names_both_lengths():
    nets = OSAANetworks(96, 3, channels=4, feature_dim=8, hidden=8)
    ds = DomainDataset(np.zeros((2, 128)), np.zeros(2, int), 3)
    with pytest.raises(ValueError, match=r"m=128.*m=96"):
        predict(nets, ds)


def test_prepare_domains_standardises_and_hides_target_labels():
    s, t = tiny_domains(n=60, m=96)
    cfg = tiny_config()
    src, t_train, t_test, stats = prepare_domains(s, t, cfg)
    assert not t_train.labeled and t_test.labeled
    assert t_train.n + t_test.n == t.n
    assert abs(float(src.signals.mean())) < 1e-5 and abs(float(src.signals.std()) - 1) < 1e-4
    assert abs(float(t_train.signals.mean())) < 1e-5


def test_cell_seed_depends_on_coordinates_only():
    a = cell_seed(0, {"axis": "keep", "keep_source": 50.0})
    assert a == cell_seed(0, {"keep_source": 50.0, "axis": "keep"})
    assert a != cell_seed(1, {"axis": "keep", "keep_source": 50.0})
    assert a != cell_seed(0, {"axis": "keep", "keep_source": 50.0}, replicate=1)


def test_grid_cell_counts():
    assert len(keep_portion_cells([0, 100], [0, 100])) == 4
    cells = loss_weight_cells([0.03, 0.3, 3, 30], [0.03, 0.3, 3, 30])
    assert [c.axis for c in cells].count("lambda1") == 4
    assert all(dict(c.overrides)["lambda2"] == 0.3 for c in cells if c.axis == "lambda1")
    assert all(dict(c.overrides)["lambda1"] == 1.0 for c in cells if c.axis == "lambda2")


@pytest.fixture(scope="module")
def small_world():
    s, t = tiny_domains(n=60, m=96)
    return s, t, tiny_config(epochs=1, precision="float32")


def test_keep_sweep_rows_and_resume(tmp_path, small_world):
    s, t, cfg = small_world
    path = tmp_path / "sweep.csv"
    rows = sweep_keep_portion([50, 100], [50, 100], cfg, s, t, csv_path=path)
    assert len(rows) == 4
    assert all(r["status"] == "ok" for r in rows)
    assert {r["config_hash"] for r in rows} == {c.config(cfg).config_hash() for c in keep_portion_cells(
        [50, 100], [50, 100])}
    on_disk = read_sweep_csv(path)
    assert len(on_disk) == 4 and tuple(on_disk[0]) == SWEEP_COLUMNS
    # drop the last row as if interrupted; the rerun computes only that cell
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    calls = []
    again = sweep_keep_portion([50, 100], [50, 100], cfg, s, t, csv_path=path, progress=calls.append)
    assert len(calls) == 1
    assert again == rows


def test_weights_sweep_records_divergence_without_aborting(tmp_path, small_world):
    s, t, cfg = small_world
    # 1e39 overflows a float32 objective
    rows = sweep_loss_weights([0.0, 1e39], [0.3], cfg, s, t, csv_path=tmp_path / "w.csv")
    assert [r["axis"] for r in rows] == ["lambda1", "lambda1", "lambda2"]
    assert rows[0]["status"] == "ok"  # lambda1 = 0 trains without task supervision
    assert rows[1]["status"].startswith("diverged") and "at step" in rows[1]["status"]
    assert rows[2]["status"] == "ok"


def test_keep_sweep_needs_selection(small_world):
    s, t, cfg = small_world
    from dataclasses import replace
    with pytest.raises(ConfigError):
        sweep_keep_portion([50], [50], replace(cfg, ablate=("selection",)), s, t)


def test_run_one_source_only_and_osaa(small_world):
    s, t, cfg = small_world
    for mode in ("osaa", "source-only"):
        res = run_one(cfg, s, t, mode)
        assert len(res.metrics.epoch_f1) == 1
        assert res.metrics.epoch_f1[-1] == res.metrics.macro_f1
    with pytest.raises(ConfigError):
        run_one(cfg, s, t, "dann")
