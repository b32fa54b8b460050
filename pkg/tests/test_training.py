import json
import math

import numpy as np
import pytest
import torch

from stas.baselines import LinearBaseline, MLPBaseline, crop_features, run_baseline
from stas.config import ConfigError, NumericalError
from stas.data import SampleSet
from stas.training import (STAS, check_capacity, check_compatible, compute_plans, fit,
                           load_checkpoint, predict, pretrain_sfm, pretrain_tfm, save_checkpoint,
                           station_plan_table)

from conftest import tiny_train_config


@pytest.fixture(scope="module")
def trained(tiny_splits):
    return fit(tiny_splits, tiny_train_config(seed=1))


def _strip_time(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    return [{k: v for k, v in r.items() if k != "time"} for r in rows]


def test_fit_smoke_emits_history(trained):
    assert len(trained.history) == 2
    for rec in trained.history:
        assert rec["split"] == "val"
        assert all(math.isfinite(rec[k]) for k in ("loss", "ord_loss", "rec_loss", "tfm_loss"))
        assert rec["test_lag"] in (1, 2, 3, 4)
    assert 1 <= trained.best_epoch <= 2
    assert trained.sfm_history and trained.tfm_history


def test_predict_contracts(trained, tiny_splits):
    test = tiny_splits["test"].normalized()
    records = predict(trained.model, test)
    assert len(records) == len(test)
    for r in records:
        assert r.y_rc in (0.0, 1.0)
        assert r.y_t == r.y_tp * r.y_rc
        assert r.y_t >= 0 and (2 * r.y_t).is_integer()
        if r.y_rc == 0:
            assert r.y_t == 0


def test_predict_is_deterministic(trained, tiny_splits):
    test = tiny_splits["test"].normalized()
    assert predict(trained.model, test) == predict(trained.model, test)


def test_checkpoint_round_trip(trained, tiny_splits, tmp_path):
    save_checkpoint(tmp_path / "ckpt", trained)
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert manifest["head_ready"] and len(manifest["history"]) == 2
    back = load_checkpoint(tmp_path / "ckpt")
    val = tiny_splits["val"].normalized()
    assert predict(back, val) == predict(trained.model, val)
    assert back.test_lag == trained.model.test_lag
    assert back.test_plan == trained.model.test_plan


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")


def test_config_hash_mismatch(trained, tiny_splits):
    other = tiny_train_config(latent_size=5)
    with pytest.raises(ConfigError, match="hash"):
        check_compatible(trained.model, tiny_splits["test"].normalized(), other)


def test_dataset_mismatch(trained, tiny_splits):
    test = tiny_splits["test"].normalized()
    meta = {**test.meta, "scale_ladder": [7, 3]}
    with pytest.raises(ConfigError, match="scale_ladder"):
        check_compatible(trained.model, SampleSet(test.fields, test.labels, test.station_ids,
                                                  test.timestamps, meta))


def test_identical_seeds_give_identical_history(tiny_splits, tmp_path):
    cfg = tiny_train_config(seed=4, epochs=1)
    fit(tiny_splits, cfg, history_path=tmp_path / "a.jsonl")
    fit(tiny_splits, cfg, history_path=tmp_path / "b.jsonl")
    assert _strip_time(tmp_path / "a.jsonl") == _strip_time(tmp_path / "b.jsonl")


def test_sfm_off_uses_largest_scale(tiny_splits):
    cfg = tiny_train_config(use_sfm=False, epochs=1, tfm_epochs=0)
    seen = []
    result = fit(tiny_splits, cfg, callback=lambda info: seen.append(info["plan"]))
    assert result.sfm_history == []
    assert all(np.all(p == 7) for p in seen)
    assert result.model.test_plan == {}


def test_tfm_off_uses_longest_lag(tiny_splits):
    cfg = tiny_train_config(use_tfm=False, epochs=1, sfm_epochs=0)
    lags = []
    fit(tiny_splits, cfg, callback=lambda info: lags.append(info["lag"]))
    assert set(lags) == {4}


def test_station_plan_table_is_modal():
    plans = np.array([[7, 3], [5, 3], [7, 5], [3, 3]])
    table = station_plan_table(plans, ["A", "A", "A", "B"])
    assert table == {"A": [7, 3], "B": [3, 3]}


def test_pretraining_losses_decrease(tiny_splits):
    cfg = tiny_train_config(sfm_epochs=6, tfm_epochs=6, seed=2)
    train = tiny_splits["train"].normalized()
    torch.manual_seed(cfg.seed)
    model = STAS(cfg, train.meta)
    sfm = pretrain_sfm(model, train, cfg)
    assert sfm[-1]["train_loss"] < sfm[0]["train_loss"]
    plans, _ = compute_plans(model, train, cfg)
    tfm = pretrain_tfm(model, train, cfg, plans)
    assert tfm[-1]["train_loss"] < tfm[0]["train_loss"]


def test_pretrain_sfm_is_repeatable(tiny_splits):
    cfg = tiny_train_config(sfm_epochs=2, seed=6)
    train = tiny_splits["train"].normalized()
    curves = []
    for _ in range(2):
        torch.manual_seed(cfg.seed)
        curves.append([h["train_loss"] for h in pretrain_sfm(STAS(cfg, train.meta), train, cfg)])
    assert curves[0] == curves[1]


def test_non_finite_input_aborts(tiny_splits):
    train = tiny_splits["train"]
    fields = train.fields.copy()
    fields[0, 0, 0, 0, 0] = np.inf
    broken = dict(tiny_splits, train=SampleSet(fields, train.labels, train.station_ids,
                                               train.timestamps, train.meta))
    with pytest.raises(NumericalError, match="non-finite"):
        fit(broken, tiny_train_config())


def test_ordinal_capacity_check(tiny_splits):
    with pytest.raises(ConfigError, match="n_ordinal"):
        check_capacity(tiny_splits["train"], tiny_train_config(n_ordinal=1, xi=0.01))


def test_linear_baseline_recovers_exact_coefficients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4)) * [1, 10, 100, 0.1] + [0, 5, -50, 2]
    w, b = np.array([0.5, -0.2, 0.03, 4.0]), 1.7
    y = x @ w + b
    model = LinearBaseline().fit(x, y)
    np.testing.assert_allclose(model.predict(x), y, atol=1e-9)
    np.testing.assert_allclose(model.coef[:4] / model.std, w, rtol=1e-9)


def test_linear_baseline_singular_falls_back_to_ridge():
    x = np.ones((10, 2))
    x[:, 1] = np.arange(10)
    x = np.hstack([x, x[:, 1:] * 2])
    with pytest.warns(RuntimeWarning, match="ridge"):
        LinearBaseline().fit(x, x[:, 1])


def test_mlp_loss_decreases_over_five_epochs(tiny_splits):
    train = tiny_splits["train"]
    model = MLPBaseline(epochs=5, patience=100, seed=0).fit(crop_features(train), train.labels[:, 0])
    assert len(model.losses) == 5
    assert model.losses[-1] < model.losses[0]


def test_mlp_fits_a_nonlinear_target():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(300, 3))
    y = np.sin(x[:, 0]) + x[:, 1] ** 2
    model = MLPBaseline(epochs=30, patience=100, seed=0).fit(x, y)
    assert model.losses[-1] < 0.5 * model.losses[0]


def test_run_baseline_records(tiny_splits):
    train, test = tiny_splits["train"], tiny_splits["test"]
    recs = run_baseline("LR", train, test)
    assert len(recs) == len(test)
    assert all(r.y_t >= 0 and r.y_rc == 1.0 for r in recs)
    assert crop_features(test).shape == (len(test), test.fields.shape[1])
    with pytest.raises(ValueError, match="unknown baseline"):
        run_baseline("GBM", train, test)
