import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stas.config import ConfigError, GeneratorConfig
from stas.data import (GridFrame, StationGeometry, apply_normalization, build_samples,
                       channel_stats, crop_multiscale, generate_dataset, generate_synthetic,
                       load_dataset, make_lagged_sequence, max_mix_total, mix_ratio,
                       normalize_channels, partition_by_intensity, save_dataset, SampleSet)

from conftest import tiny_generator_config


def _station(row, col, sid="S000"):
    return StationGeometry(sid, 0.0, 0.0, row, col, 2)


def test_generator_is_deterministic():
    cfg = tiny_generator_config()
    a = generate_synthetic(cfg, 11)
    b = generate_synthetic(cfg, 11)
    assert all(np.array_equal(fa.values, fb.values) for fa, fb in zip(a[0], b[0]))
    assert a[1] == b[1]
    assert a[2] == b[2]


def test_zero_bias_zero_noise_labels_equal_grid():
    frames, stations, records = generate_synthetic(tiny_generator_config(bias=0.0, obs_noise=0.0), 5)
    by_key = {(r.station_id, r.timestamp): r for r in records}
    for frame in frames:
        for st_ in stations:
            rec = by_key[(st_.station_id, frame.timestamp)]
            assert rec.rain == pytest.approx(float(frame.values[0, st_.row, st_.col]), abs=1e-5)


def test_default_rainy_fraction_seed_7():
    cfg = GeneratorConfig()
    _, _, records = generate_synthetic(cfg, 7)
    rainy = sum(1 for r in records if r.rain >= 0.1) / len(records)
    assert abs(rainy - cfg.rain_fraction) <= 0.05


def test_frames_are_finite_and_rain_nonnegative():
    frames, _, records = generate_synthetic(tiny_generator_config(), 2)
    for f in frames:
        assert np.all(np.isfinite(f.values))
        assert f.values[0].min() >= 0
    assert min(r.rain for r in records) >= 0


def test_bias_increases_forecast_error():
    errors = []
    for bias in (0.0, 0.5, 1.0, 2.0):
        frames, stations, records = generate_synthetic(tiny_generator_config(bias=bias), 4)
        by_t = {f.timestamp: f for f in frames}
        pos = {s.station_id: (s.row, s.col) for s in stations}
        errors.append(np.mean([abs(by_t[r.timestamp].values[0][pos[r.station_id]] - r.rain)
                               for r in records]))
    assert all(a < b for a, b in zip(errors, errors[1:]))


def test_grid_too_small_reports_bound():
    with pytest.raises(ConfigError, match="at least 33x33"):
        generate_synthetic(GeneratorConfig(height=20, width=20), 0)


def test_crop_block_indexing():
    grid = np.fromfunction(lambda r, c: 10 * r + c, (5, 5))
    (crop,) = crop_multiscale(grid, _station(2, 2), [3])
    np.testing.assert_array_equal(crop[0], grid[1:4, 1:4])


def test_crop_scale_one_is_center():
    grid = np.fromfunction(lambda r, c: 10 * r + c, (5, 5))
    (crop,) = crop_multiscale(grid, _station(2, 3), [1])
    assert crop.shape == (1, 1, 1) and crop[0, 0, 0] == 23


def test_crop_out_of_bounds_names_station_and_scale():
    grid = np.zeros((5, 5))
    with pytest.raises(ValueError, match=r"scale 5 around station S009"):
        crop_multiscale(grid, _station(1, 1, "S009"), [5])


def _frames(n, size=33, channels=2, seed=0):
    rng = np.random.default_rng(seed)
    return [GridFrame(6 * t, rng.standard_normal((channels, size, size)).astype(np.float32),
                      tuple(f"c{i}" for i in range(channels))) for t in range(n)]


def test_lagged_sequence_length_one():
    frames = _frames(3)
    s = make_lagged_sequence(frames, _station(16, 16), 2, 1, [29])
    assert len(s.crops) == 1 and s.crops[0].shape == (2, 29, 29)


def test_lagged_sequence_per_lag_shapes_and_times():
    frames = _frames(6)
    st_ = _station(16, 16)
    s = make_lagged_sequence(frames, st_, 4, 3, [29, 15, 7])
    assert [c.shape[-1] for c in s.crops] == [29, 15, 7]
    for k, (crop, scale) in enumerate(zip(s.crops, (29, 15, 7))):
        np.testing.assert_array_equal(crop, crop_multiscale(frames[4 - k], st_, [scale])[0])


def test_lagged_sequence_reports_earliest_t():
    with pytest.raises(ValueError, match="earliest admissible t is 3"):
        make_lagged_sequence(_frames(6), _station(16, 16), 1, 4, [29, 15, 7, 3])


@settings(max_examples=25, deadline=None)
@given(t=st.integers(3, 7), plan=st.lists(st.sampled_from([29, 15, 7, 3]), min_size=3, max_size=3))
def test_lag_crops_compose_from_single_frame_crops(t, plan):
    frames = _frames(8, seed=1)
    st_ = _station(16, 16)
    s = make_lagged_sequence(frames, st_, t, 4, [29] + plan)
    for k, scale in enumerate([29] + plan):
        np.testing.assert_array_equal(s.crops[k], crop_multiscale(frames[t - k], st_, [scale])[0])


def test_partition_boundaries():
    parts = partition_by_intensity([0.0, 1.0, 10.0, 0.999, 9.999])
    assert parts["ECbT"].tolist() == [0, 3]
    assert parts["ECbM"].tolist() == [1, 4]
    assert parts["ECbH"].tolist() == [2]


def test_partition_counts_sum():
    rain = np.random.default_rng(0).uniform(0, 20, 1000)
    assert sum(len(v) for v in partition_by_intensity(rain).values()) == 1000


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 60, allow_nan=False), min_size=0, max_size=80))
def test_partition_is_disjoint_and_exhaustive(rain):
    parts = partition_by_intensity(rain)
    joined = np.sort(np.concatenate([parts[k] for k in ("ECbT", "ECbM", "ECbH")]))
    assert joined.tolist() == list(range(len(rain)))


def _pools(nt, nm, nh):
    return {"ECbT": np.arange(nt), "ECbM": np.arange(nt, nt + nm),
            "ECbH": np.arange(nt + nm, nt + nm + nh)}


def test_mix_ratio_counts():
    pools = _pools(2000, 1000, 500)
    for total, want in ((1300, (900, 300, 100)), (13, (9, 3, 1))):
        idx = mix_ratio(pools, total, seed=0)
        got = tuple(int(np.isin(idx, pools[k]).sum()) for k in ("ECbT", "ECbM", "ECbH"))
        assert got == want
        assert len(np.unique(idx)) == len(idx)


def test_mix_ratio_exhaustion_names_class():
    with pytest.raises(ValueError, match="ECbT"):
        mix_ratio(_pools(5, 1000, 1000), 1300, seed=0)


def test_mix_ratio_deterministic_per_seed():
    pools = _pools(300, 100, 40)
    assert np.array_equal(mix_ratio(pools, 260, seed=4), mix_ratio(pools, 260, seed=4))
    assert not np.array_equal(mix_ratio(pools, 260, seed=4), mix_ratio(pools, 260, seed=5))


@settings(max_examples=40, deadline=None)
@given(nt=st.integers(0, 200), nm=st.integers(0, 80), nh=st.integers(0, 30))
def test_max_mix_total_is_feasible(nt, nm, nh):
    pools = _pools(nt, nm, nh)
    total = max_mix_total(pools)
    if total:
        idx = mix_ratio(pools, total, seed=1)
        counts = [int(np.isin(idx, pools[k]).sum()) for k in ("ECbT", "ECbM", "ECbH")]
        for c, r in zip(counts, (9, 3, 1)):
            assert abs(c - total * r / 13) <= 1


def test_constant_channel_normalizes_to_zero_with_warning():
    fields = np.ones((4, 2, 1, 3, 3), dtype=np.float32)
    fields[:, 1] = np.arange(4)[:, None, None, None]
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        stats = channel_stats(fields)
    out = apply_normalization(fields, stats)
    assert np.all(out[:, 0] == 0)


def test_zscore_arithmetic():
    out = apply_normalization(np.full((1, 1, 1, 1, 1), 9.0), {"mean": [5.0], "std": [2.0]})
    assert out.item() == 2.0


def test_validation_uses_training_stats(tiny_splits):
    val = tiny_splits["val"].normalized()
    assert not np.allclose(val.fields.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-3)
    train = tiny_splits["train"].normalized()
    np.testing.assert_allclose(train.fields.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-4)


def test_normalize_leaves_labels_in_mm(tiny_splits):
    train = tiny_splits["train"]
    norm, _ = normalize_channels(SampleSet(train.fields.copy(), train.labels.copy(),
                                           train.station_ids, train.timestamps, dict(train.meta)))
    assert np.array_equal(norm.labels, train.labels)


def test_round_trip_is_bit_exact(tmp_path, tiny_splits):
    save_dataset(tmp_path, tiny_splits)
    loaded = load_dataset(tmp_path)
    for name, s in tiny_splits.items():
        t = loaded[name]
        assert t.fields.tobytes() == s.fields.astype("<f4").tobytes()
        assert t.labels.tobytes() == s.labels.tobytes()
        assert t.station_ids.tolist() == s.station_ids.tolist()
        assert t.timestamps.tolist() == s.timestamps.tolist()
        assert json.dumps(t.meta, sort_keys=True) == json.dumps({**s.meta, "split": name},
                                                                sort_keys=True)


def test_records_csv_header(tmp_path, tiny_splits):
    save_dataset(tmp_path, tiny_splits)
    first = (tmp_path / "train" / "records.csv").read_text().splitlines()[0]
    assert first == "station_id,timestamp,rain,temp,pressure,wind,dew"
    assert (tmp_path / "train" / "fields.f32").exists() and (tmp_path / "train" / "meta.json").exists()


def test_temporal_split_has_no_window_overlap(tiny_splits):
    lag = tiny_splits["train"].lag_max
    last_train = tiny_splits["train"].timestamps.max()
    first_val = tiny_splits["val"].timestamps.min()
    # a val window reaches back lag-1 steps of 6 h; it must not touch training targets
    assert first_val - 6 * (lag - 1) > last_train


def test_samples_store_lags_newest_first():
    frames = _frames(6, channels=2)
    stations = [_station(16, 16)]
    from stas.data import StationRecord
    records = [StationRecord("S000", f.timestamp, 0.0, 0.0, 0.0, 0.0, 0.0) for f in frames]
    samples = build_samples(frames, stations, records, (29, 15), 3)
    assert samples.fields.shape == (4, 2, 3, 29, 29)
    np.testing.assert_array_equal(samples.fields[0, :, 0], frames[2].values[:, 2:31, 2:31])
    np.testing.assert_array_equal(samples.fields[0, :, 2], frames[0].values[:, 2:31, 2:31])


def test_dataset_meta_carries_statistics():
    splits = generate_dataset(tiny_generator_config(), 0)
    for s in splits.values():
        assert {"norm", "label_stats", "stations", "grid"} <= set(s.meta)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        splits["test"].normalized()
