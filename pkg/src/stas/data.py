"""Synthetic EC-like gridded weather, station labels, crops, splits and on-disk datasets.

The generator advects anisotropic Gaussian rain cells over a lat/lon pixel grid.
Station labels come from the "true" atmosphere. The gridded forecast channels are
an imperfect view of it: the rain forecast runs one step early, is 30% too weak and
carries smooth additive noise, all scaled by ``GeneratorConfig.bias``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import ME_NAMES, ConfigError, GeneratorConfig, to_dict

log = logging.getLogger(__name__)

AUX_NAMES = ("humidity", "cape", "vorticity")
RAIN_CAP = 30.0
FIELDS_FILE = "fields.f32"
META_FILE = "meta.json"
RECORDS_FILE = "records.csv"
RECORD_HEADER = ("station_id", "timestamp") + ME_NAMES
INTENSITY_BOUNDS = {"ECbT": (0.0, 1.0), "ECbM": (1.0, 10.0), "ECbH": (10.0, math.inf)}


@dataclass
class GridFrame:
    timestamp: int
    values: np.ndarray  # (C, H, W) float32
    channel_names: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True)
class StationGeometry:
    station_id: str
    lat: float
    lon: float
    row: int
    col: int
    omega: int


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    timestamp: int
    rain: float
    temp: float
    pressure: float
    wind: float
    dew: float

    def labels(self) -> tuple[float, ...]:
        return (self.rain, self.temp, self.pressure, self.wind, self.dew)


@dataclass
class TimeSeriesSample:
    """Lagged crops for one station, newest first: [X_t^u, X_{t-1}, ..., X_{t-tau}]."""

    station_id: str
    t: int
    crops: list[np.ndarray]
    scales: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.crops)


# ---------------------------------------------------------------------------
# generator

def _channel_names(n_channels: int) -> tuple[str, ...]:
    names = list(ME_NAMES)
    for k in range(n_channels - len(ME_NAMES)):
        names.append(AUX_NAMES[k] if k < len(AUX_NAMES) else f"aux{k}")
    return tuple(names)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    """Unit-variance spatially correlated noise, smoothed over the last two axes."""
    white = rng.standard_normal(shape)
    sm = gaussian_filter(white, sigma=(0,) * (len(shape) - 2) + (sigma, sigma), mode="wrap")
    return sm / sm.std(axis=(-2, -1), keepdims=True)


def _cell_tracks(cfg: GeneratorConfig, rng: np.random.Generator, n_steps: int) -> np.ndarray:
    """Raw (uncapped, unthresholded) rain intensity for n_steps frames."""
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    flow_angle = rng.uniform(0, 2 * np.pi)
    flow = cfg.cell_speed * np.array([math.sin(flow_angle), math.cos(flow_angle)])

    def spawn():
        return dict(
            pos=np.array([rng.uniform(-4, H + 4), rng.uniform(-4, W + 4)]),
            vel=flow + rng.normal(0, 0.3 * cfg.cell_speed, size=2),
            amp=cfg.cell_amplitude * rng.lognormal(0.0, 0.55),
            s_major=rng.uniform(2.5, 5.0),
            s_minor=rng.uniform(1.2, 2.5),
            angle=rng.uniform(0, np.pi),
            life=int(rng.integers(6, 16)),
            age=0,
        )

    cells = [spawn() for _ in range(cfg.n_cells)]
    for c in cells:
        c["age"] = int(rng.integers(0, c["life"]))
    raw = np.zeros((n_steps, H, W))
    for step in range(n_steps):
        for k, c in enumerate(cells):
            env = math.sin(math.pi * (c["age"] + 0.5) / c["life"])
            dy, dx = yy - c["pos"][0], xx - c["pos"][1]
            ca, sa = math.cos(c["angle"]), math.sin(c["angle"])
            u = ca * dy + sa * dx
            v = -sa * dy + ca * dx
            q = (u / c["s_major"]) ** 2 + (v / c["s_minor"]) ** 2
            raw[step] += c["amp"] * env * np.exp(-0.5 * q)
            c["pos"] = c["pos"] + c["vel"]
            c["age"] += 1
            if c["age"] >= c["life"]:
                cells[k] = spawn()
    return raw


def _rain_from_raw(raw: np.ndarray, threshold: float) -> np.ndarray:
    # rain starts at the 0.1 mm gauge resolution where raw intensity crosses the threshold
    excess = np.where(raw >= threshold, raw - threshold + 0.1, 0.0)
    return RAIN_CAP * np.tanh(excess / RAIN_CAP)


def _me_fields(rain: np.ndarray, noise: np.ndarray, lat_grad: np.ndarray) -> np.ndarray:
    """Non-rain channels as functions of a rain field plus per-channel noise.

    rain: (T, H, W); noise: (T, C-1, H, W). Returns (T, C-1, H, W).
    """
    near = gaussian_filter(rain, sigma=(0, 1.5, 1.5))
    wide = gaussian_filter(rain, sigma=(0, 5.0, 5.0))
    temp = 299.0 - 0.35 * near - 3.0 * lat_grad + 1.0 * noise[:, 0]
    pressure = 1008.0 - 0.8 * wide + 1.5 * noise[:, 1]
    wind = np.abs(3.0 + 0.4 * near + 0.8 * noise[:, 2])
    dew = temp - 4.0 + 0.3 * near + 0.7 * noise[:, 3]
    out = [temp, pressure, wind, dew]
    n_aux = noise.shape[1] - 4
    for k in range(n_aux):
        weight = (0.08, 0.15, 0.05)[k % 3]
        out.append(weight * near + noise[:, 4 + k])
    return np.stack(out, axis=1)


def generate_synthetic(cfg: GeneratorConfig, seed: int
                       ) -> tuple[list[GridFrame], list[StationGeometry], list[StationRecord]]:
    """Generate gridded forecast frames, station geometry and station observations."""
    cfg.validate()
    max_scale = max(cfg.scale_ladder)
    min_side = max(33, max_scale + 4)
    if cfg.height < min_side or cfg.width < min_side:
        raise ConfigError(
            f"grid {cfg.height}x{cfg.width} too small: largest crop scale {max_scale} needs "
            f"at least {min_side}x{min_side}")
    rng = np.random.default_rng(seed)
    H, W, T, C = cfg.height, cfg.width, cfg.n_timestamps, cfg.n_channels
    radius = max_scale // 2
    omega = radius

    interior = [(r, c) for r in range(radius, H - radius) for c in range(radius, W - radius)]
    if cfg.n_stations > len(interior):
        raise ConfigError(f"only {len(interior)} admissible station pixels for {cfg.n_stations} stations")
    picks = rng.choice(len(interior), size=cfg.n_stations, replace=False)
    stations = []
    for k, p in enumerate(sorted(int(i) for i in picks)):
        r, c = interior[p]
        stations.append(StationGeometry(f"S{k:03d}", lat=round(20.0 + r * 1.0, 4),
                                        lon=round(110.0 + c * 1.0, 4), row=r, col=c, omega=omega))
    rows = np.array([s.row for s in stations])
    cols = np.array([s.col for s in stations])

    # one extra step: the forecast at t sees the atmosphere of t+1
    raw = _cell_tracks(cfg, rng, T + 1)
    station_raw = raw[:T, rows, cols].ravel()
    threshold = float(np.quantile(station_raw, 1.0 - cfg.rain_fraction))
    truth_rain = _rain_from_raw(raw, threshold)

    lat_grad = np.broadcast_to(np.linspace(-1, 1, H)[:, None], (H, W))
    noise = _smooth_noise(rng, (T, C - 1, H, W), sigma=3.0)
    truth_me = _me_fields(truth_rain[:T], noise, lat_grad)

    # the forecast runs early and compresses intensity: drizzle is over-, heavy rain under-forecast
    early = 0.3 * truth_rain[:T] + 0.7 * truth_rain[1:]
    rain_err = 3.0 * np.log1p(early) - truth_rain[:T] + 0.6 * _smooth_noise(rng, (T, H, W), 1.5)
    fc_rain = np.maximum(truth_rain[:T] + cfg.bias * rain_err, 0.0)
    fc_noise = noise + cfg.bias * 0.3 * _smooth_noise(rng, (T, C - 1, H, W), sigma=2.0)
    fc_me = _me_fields(fc_rain, fc_noise, lat_grad)
    me_offsets = np.zeros(C - 1)
    me_offsets[:4] = (1.5, -2.0, 0.8, 1.0)
    fc_me += cfg.bias * me_offsets[None, :, None, None]

    names = _channel_names(C)
    frames = []
    for t in range(T):
        values = np.concatenate([fc_rain[t][None], fc_me[t]], axis=0).astype(np.float32)
        frames.append(GridFrame(cfg.start_hour + 6 * t, values, names))

    obs_scale = np.array([1.0, 1.0, 2.0, 0.5, 1.0])
    records = []
    for t in range(T):
        truth = np.concatenate([truth_rain[t][None], truth_me[t, :4]], axis=0)[:, rows, cols]
        eps = rng.standard_normal(truth.shape) * cfg.obs_noise * obs_scale[:, None]
        rain = truth[0] + np.where(truth[0] > 0, eps[0], 0.0)
        rain = np.maximum(rain, 0.0)
        for k, st in enumerate(stations):
            vals = [float(rain[k])] + [float(truth[i, k] + eps[i, k]) for i in range(1, 5)]
            records.append(StationRecord(st.station_id, cfg.start_hour + 6 * t, *vals))
    return frames, stations, records


# ---------------------------------------------------------------------------
# crops and lagged sequences

def crop_multiscale(frame: GridFrame | np.ndarray, station: StationGeometry,
                    scales: Sequence[int]) -> list[np.ndarray]:
    values = frame.values if isinstance(frame, GridFrame) else np.asarray(frame)
    if values.ndim == 2:
        values = values[None]
    _, H, W = values.shape
    out = []
    for s in scales:
        if s < 1 or s % 2 == 0:
            raise ValueError(f"crop scale must be odd and positive, got {s}")
        r = s // 2
        r0, c0 = station.row - r, station.col - r
        if r0 < 0 or c0 < 0 or station.row + r >= H or station.col + r >= W:
            raise ValueError(
                f"crop of scale {s} around station {station.station_id} at "
                f"({station.row}, {station.col}) leaves the {H}x{W} grid")
        out.append(values[:, r0:r0 + s, c0:c0 + s].copy())
    return out


def make_lagged_sequence(frames: Sequence[GridFrame], station: StationGeometry, t: int,
                         ell: int, scale_plan: Sequence[int]) -> TimeSeriesSample:
    """Crops for frame indices t, t-1, ..., t-ell+1 at the planned scales."""
    if ell < 1:
        raise ValueError("sequence length must be >= 1")
    if len(scale_plan) != ell:
        raise ValueError(f"scale plan has {len(scale_plan)} entries for length {ell}")
    if t - (ell - 1) < 0:
        raise ValueError(f"not enough history for t={t}, length {ell}: earliest admissible t is {ell - 1}")
    if t >= len(frames):
        raise ValueError(f"t={t} beyond the last frame index {len(frames) - 1}")
    crops = [crop_multiscale(frames[t - k], station, [scale_plan[k]])[0] for k in range(ell)]
    return TimeSeriesSample(station.station_id, t, crops, tuple(int(s) for s in scale_plan))


def center_crop(arr: np.ndarray, scale: int) -> np.ndarray:
    """Central scale x scale window of the last two axes."""
    side = arr.shape[-1]
    off = (side - scale) // 2
    return arr[..., off:off + scale, off:off + scale]


# ---------------------------------------------------------------------------
# partitions

def partition_by_intensity(rain: Iterable[float]) -> dict[str, np.ndarray]:
    rain = np.asarray(list(rain) if not isinstance(rain, np.ndarray) else rain, dtype=np.float64)
    if rain.ndim == 2:
        rain = rain[:, 0]
    return {name: np.flatnonzero((rain >= lo) & (rain < hi))
            for name, (lo, hi) in INTENSITY_BOUNDS.items()}


def _ratio_counts(total: int, ratio: Sequence[int]) -> list[int]:
    denom = sum(ratio)
    exact = [total * r / denom for r in ratio]
    counts = [int(math.floor(x)) for x in exact]
    order = sorted(range(len(ratio)), key=lambda i: (counts[i] - exact[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def mix_ratio(splits: dict[str, np.ndarray], total: int, ratio: Sequence[int] = (9, 3, 1),
              seed: int = 0) -> np.ndarray:
    """Sample an ECbMi index set without replacement at the T:M:H ratio."""
    names = ("ECbT", "ECbM", "ECbH")
    counts = _ratio_counts(total, ratio)
    rng = np.random.default_rng(seed)
    parts = []
    for name, n in zip(names, counts):
        pool = np.asarray(splits[name])
        if len(pool) < n:
            raise ValueError(f"{name} exhausted: need {n} samples, have {len(pool)}")
        parts.append(np.sort(rng.choice(pool, size=n, replace=False)))
    return np.concatenate(parts)


def max_mix_total(splits: dict[str, np.ndarray], ratio: Sequence[int] = (9, 3, 1)) -> int:
    units = min(len(splits[n]) // r for n, r in zip(("ECbT", "ECbM", "ECbH"), ratio))
    return units * sum(ratio)


# ---------------------------------------------------------------------------
# sample sets

@dataclass
class SampleSet:
    """Stacked lagged crops: fields (N, C, L, S, S) newest lag first, labels (N, 5)."""

    fields: np.ndarray
    labels: np.ndarray
    station_ids: np.ndarray
    timestamps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.fields.shape[0]

    @property
    def scale_ladder(self) -> tuple[int, ...]:
        return tuple(self.meta["scale_ladder"])

    @property
    def lag_max(self) -> int:
        return self.fields.shape[2]

    @property
    def n_channels(self) -> int:
        return self.fields.shape[1]

    def subset(self, idx: np.ndarray) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.fields[idx], self.labels[idx], self.station_ids[idx],
                         self.timestamps[idx], dict(self.meta))

    def normalized(self) -> "SampleSet":
        stats = self.meta.get("norm")
        if stats is None:
            raise ValueError("sample set carries no normalization statistics")
        return SampleSet(apply_normalization(self.fields, stats), self.labels, self.station_ids,
                         self.timestamps, dict(self.meta))


def build_samples(frames: Sequence[GridFrame], stations: Sequence[StationGeometry],
                  records: Sequence[StationRecord], scale_ladder: Sequence[int],
                  lag_max: int) -> SampleSet:
    """One sample per (station, t) with full lag history, stored at the largest scale."""
    S = max(scale_ladder)
    by_key = {(r.station_id, r.timestamp): r for r in records}
    fields, labels, sids, stamps = [], [], [], []
    plan = [S] * lag_max
    for t in range(lag_max - 1, len(frames)):
        for st in stations:
            sample = make_lagged_sequence(frames, st, t, lag_max, plan)
            fields.append(np.stack(sample.crops, axis=1))
            rec = by_key[(st.station_id, frames[t].timestamp)]
            labels.append(rec.labels())
            sids.append(st.station_id)
            stamps.append(frames[t].timestamp)
    H, W = frames[0].shape
    meta = dict(
        channel_names=list(frames[0].channel_names),
        scale_ladder=list(scale_ladder),
        lag_max=lag_max,
        grid=[H, W],
        stations=[dict(station_id=s.station_id, lat=s.lat, lon=s.lon, row=s.row, col=s.col,
                       omega=s.omega) for s in stations],
    )
    return SampleSet(np.asarray(fields, dtype=np.float32), np.asarray(labels, dtype=np.float64),
                     np.asarray(sids), np.asarray(stamps, dtype=np.int64), meta)


def split_temporal(samples: SampleSet, fractions: Sequence[float] = (0.7, 0.15, 0.15),
                   gap: int = 0) -> dict[str, SampleSet]:
    """Split by timestamp; `gap` timestamps are dropped before val and test to purge overlap."""
    stamps = np.unique(samples.timestamps)
    n = len(stamps)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    bounds = {
        "train": stamps[:n_train],
        "val": stamps[n_train + gap:n_train + n_val],
        "test": stamps[n_train + n_val + gap:],
    }
    out = {}
    for name, keep in bounds.items():
        sub = samples.subset(np.flatnonzero(np.isin(samples.timestamps, keep)))
        sub.meta["split"] = name
        out[name] = sub
    return out


def channel_stats(fields: np.ndarray) -> dict[str, list[float]]:
    axes = tuple(i for i in range(fields.ndim) if i != 1)
    mean = fields.astype(np.float64).mean(axis=axes)
    std = fields.astype(np.float64).std(axis=axes)
    if np.any(std == 0):
        bad = np.flatnonzero(std == 0).tolist()
        warnings.warn(f"zero-variance channels {bad}: std clamped to 1", RuntimeWarning, stacklevel=2)
        std = np.where(std == 0, 1.0, std)
    return {"mean": mean.tolist(), "std": std.tolist()}


def apply_normalization(fields: np.ndarray, stats: dict[str, list[float]]) -> np.ndarray:
    shape = [1] * fields.ndim
    shape[1] = -1
    mean = np.asarray(stats["mean"], dtype=np.float64).reshape(shape)
    std = np.asarray(stats["std"], dtype=np.float64).reshape(shape)
    return ((fields - mean) / std).astype(np.float32)


def normalize_channels(train: SampleSet, others: Sequence[SampleSet] = ()
                       ) -> tuple[SampleSet, dict[str, list[float]]]:
    """Z-score input channels with training statistics; labels stay in physical units.

    The statistics are also attached to every set in `others` so that they load
    with the same transform.
    """
    stats = channel_stats(train.fields)
    for s in (train, *others):
        s.meta["norm"] = stats
    return train.normalized(), stats


def label_stats(labels: np.ndarray) -> dict[str, list[float]]:
    mean = labels.mean(axis=0)
    std = labels.std(axis=0)
    std = np.where(std == 0, 1.0, std)
    return {"mean": mean.tolist(), "std": std.tolist()}


def generate_dataset(cfg: GeneratorConfig, seed: int) -> dict[str, SampleSet]:
    """Generate, window, split and attach training statistics; fields stay raw."""
    frames, stations, records = generate_synthetic(cfg, seed)
    samples = build_samples(frames, stations, records, cfg.scale_ladder, cfg.lag_max)
    splits = split_temporal(samples, cfg.split_fractions, gap=cfg.lag_max - 1)
    normalize_channels(splits["train"], [splits["val"], splits["test"]])
    lstats = label_stats(splits["train"].labels)
    for name, s in splits.items():
        s.meta["label_stats"] = lstats
        s.meta["generator"] = to_dict(cfg)
        s.meta["seed"] = seed
    return splits


# ---------------------------------------------------------------------------
# persistence

def save_split(root: str | Path, name: str, samples: SampleSet) -> Path:
    out = Path(root) / name
    out.mkdir(parents=True, exist_ok=True)
    samples.fields.astype("<f4").tofile(out / FIELDS_FILE)
    meta = dict(samples.meta)
    meta["split"] = name
    meta["dims"] = list(samples.fields.shape)
    meta["timestamps"] = samples.timestamps.tolist()
    meta["station_ids"] = samples.station_ids.tolist()
    (out / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))
    with open(out / RECORDS_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_HEADER)
        for sid, ts, row in zip(samples.station_ids, samples.timestamps, samples.labels):
            writer.writerow([sid, int(ts)] + [repr(float(v)) for v in row])
    return out


def save_dataset(root: str | Path, splits: dict[str, SampleSet]) -> Path:
    root = Path(root)
    for name, s in splits.items():
        save_split(root, name, s)
    return root


def load_split(root: str | Path, name: str) -> SampleSet:
    path = Path(root) / name
    if not (path / META_FILE).exists():
        raise FileNotFoundError(f"no dataset split at {path}")
    meta = json.loads((path / META_FILE).read_text())
    dims = tuple(meta.pop("dims"))
    timestamps = np.asarray(meta.pop("timestamps"), dtype=np.int64)
    station_ids = np.asarray(meta.pop("station_ids"))
    fields = np.fromfile(path / FIELDS_FILE, dtype="<f4").reshape(dims)
    labels = []
    with open(path / RECORDS_FILE, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RECORD_HEADER:
            raise ValueError(f"unexpected records header {header}")
        for row in reader:
            labels.append([float(v) for v in row[2:]])
    labels = np.asarray(labels, dtype=np.float64).reshape(len(labels), 5)
    return SampleSet(fields.astype(np.float32), labels, station_ids, timestamps, meta)


def load_dataset(root: str | Path) -> dict[str, SampleSet]:
    return {name: load_split(root, name) for name in ("train", "val", "test")}
