"""Static reports: station-grid heatmaps of predicted vs observed rain and a Markdown summary."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import SampleSet  # noqa: E402
from .metrics import REPORT_COLUMNS, format_value  # noqa: E402
from .training import stratified_rows  # noqa: E402


class EmptyPredictions(ValueError):
    pass


def read_predictions(path: str | Path) -> dict[tuple[str, int], float]:
    """Map (station_id, timestamp) -> fused prediction y_t."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EmptyPredictions(f"no predictions in {path}")
    return {(r["station_id"], int(r["timestamp"])): float(r["y_t"]) for r in rows}


def nearest_station_map(stations: Sequence[dict], grid: Sequence[int]) -> np.ndarray:
    """(H, W) array holding, for every cell, the index of the closest station."""
    H, W = grid
    rr, cc = np.mgrid[0:H, 0:W]
    pos = np.array([[s["row"], s["col"]] for s in stations], dtype=np.float64)
    d2 = (rr[..., None] - pos[:, 0]) ** 2 + (cc[..., None] - pos[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def rasterize(values: Sequence[float], owner: np.ndarray) -> np.ndarray:
    """Paint each cell with the value of its nearest station (NaN where the value is missing)."""
    return np.asarray(values, dtype=np.float64)[owner]


def heatmap_panels(panels: Sequence[np.ndarray], titles: Sequence[str], path: str | Path,
                   suptitle: str = "") -> tuple[float, float]:
    """Side-by-side heatmaps on one shared color scale; returns (vmin, vmax)."""
    finite = np.concatenate([p[np.isfinite(p)].ravel() for p in panels])
    vmin = 0.0
    vmax = float(max(finite.max(), 1e-6)) if finite.size else 1.0
    fig, axes = plt.subplots(1, len(panels), figsize=(3.6 * len(panels), 3.4), squeeze=False)
    for ax, img, title in zip(axes[0], panels, titles):
        im = ax.imshow(img, vmin=vmin, vmax=vmax, cmap="Blues", origin="upper")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=list(axes[0]), shrink=0.8, label="precipitation (mm)")
    if suptitle:
        fig.suptitle(suptitle)
    fig.savefig(path, dpi=90)
    plt.close(fig)
    return vmin, vmax


def summary_markdown(rows: Sequence[dict]) -> str:
    head = "| " + " | ".join(REPORT_COLUMNS) + " |"
    rule = "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|"
    body = ["| " + " | ".join([r["split"], r["method"]] + [format_value(r.get(c))
                                                          for c in REPORT_COLUMNS[2:]]) + " |"
            for r in rows]
    return "\n".join([head, rule, *body]) + "\n"


def build_report(named_paths: Sequence[tuple[str, str | Path]], samples: SampleSet,
                 out_dir: str | Path, n_frames: int = 3, seed: int = 0) -> list[Path]:
    """Heatmap triples for the rainiest timestamps plus summary.md.

    The first two methods are drawn next to the observations; with a single
    method the figure holds one prediction panel and the observations.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    obs = samples.labels[:, 0]
    keys = [(str(s), int(t)) for s, t in zip(samples.station_ids, samples.timestamps)]
    methods = []
    for name, path in named_paths:
        table = read_predictions(path)
        missing = [k for k in keys if k not in table]
        if len(missing) == len(keys):
            raise EmptyPredictions(f"{path} holds no predictions for this split")
        methods.append((name, np.array([table.get(k, np.nan) for k in keys])))

    rows = []
    for name, pred in methods:
        keep = np.isfinite(pred)
        rows += stratified_rows(name, pred[keep], obs[keep], seed)
    outputs = [out_dir / "summary.md"]
    outputs[0].write_text("# Evaluation summary\n\n" + summary_markdown(rows))

    stations = samples.meta["stations"]
    owner = nearest_station_map(stations, samples.meta["grid"])
    index = {s["station_id"]: i for i, s in enumerate(stations)}
    stamps = np.unique(samples.timestamps)
    rain_per_stamp = np.array([obs[samples.timestamps == t].sum() for t in stamps])
    chosen = stamps[np.argsort(-rain_per_stamp, kind="stable")[:n_frames]]
    shown = methods[:2]
    for t in sorted(chosen.tolist()):
        rows_t = np.flatnonzero(samples.timestamps == t)
        panels, titles = [], []
        for name, pred in shown + [("observed", obs)]:
            per_station = np.full(len(stations), np.nan)
            for i in rows_t:
                per_station[index[str(samples.station_ids[i])]] = pred[i]
            panels.append(rasterize(per_station, owner))
            titles.append(name)
        path = out_dir / f"heatmap_t{t}.png"
        heatmap_panels(panels, titles, path, suptitle=f"timestamp {t}")
        outputs.append(path)
    return outputs
