"""Forecast verification: contingency tables, threat score, MAE and rain-only MAE."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

THRESHOLDS = (0.1, 1.0, 10.0)
REPORT_COLUMNS = ("split", "method", "MAE", "MAPE", "TS_0.1", "TS_1", "TS_10")
NA = "N/A"


@dataclass(frozen=True)
class ContingencyTable:
    rho: float
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def n(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives


def _pair(predictions, observations) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    obs = np.asarray(observations, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {obs.size} observations")
    return pred, obs


def contingency(predictions, observations, rho: float) -> ContingencyTable:
    """Event counts at threshold rho; an event is a value strictly above rho."""
    pred, obs = _pair(predictions, observations)
    p, o = pred > rho, obs > rho
    return ContingencyTable(rho, int(np.sum(p & o)), int(np.sum(~p & o)),
                            int(np.sum(p & ~o)), int(np.sum(~p & ~o)))


def threat_score(table: ContingencyTable) -> float | None:
    """H / (H + M + FA); None when no event was forecast or observed."""
    denom = table.hits + table.misses + table.false_alarms
    if denom == 0:
        return None
    return table.hits / denom


def mae(predictions, observations) -> float:
    pred, obs = _pair(predictions, observations)
    if pred.size == 0:
        raise ValueError("MAE of an empty series")
    return float(np.mean(np.abs(pred - obs)))


def mape_rainy(predictions, observations, rain_floor: float = 1.0) -> float | None:
    """MAE over samples observed at or above rain_floor mm; None if there are none."""
    pred, obs = _pair(predictions, observations)
    keep = obs >= rain_floor
    if not np.any(keep):
        return None
    return float(np.mean(np.abs(pred[keep] - obs[keep])))


def evaluate(predictions, observations, thresholds: Sequence[float] = THRESHOLDS) -> dict:
    """All five criteria; undefined entries are None."""
    row = {"MAE": mae(predictions, observations), "MAPE": mape_rainy(predictions, observations)}
    for rho in thresholds:
        row[f"TS_{rho:g}"] = threat_score(contingency(predictions, observations, rho))
    return row


def format_value(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return NA
    return f"{value:.4f}"


def write_report(path: str | Path, rows: Iterable[dict]) -> Path:
    """CSV with columns split,method,MAE,MAPE,TS_0.1,TS_1,TS_10."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row["split"], row["method"]] +
                            [format_value(row.get(c)) for c in REPORT_COLUMNS[2:]])
    return path


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
