"""Pretraining, joint training, evaluation cadence, prediction and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, RainClassifier, classify_rain, fuse, reconstruction_loss
from .config import ConfigError, NumericalError, TrainConfig, from_dict, to_dict
from .data import SampleSet, center_crop, max_mix_total, mix_ratio, partition_by_intensity
from .metrics import evaluate
from .sfm import SpatialSelector, majority_scale
from .tfm import TemporalSelector, select_lag

log = logging.getLogger(__name__)

PARAMS_FILE = "params.f32"
MANIFEST_FILE = "manifest.json"
OPTIMIZER_FILE = "optimizer.pt"


@dataclass(frozen=True)
class PredictionRecord:
    station_id: str
    timestamp: int
    y_tp: float
    y_rc: float
    y_t: float


class STAS(nn.Module):
    """All trainable parts plus the selection state used at inference."""

    def __init__(self, cfg: TrainConfig, meta: dict):
        super().__init__()
        self.cfg = cfg
        self.meta = {k: meta[k] for k in ("channel_names", "scale_ladder", "lag_max") if k in meta}
        for k in ("norm", "label_stats"):
            if k in meta:
                self.meta[k] = meta[k]
        C = len(meta["channel_names"])
        ladder = tuple(meta["scale_ladder"])
        self.lag_max = int(meta["lag_max"])
        self.uniform_scale = max(ladder)
        self.sfm = SpatialSelector(C, ladder, cfg.me_weights, cfg.msm_enabled, cfg.msm_channels,
                                   cfg.deformable)
        self.backbone = Backbone(C, ladder, cfg.enc_channels, cfg.latent_size, cfg.lstm_hidden,
                                 cfg.lstm_layers, cfg.n_ordinal, cfg.xi, cfg.theta, cfg.noise_std)
        self.tfm = TemporalSelector(cfg.enc_channels, range(1, self.lag_max + 1), cfg.me_weights,
                                    cfg.mtm_enabled, cfg.mtm_channels, cfg.rank_regressor,
                                    cfg.n_rank_bins, cfg.rank_interval)
        self.rc = RainClassifier(C, self.uniform_scale)
        if "label_stats" in meta:
            self.sfm.set_label_stats(**meta["label_stats"])
            self.tfm.set_label_stats(**meta["label_stats"])
        self.test_plan: dict[str, list[int]] = {}
        self.test_lag: int = self.lag_max

    def main_parameters(self) -> list[nn.Parameter]:
        params = list(self.backbone.parameters()) + list(self.tfm.parameters())
        if self.cfg.finetune_sfm:
            params += list(self.sfm.parameters())
        return params

    def plan_for(self, station_ids: Sequence[str]) -> np.ndarray:
        """Inference-time scales (B, L-1) from the per-station table learned on training data."""
        default = [self.uniform_scale] * (self.lag_max - 1)
        return np.asarray([self.test_plan.get(str(s), default) for s in station_ids],
                          dtype=np.int64).reshape(len(station_ids), self.lag_max - 1)


@dataclass
class TrainResult:
    model: STAS
    history: list[dict] = field(default_factory=list)
    sfm_history: list[dict] = field(default_factory=list)
    tfm_history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    optimizer_state: dict | None = None


def seed_everything(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(cfg.threads)


def _batches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite {stage} loss at epoch {epoch}")


def _full_plan(model: STAS, n: int) -> np.ndarray:
    return np.full((n, model.lag_max - 1), model.uniform_scale, dtype=np.int64)


# ---------------------------------------------------------------------------
# spatial selection

def pretrain_sfm(model: STAS, train: SampleSet, cfg: TrainConfig,
                 val: SampleSet | None = None) -> list[dict]:
    """Fit the five spatial modules on crops at every ladder scale (weighted MSE)."""
    sfm = model.sfm
    opt = torch.optim.Adam(sfm.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 11)
    lags = list(range(1, train.lag_max)) or [0]
    history = []
    for epoch in range(cfg.sfm_epochs):
        sfm.train()
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            k = int(rng.choice(lags))
            x = _tensor(train.fields[idx, :, k])
            y = _tensor(train.labels[idx])
            loss = sum(sfm.spatial_total_loss(center_crop(x, s), y).mean() for s in sfm.scale_ladder)
            loss = loss / len(sfm.scale_ladder)
            _check_finite(loss, "spatial", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        rec = {"epoch": epoch, "train_loss": total / count}
        if val is not None and len(val):
            rec.update(spatial_validation(model, val, cfg))
        history.append(rec)
        log.info("sfm epoch %d: %s", epoch, rec)
    sfm.eval()
    return history


@torch.no_grad()
def spatial_validation(model: STAS, val: SampleSet, cfg: TrainConfig) -> dict:
    """Per-element validation MSE (target units), averaged over lags and scales."""
    sfm = model.sfm
    sfm.eval()
    sq = torch.zeros(5, dtype=torch.float64)
    n = 0
    lags = list(range(1, val.lag_max)) or [0]
    for idx in _batches(len(val), cfg.eval_batch_size, None):
        y = _tensor(val.labels[idx])
        for k in lags:
            x = _tensor(val.fields[idx, :, k])
            for s in sfm.scale_ladder:
                resid = sfm.predictions(center_crop(x, s)) - sfm.targets(y)
                sq += (resid.double() ** 2).sum(0)
                n += len(idx)
    per_me = (sq / max(n, 1)).tolist()
    return {"val_mse": dict(zip(("rain", "temp", "pressure", "wind", "dew"), per_me))}


@torch.no_grad()
def compute_plans(model: STAS, samples: SampleSet, cfg: TrainConfig
                  ) -> tuple[np.ndarray, np.ndarray | None]:
    """Selected scales (N, L-1) and the spatial loss tables (N, L-1, n_scales)."""
    if not cfg.use_sfm or samples.lag_max < 2:
        return _full_plan(model, len(samples)), None
    model.sfm.eval()
    plans, tables = [], []
    for idx in _batches(len(samples), cfg.eval_batch_size, None):
        p, t = model.sfm.select_plan(_tensor(samples.fields[idx]), _tensor(samples.labels[idx]),
                                     cfg.sfm_batch_mode)
        plans.append(p)
        tables.append(t)
    return np.concatenate(plans), np.concatenate(tables)


def station_plan_table(plans: np.ndarray, station_ids: Sequence[str]) -> dict[str, list[int]]:
    """Most frequent training scale per station and lag (ties to the smaller scale)."""
    table = {}
    sids = np.asarray(station_ids)
    for sid in sorted(set(sids.tolist())):
        rows = plans[sids == sid]
        table[str(sid)] = [majority_scale(rows[:, k]) for k in range(plans.shape[1])]
    return table


# ---------------------------------------------------------------------------
# temporal selection + encoder-decoder

def pretrain_tfm(model: STAS, train: SampleSet, cfg: TrainConfig, plans: np.ndarray) -> list[dict]:
    """Fit the temporal modules together with the encoder-decoder.

    Objective: temporal loss averaged over every candidate length plus the
    weighted reconstruction loss.
    """
    params = list(model.backbone.encoder.parameters()) + list(model.backbone.decoder.parameters()) \
        + list(model.tfm.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 23)
    gen = torch.Generator().manual_seed(cfg.seed + 29)
    history = []
    for epoch in range(cfg.tfm_epochs):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            x, y = _tensor(train.fields[idx]), _tensor(train.labels[idx])
            z = model.backbone.encode(x, plans[idx], gen)
            recon = model.backbone.decoder(z.flatten(0, 1)).view_as(z)
            table = model.tfm.loss_table(z, y)
            loss = sum(table.values()) / len(table) + cfg.lambda_rec * reconstruction_loss(z, recon)
            _check_finite(loss, "temporal", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append({"epoch": epoch, "train_loss": total / count})
        log.info("tfm epoch %d: %s", epoch, history[-1])
    model.eval()
    return history


# ---------------------------------------------------------------------------
# joint training

def _copy_state(model: STAS) -> dict:
    return {"state": copy.deepcopy(model.state_dict()), "test_lag": model.test_lag,
            "test_plan": copy.deepcopy(model.test_plan)}


def _restore_state(model: STAS, snap: dict) -> None:
    model.load_state_dict(snap["state"])
    model.test_lag = snap["test_lag"]
    model.test_plan = snap["test_plan"]


def _ts_key(value: float | None) -> float:
    return -1.0 if value is None else value


def train_joint(model: STAS, train: SampleSet, val: SampleSet, cfg: TrainConfig,
                plans: np.ndarray, plan_tables: np.ndarray | None = None,
                callback: Callable[[dict], None] | None = None,
                history_path: str | Path | None = None) -> TrainResult:
    """Joint training of encoder-decoder, temporal selector, ConvLSTM, ordinal head and classifier.

    Each batch: encode lags at their planned scales, pick the batch lag length by
    temporal loss, run the ConvLSTM over that window and step on
    ordinal BCE + lambda_rec * reconstruction + lambda_tfm * temporal loss.
    The temporal modules see detached latents so the encoder gradient comes from
    the first two terms only. The rain classifier steps on every other batch.
    """
    main_opt = torch.optim.Adam(model.main_parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    rc_opt = torch.optim.Adam(model.rc.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 37)
    gen = torch.Generator().manual_seed(cfg.seed + 41)
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        Path(history_path).write_text("")
    history: list[dict] = []
    best: dict | None = None
    best_ts, best_epoch = -np.inf, 0
    for epoch in range(cfg.epochs):
        model.train()
        model.sfm.eval()
        sums = Counter()
        lag_counts: Counter = Counter()
        n_seen = 0
        for b, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            x, y = _tensor(train.fields[idx]), _tensor(train.labels[idx])
            z = model.backbone.encode(x, plans[idx], gen)
            recon = model.backbone.decoder(z.flatten(0, 1)).view_as(z)
            rec = reconstruction_loss(z, recon)
            if cfg.use_tfm:
                table = model.tfm.loss_table(z.detach(), y)
                ell = select_lag({k: v.item() for k, v in table.items()})
                tfm_loss = sum(table.values()) / len(table)
            else:
                table, ell = {}, model.lag_max
                tfm_loss = torch.zeros(())
            lag_counts[ell] += 1
            hidden = model.backbone.temporal_encode(z, ell)
            probs, y_tp = model.backbone.regressor(hidden)
            ord_loss = model.backbone.regressor.ordinal.loss(probs, y[:, 0])
            loss = ord_loss + cfg.lambda_rec * rec + cfg.lambda_tfm * tfm_loss
            _check_finite(loss, "joint", epoch)
            if callback is not None:
                callback(dict(epoch=epoch, batch=b, indices=idx, fields=x, labels=y,
                              plan=plans[idx],
                              plan_tables=None if plan_tables is None else plan_tables[idx],
                              latents=z.detach(), lag_table={k: v.item() for k, v in table.items()},
                              lag=ell, model=model))
            main_opt.zero_grad()
            loss.backward()
            main_opt.step()
            if b % 2 == 1:
                prob = model.rc(x[:, :, 0])
                rc_loss = F.binary_cross_entropy(prob.clamp(1e-7, 1 - 1e-7),
                                                 (y[:, 0] >= cfg.rain_threshold).float())
                _check_finite(rc_loss, "classifier", epoch)
                rc_opt.zero_grad()
                rc_loss.backward()
                rc_opt.step()
                sums["rc_loss"] += rc_loss.item() * len(idx)
            for key, term in (("loss", loss), ("ord_loss", ord_loss), ("rec_loss", rec),
                              ("tfm_loss", tfm_loss)):
                sums[key] += term.item() * len(idx)
            n_seen += len(idx)
        model.test_lag = select_lag({k: -c for k, c in lag_counts.items()})
        last = epoch == cfg.epochs - 1
        if (epoch + 1) % cfg.eval_every == 0 or last:
            row = evaluate_records(predict(model, val, cfg), val)
            rec = {"epoch": epoch + 1, "split": "val",
                   **{k: sums[k] / n_seen for k in ("loss", "ord_loss", "rec_loss", "tfm_loss")},
                   "lag_counts": {str(k): v for k, v in sorted(lag_counts.items())},
                   "test_lag": model.test_lag, **row,
                   "time": datetime.now(timezone.utc).isoformat()}
            history.append(rec)
            if history_path is not None:
                with open(history_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log.info("epoch %d val %s", epoch + 1, {k: rec[k] for k in ("MAE", "TS_0.1", "TS_1", "TS_10")})
            if _ts_key(row["TS_1"]) > best_ts:
                best_ts, best_epoch = _ts_key(row["TS_1"]), epoch + 1
                best = _copy_state(model)
    if best is not None:
        _restore_state(model, best)
    model.eval()
    return TrainResult(model, history, best_epoch=best_epoch,
                       optimizer_state={"main": main_opt.state_dict(), "rc": rc_opt.state_dict()})


def fit(splits: dict[str, SampleSet], cfg: TrainConfig, callback=None,
        history_path: str | Path | None = None, model: STAS | None = None) -> TrainResult:
    """Full schedule: spatial pretraining, plans, temporal pretraining, joint training."""
    cfg.validate()
    seed_everything(cfg)
    train, val = splits["train"].normalized(), splits["val"].normalized()
    check_capacity(train, cfg)
    if model is None:
        model = STAS(cfg, train.meta)
    if not getattr(model, "head_ready", False):
        model.backbone.regressor.ordinal.init_bias(train.labels[:, 0])
        model.head_ready = True
    sfm_hist: list[dict] = []
    if cfg.use_sfm and not getattr(model, "sfm_ready", False):
        sfm_hist = pretrain_sfm(model, train, cfg, val)
    plans, tables = compute_plans(model, train, cfg)
    model.test_plan = station_plan_table(plans, train.station_ids) if cfg.use_sfm else {}
    tfm_hist: list[dict] = []
    if cfg.use_tfm and not getattr(model, "tfm_ready", False):
        tfm_hist = pretrain_tfm(model, train, cfg, plans)
    result = train_joint(model, train, val, cfg, plans, tables, callback, history_path)
    result.sfm_history, result.tfm_history = sfm_hist, tfm_hist
    return result


def check_capacity(train: SampleSet, cfg: TrainConfig) -> None:
    top = float(train.labels[:, 0].max()) if len(train) else 0.0
    if cfg.n_ordinal * cfg.xi < top:
        raise ConfigError(f"ordinal head covers {cfg.n_ordinal * cfg.xi} mm but training rain "
                          f"reaches {top:.2f} mm; raise n_ordinal")


# ---------------------------------------------------------------------------
# inference and evaluation

def check_compatible(model: STAS, samples: SampleSet, cfg: TrainConfig | None = None) -> None:
    if cfg is not None and cfg.model_hash() != model.cfg.model_hash():
        raise ConfigError(f"config hash {cfg.model_hash()} does not match checkpoint "
                          f"{model.cfg.model_hash()}")
    for key in ("channel_names", "scale_ladder"):
        if list(samples.meta.get(key, [])) != list(model.meta[key]):
            raise ConfigError(f"dataset {key} {samples.meta.get(key)} differs from checkpoint "
                              f"{model.meta[key]}")
    if samples.lag_max != model.lag_max:
        raise ConfigError(f"dataset lag_max {samples.lag_max} differs from checkpoint {model.lag_max}")


@torch.no_grad()
def predict(model: STAS, samples: SampleSet, cfg: TrainConfig | None = None,
            batch_size: int | None = None) -> list[PredictionRecord]:
    """Eval-mode pipeline on normalized samples; deterministic for fixed parameters."""
    check_compatible(model, samples, cfg)
    was_training = model.training
    model.eval()
    size = batch_size or model.cfg.eval_batch_size
    out: list[PredictionRecord] = []
    for idx in _batches(len(samples), size, None):
        x = _tensor(samples.fields[idx])
        sids = samples.station_ids[idx]
        plan = model.plan_for(sids) if model.cfg.use_sfm else None
        z = model.backbone.encode(x, plan)
        _, y_tp = model.backbone.regressor(model.backbone.temporal_encode(z, model.test_lag))
        y_rc = classify_rain(model.rc(x[:, :, 0]))
        y_t = fuse(y_tp, y_rc)
        if not torch.all(torch.isfinite(y_t)):
            raise NumericalError("non-finite prediction")
        for sid, ts, a, r, t in zip(sids, samples.timestamps[idx], y_tp.tolist(), y_rc.tolist(),
                                    y_t.tolist()):
            out.append(PredictionRecord(str(sid), int(ts), float(a), float(r), float(t)))
    model.train(was_training)
    return out


def evaluate_records(records: Sequence[PredictionRecord], samples: SampleSet) -> dict:
    pred = np.array([r.y_t for r in records])
    return evaluate(pred, samples.labels[:, 0])


def stratified_rows(method: str, pred: np.ndarray, obs: np.ndarray, seed: int = 0,
                    only: str | None = None) -> list[dict]:
    """Report rows for the whole split, the three intensity classes and their 9:3:1 mixture."""
    parts = partition_by_intensity(obs)
    subsets = {"all": np.arange(len(obs)), **parts}
    total = max_mix_total(parts)
    subsets["ECbMi"] = mix_ratio(parts, total, seed=seed) if total else np.arange(0)
    rows = []
    for name, idx in subsets.items():
        if only is not None and name != only:
            continue
        if len(idx) == 0:
            row = {"MAE": None, "MAPE": None, "TS_0.1": None, "TS_1": None, "TS_10": None}
        else:
            row = evaluate(pred[idx], obs[idx])
        rows.append({"split": name, "method": method, **row})
    return rows


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, result: TrainResult | STAS, history: list[dict] | None = None
                    ) -> Path:
    """Flat little-endian float32 blob plus a JSON manifest of names, shapes and offsets."""
    model = result.model if isinstance(result, TrainResult) else result
    history = result.history if isinstance(result, TrainResult) else (history or [])
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    blobs = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4").ravel()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
        blobs.append(arr)
    (np.concatenate(blobs) if blobs else np.zeros(0, "<f4")).tofile(path / PARAMS_FILE)
    manifest = {
        "format": "stas-checkpoint/1",
        "config": to_dict(model.cfg),
        "config_hash": model.cfg.model_hash(),
        "epoch": result.best_epoch if isinstance(result, TrainResult) else None,
        "meta": model.meta,
        "test_plan": model.test_plan,
        "test_lag": model.test_lag,
        "sfm_ready": bool(getattr(model, "sfm_ready", False)),
        "tfm_ready": bool(getattr(model, "tfm_ready", False)),
        "head_ready": bool(getattr(model, "head_ready", False)),
        "tensors": tensors,
        "history": [{k: v for k, v in h.items()} for h in history],
    }
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if isinstance(result, TrainResult) and result.optimizer_state is not None:
        torch.save(result.optimizer_state, path / OPTIMIZER_FILE)
    return path


def load_checkpoint(path: str | Path) -> STAS:
    path = Path(path)
    if not (path / MANIFEST_FILE).exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    manifest = json.loads((path / MANIFEST_FILE).read_text())
    cfg = from_dict(TrainConfig, manifest["config"])
    if cfg.model_hash() != manifest["config_hash"]:
        raise ConfigError("checkpoint config hash does not match its stored config")
    model = STAS(cfg, manifest["meta"])
    flat = np.fromfile(path / PARAMS_FILE, dtype="<f4")
    state = {}
    for entry in manifest["tensors"]:
        chunk = flat[entry["offset"]:entry["offset"] + entry["count"]]
        state[entry["name"]] = torch.from_numpy(chunk.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    model.test_plan = {k: list(v) for k, v in manifest["test_plan"].items()}
    model.test_lag = int(manifest["test_lag"])
    model.sfm_ready = manifest.get("sfm_ready", False)
    model.tfm_ready = manifest.get("tfm_ready", False)
    model.head_ready = manifest.get("head_ready", False)
    model.history = manifest.get("history", [])
    model.eval()
    return model
