"""Run configuration: generator and training settings plus the flat config-file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

log = logging.getLogger(__name__)

ME_NAMES = ("rain", "temp", "pressure", "wind", "dew")
SCALE_LADDER = (29, 15, 7, 3)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(RuntimeError):
    """A loss or prediction became non-finite."""


@dataclass
class GeneratorConfig:
    height: int = 48
    width: int = 48
    n_timestamps: int = 120
    n_stations: int = 8
    n_channels: int = 8
    n_cells: int = 10
    cell_amplitude: float = 16.0
    cell_speed: float = 1.2
    bias: float = 1.0
    obs_noise: float = 0.05
    rain_fraction: float = 0.35
    scale_ladder: tuple[int, ...] = SCALE_LADDER
    lag_max: int = 4
    split_fractions: tuple[float, ...] = (0.7, 0.15, 0.15)
    start_hour: int = 0

    def validate(self) -> None:
        ladder = self.scale_ladder
        if not ladder or any(s < 1 or s % 2 == 0 for s in ladder):
            raise ConfigError(f"scale_ladder must hold odd positive sizes, got {ladder}")
        if list(ladder) != sorted(ladder, reverse=True):
            raise ConfigError(f"scale_ladder must be listed largest first, got {ladder}")
        if self.n_channels < 5:
            raise ConfigError("n_channels must cover the 5 meteorological elements")
        if self.n_stations < 1:
            raise ConfigError("n_stations must be >= 1")
        if self.lag_max < 1:
            raise ConfigError("lag_max must be >= 1")
        if self.n_timestamps < self.lag_max + 1:
            raise ConfigError(
                f"n_timestamps={self.n_timestamps} must be at least lag_max+1={self.lag_max + 1}")
        if not 0.0 < self.rain_fraction < 1.0:
            raise ConfigError("rain_fraction must lie in (0, 1)")
        if self.bias < 0 or self.obs_noise < 0:
            raise ConfigError("bias and obs_noise must be non-negative")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three fractions summing to 1")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    eval_batch_size: int = 64
    epochs: int = 80
    eval_every: int = 6
    sfm_epochs: int = 10
    tfm_epochs: int = 10
    me_weights: tuple[float, ...] = (2.0, 1.0, 1.0, 1.0, 1.0)
    noise_std: float = 1e-3
    xi: float = 0.5
    theta: float = 0.5
    n_ordinal: int = 60
    rank_interval: float = 1.5
    n_rank_bins: int = 20
    lambda_rec: float = 0.1
    lambda_tfm: float = 1.0
    rain_threshold: float = 0.1
    latent_size: int = 16
    enc_channels: int = 16
    msm_channels: int = 8
    mtm_channels: int = 8
    lstm_hidden: int = 16
    lstm_layers: int = 2
    seed: int = 0
    threads: int = 1
    use_sfm: bool = True
    use_tfm: bool = True
    msm_mask: str = "11111"
    mtm_mask: str = "11111"
    deformable: bool = True
    rank_regressor: bool = True
    sfm_batch_mode: str = "sample"
    finetune_sfm: bool = False

    def validate(self) -> None:
        for name in ("lr", "xi", "theta", "rank_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "eval_batch_size", "epochs", "eval_every", "n_ordinal",
                     "n_rank_bins", "latent_size", "enc_channels", "lstm_hidden", "lstm_layers",
                     "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if len(self.me_weights) != 5 or any(w < 0 for w in self.me_weights):
            raise ConfigError("me_weights needs 5 non-negative entries")
        for name in ("msm_mask", "mtm_mask"):
            mask = getattr(self, name)
            if len(mask) != 5 or set(mask) - {"0", "1"}:
                raise ConfigError(f"{name} must be 5 characters of 0/1, got {mask!r}")
        if self.use_sfm and "1" not in self.msm_mask:
            raise ConfigError("use_sfm requires at least one enabled spatial module")
        if self.sfm_batch_mode not in ("sample", "majority"):
            raise ConfigError("sfm_batch_mode must be 'sample' or 'majority'")
        if self.noise_std < 0 or self.lambda_rec < 0 or self.lambda_tfm < 0:
            raise ConfigError("noise_std, lambda_rec and lambda_tfm must be non-negative")

    @property
    def msm_enabled(self) -> tuple[bool, ...]:
        return tuple(ch == "1" for ch in self.msm_mask)

    @property
    def mtm_enabled(self) -> tuple[bool, ...]:
        return tuple(ch == "1" for ch in self.mtm_mask)

    def model_hash(self) -> str:
        """Hash of the fields that shape the network; checkpoints are bound to it."""
        keys = ("xi", "n_ordinal", "rank_interval", "n_rank_bins", "latent_size", "enc_channels",
                "msm_channels", "mtm_channels", "lstm_hidden", "lstm_layers", "use_sfm",
                "use_tfm", "msm_mask", "mtm_mask", "deformable", "rank_regressor")
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def desk_train_config(**overrides: Any) -> TrainConfig:
    """CPU-sized training settings (batch 32/16, short schedules)."""
    base = dict(lr=1e-3, batch_size=32, eval_batch_size=16, epochs=12, eval_every=6,
                sfm_epochs=4, tfm_epochs=4)
    base.update(overrides)
    return TrainConfig(**base)


def benchmark_generator_config(**overrides: Any) -> GeneratorConfig:
    """Directional benchmark data: 12 stations over 300 timestamps, crops from 17 down to 3."""
    base = dict(height=40, width=40, n_timestamps=300, n_stations=12, scale_ladder=(17, 13, 9))
    base.update(overrides)
    return GeneratorConfig(**base)


def benchmark_train_config(**overrides: Any) -> TrainConfig:
    """Training schedule paired with benchmark_generator_config (fits a 1-CPU budget)."""
    base = dict(latent_size=4, epochs=10, eval_every=2, sfm_epochs=2, tfm_epochs=2)
    base.update(overrides)
    return desk_train_config(**base)


def to_dict(cfg: GeneratorConfig | TrainConfig) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def from_dict(cls, data: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown {cls.__name__} key: {key}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)


def _coerce(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(elem(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


@dataclass
class RunConfig:
    """Both config objects resolved from a `key = value` file plus overrides."""

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def resolve(cls, path: str | Path | None = None,
                overrides: dict[str, str] | None = None,
                train: TrainConfig | None = None) -> "RunConfig":
        values: dict[str, str] = {}
        if path is not None:
            values.update(parse_config_file(path))
        values.update(overrides or {})
        gen = GeneratorConfig()
        trn = train if train is not None else TrainConfig()
        gen_fields = {f.name for f in fields(GeneratorConfig)}
        trn_fields = {f.name for f in fields(TrainConfig)}
        for key, raw in values.items():
            if key in gen_fields:
                setattr(gen, key, _coerce(raw, getattr(gen, key), key))
            elif key in trn_fields:
                setattr(trn, key, _coerce(raw, getattr(trn, key), key))
            else:
                raise ConfigError(f"unknown config key: {key}")
        gen.validate()
        trn.validate()
        run = cls(gen, trn)
        log.info("resolved config: %s", json.dumps(run.as_dict(), sort_keys=True))
        return run

    def as_dict(self) -> dict[str, Any]:
        return {**to_dict(self.generator), **to_dict(self.train)}


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
