"""Spatial scale selection: per-element spatial predictors, weighted spatial loss, argmin plan."""

from __future__ import annotations

from collections import Counter
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .blocks import DeformConv2d
from .config import ME_NAMES
from .data import GridFrame, StationGeometry, apply_normalization, center_crop, crop_multiscale


class MeSpatialBank(nn.Module):
    """One spatial predictor per element, evaluated together as a grouped network.

    Each element owns a conv1x1 -> conv3x3 -> deformable 3x3 (gamma 0.8) ->
    deformable 3x3 (gamma 0.6) -> global pool -> linear chain. Grouped convs keep
    the chains independent while sharing one pass over the crop. The 3x3 conv is
    padded so that the smallest 3x3 crop still reaches the deformable layers at
    full size.
    """

    def __init__(self, in_channels: int, channels: int = 8, n_elements: int = 5,
                 deformable: bool = True):
        super().__init__()
        G, width = n_elements, n_elements * channels
        self.n_elements, self.channels = G, channels
        if deformable:
            d1 = DeformConv2d(width, width, 3, gamma=0.8, groups=G)
            d2 = DeformConv2d(width, width, 3, gamma=0.6, groups=G)
        else:
            d1 = nn.Conv2d(width, width, 3, padding=1, groups=G)
            d2 = nn.Conv2d(width, width, 3, padding=1, groups=G)
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1, groups=G), nn.ReLU(),
            d1, nn.ReLU(), d2, nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head_weight = nn.Parameter(torch.empty(G, channels).uniform_(-channels ** -0.5,
                                                                          channels ** -0.5))
        self.head_bias = nn.Parameter(torch.zeros(G))

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        """(B, C, s, s) -> (B, n_elements)."""
        f = self.features(crop).view(-1, self.n_elements, self.channels)
        return (f * self.head_weight).sum(-1) + self.head_bias


class SpatialSelector(nn.Module):
    """Five element modules plus the weighted loss that ranks candidate scales.

    Non-rain labels are compared in standardized units (training mean/std);
    rain stays in mm.
    """

    def __init__(self, in_channels: int, scale_ladder: Sequence[int],
                 me_weights: Sequence[float] = (2, 1, 1, 1, 1),
                 enabled: Sequence[bool] = (True,) * 5, channels: int = 8,
                 deformable: bool = True):
        super().__init__()
        self.scale_ladder = tuple(int(s) for s in scale_ladder)
        self.bank = MeSpatialBank(in_channels, channels, len(ME_NAMES), deformable)
        w = torch.tensor([float(wi) * bool(e) for wi, e in zip(me_weights, enabled)])
        self.register_buffer("weights", w)
        self.register_buffer("label_mean", torch.zeros(5))
        self.register_buffer("label_std", torch.ones(5))

    def set_label_stats(self, mean: Sequence[float], std: Sequence[float]) -> None:
        mean = torch.as_tensor(mean, dtype=self.label_mean.dtype).clone()
        std = torch.as_tensor(std, dtype=self.label_std.dtype).clone()
        mean[0], std[0] = 0.0, 1.0
        self.label_mean.copy_(mean)
        self.label_std.copy_(std)

    def targets(self, labels: torch.Tensor) -> torch.Tensor:
        return (labels - self.label_mean) / self.label_std

    def msm_forward(self, crop: torch.Tensor, me_index: int) -> torch.Tensor:
        if not 0 <= me_index < self.bank.n_elements:
            raise IndexError(f"unknown meteorological element index {me_index}")
        return self.predictions(crop)[:, me_index]

    def predictions(self, crop: torch.Tensor) -> torch.Tensor:
        """(B, 5) predictions in target units."""
        side = crop.shape[-1]
        if side not in self.scale_ladder:
            raise ValueError(f"crop side {side} not in scale ladder {self.scale_ladder}")
        return self.bank(crop)

    def spatial_total_loss(self, crop: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Per-sample weighted squared error summed over elements, shape (B,)."""
        resid = self.predictions(crop) - self.targets(labels)
        return (self.weights * resid ** 2).sum(-1)

    @torch.no_grad()
    def scale_losses(self, lag_fields: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Loss for every ladder scale; lag_fields (B, C, S, S) at the largest scale -> (B, n_scales)."""
        return torch.stack([self.spatial_total_loss(center_crop(lag_fields, s), labels)
                            for s in self.scale_ladder], dim=-1)

    @torch.no_grad()
    def select_plan(self, fields: torch.Tensor, labels: torch.Tensor, batch_mode: str = "sample"
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Scales for lags 1..L-1 of fields (B, C, L, S, S).

        Returns the plan (B, L-1) and the loss tables (B, L-1, n_scales).
        """
        B, L = fields.shape[0], fields.shape[2]
        tables = np.zeros((B, max(L - 1, 0), len(self.scale_ladder)))
        for k in range(1, L):
            tables[:, k - 1] = self.scale_losses(fields[:, :, k], labels).double().cpu().numpy()
        plan = argmin_scales(tables, self.scale_ladder)
        if batch_mode == "majority" and plan.size:
            for k in range(plan.shape[1]):
                plan[:, k] = majority_scale(plan[:, k])
        return plan, tables


def select_scale(loss_table: Mapping[int, float]) -> int:
    """Scale with the smallest loss; ties go to the smaller scale."""
    if not loss_table:
        raise ValueError("empty spatial loss table")
    return min(loss_table, key=lambda s: (loss_table[s], s))


def argmin_scales(tables: np.ndarray, scale_ladder: Sequence[int]) -> np.ndarray:
    """Vectorized select_scale over the last axis of tables (columns follow scale_ladder)."""
    ladder = np.asarray(scale_ladder)
    order = np.argsort(ladder, kind="stable")
    pick = np.argmin(tables[..., order], axis=-1)
    return ladder[order][pick]


def majority_scale(scales: np.ndarray) -> int:
    counts = Counter(int(s) for s in scales)
    return min(counts, key=lambda s: (-counts[s], s))


@torch.no_grad()
def sfm_select_plan(selector: SpatialSelector, frames: Sequence[GridFrame],
                    station: StationGeometry, t: int, tau: int, labels: Sequence[float],
                    norm: dict | None = None) -> tuple[int, ...]:
    """Per-lag scales (s*_1, ..., s*_tau) for one station at frame index t."""
    if t - tau < 0:
        raise ValueError(f"not enough history for t={t}, tau={tau}: earliest admissible t is {tau}")
    param = next(selector.parameters())
    y = torch.as_tensor(np.asarray(labels, dtype=np.float64), dtype=param.dtype).unsqueeze(0)
    plan = []
    for k in range(1, tau + 1):
        crops = crop_multiscale(frames[t - k], station, selector.scale_ladder)
        table = {}
        for s, crop in zip(selector.scale_ladder, crops):
            if norm is not None:
                crop = apply_normalization(crop[None], norm)[0]
            x = torch.as_tensor(crop, dtype=param.dtype).unsqueeze(0)
            table[s] = float(selector.spatial_total_loss(x, y)[0])
        plan.append(select_scale(table))
    return tuple(plan)
