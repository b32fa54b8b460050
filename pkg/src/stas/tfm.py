"""Temporal lag selection: per-element temporal predictors over encoded sequences, weighted MAE, argmin."""

from __future__ import annotations

from typing import Mapping, Sequence

import torch
from torch import nn

from .blocks import RankRegressor
from .config import ME_NAMES


def _uniform(shape: tuple[int, ...], fan_in: int) -> nn.Parameter:
    bound = fan_in ** -0.5
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class MeTemporalBank(nn.Module):
    """One temporal predictor per element, evaluated together.

    Each element owns: 3D conv -> three (pool + FC) branches -> concat -> FC ->
    output head. The branches pool differently: mean over the whole volume, max
    over it, and mean over the newest step only. The rain head is optionally a
    rank regressor. Input is (B, C, ell, u, u) ordered oldest to newest.
    """

    def __init__(self, in_channels: int, channels: int = 8, n_elements: int = 5,
                 rank_regressor: bool = False, n_bins: int = 20, interval: float = 1.5,
                 candidates: Sequence[int] = (1, 2, 3, 4)):
        super().__init__()
        G, m = n_elements, channels
        self.n_elements, self.channels = G, m
        self.candidates = tuple(candidates)
        self.conv = nn.Sequential(nn.Conv3d(in_channels, G * m, 3, padding=1), nn.ReLU())
        self.branch_weight = _uniform((3, G, m, 6), m)
        self.branch_bias = _uniform((3, G, 6), m)
        self.fc_weight = _uniform((G, 18, 18), 18)
        self.fc_bias = _uniform((G, 18), 18)
        self.head_weight = _uniform((G, 18), 18)
        self.head_bias = _uniform((G,), 18)
        self.rain_head = RankRegressor(18, n_bins, interval) if rank_regressor else None

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """(B, C, ell, u, u) -> (B, n_elements)."""
        if seq.shape[2] not in self.candidates:
            raise ValueError(f"sequence length {seq.shape[2]} outside candidate set {self.candidates}")
        B, G, m = seq.shape[0], self.n_elements, self.channels
        f = self.conv(seq)
        pooled = torch.stack([f.mean(dim=(2, 3, 4)), f.amax(dim=(2, 3, 4)),
                              f[:, :, -1].mean(dim=(2, 3))]).view(3, B, G, m)
        branches = torch.relu(torch.einsum("rbgm,rgmo->rbgo", pooled, self.branch_weight)
                              + self.branch_bias.unsqueeze(1))
        z = branches.permute(1, 2, 0, 3).reshape(B, G, 18)
        z = torch.relu(torch.einsum("bgi,gio->bgo", z, self.fc_weight) + self.fc_bias)
        out = (z * self.head_weight).sum(-1) + self.head_bias
        if self.rain_head is not None:
            out = torch.cat([self.rain_head(z[:, 0]).unsqueeze(-1), out[:, 1:]], dim=-1)
        return out


def truncate(latents: torch.Tensor, ell: int) -> torch.Tensor:
    """(B, L, C, u, u) newest first -> (B, C, ell, u, u) holding the ell newest steps, oldest first."""
    if ell > latents.shape[1]:
        raise ValueError(f"lag length {ell} exceeds the {latents.shape[1]} available steps")
    return latents[:, :ell].flip(1).permute(0, 2, 1, 3, 4)


class TemporalSelector(nn.Module):
    def __init__(self, in_channels: int, candidates: Sequence[int] = (1, 2, 3, 4),
                 me_weights: Sequence[float] = (2, 1, 1, 1, 1),
                 enabled: Sequence[bool] = (True,) * 5, channels: int = 8,
                 rank_regressor: bool = True, n_bins: int = 20, interval: float = 1.5):
        super().__init__()
        self.candidates = tuple(int(c) for c in candidates)
        self.bank = MeTemporalBank(in_channels, channels, len(ME_NAMES), rank_regressor, n_bins,
                                   interval, self.candidates)
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

    def mtm_forward(self, seq: torch.Tensor, me_index: int) -> torch.Tensor:
        if not 0 <= me_index < self.bank.n_elements:
            raise IndexError(f"unknown meteorological element index {me_index}")
        return self.bank(seq)[:, me_index]

    def temporal_total_loss(self, latents: torch.Tensor, labels: torch.Tensor, ell: int) -> torch.Tensor:
        """Per-sample weighted absolute error over elements for the ell newest steps, shape (B,)."""
        seq = truncate(latents, ell)
        preds = self.bank(seq)
        targets = (labels - self.label_mean) / self.label_std
        return (self.weights * (preds - targets).abs()).sum(-1)

    def loss_table(self, latents: torch.Tensor, labels: torch.Tensor) -> dict[int, torch.Tensor]:
        """Batch-mean temporal loss per candidate length that fits the sequence."""
        return {ell: self.temporal_total_loss(latents, labels, ell).mean()
                for ell in self.candidates if ell <= latents.shape[1]}


def select_lag(loss_table: Mapping[int, float]) -> int:
    """Lag length with the smallest loss; ties go to the shorter length."""
    if not loss_table:
        raise ValueError("empty temporal loss table")
    return min(loss_table, key=lambda ell: (float(loss_table[ell]), ell))
