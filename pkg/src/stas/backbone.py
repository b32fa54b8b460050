"""Denoising encoder-decoder, ConvLSTM temporal encoder, ordinal precipitation head, rain classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import ConvLSTM, OrdinalHead, inject_noise
from .data import center_crop


class Encoder(nn.Module):
    """conv1x1 -> conv3x3 -> adaptive pool to the uniform size -> reflect pad by one -> noise."""

    def __init__(self, in_channels: int, channels: int = 16, latent_size: int = 16):
        super().__init__()
        self.latent_size = latent_size
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, channels, 1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU())

    @property
    def out_size(self) -> int:
        return self.latent_size + 2

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        z = F.adaptive_avg_pool2d(self.body(crop), self.latent_size)
        return F.pad(z, (1, 1, 1, 1), mode="reflect")


class Decoder(nn.Module):
    """Bottleneck code Z (half resolution, half channels) and its upsampled reconstruction."""

    def __init__(self, channels: int = 16, out_size: int = 18):
        super().__init__()
        self.out_size = out_size
        code = max(channels // 2, 1)
        self.squeeze = nn.Sequential(nn.AvgPool2d(2, ceil_mode=True), nn.Conv2d(channels, code, 1),
                                     nn.ReLU())
        self.expand = nn.Sequential(nn.Conv2d(code, channels, 3, padding=1), nn.ReLU(),
                                    nn.Conv2d(channels, channels, 3, padding=1))

    def code(self, z: torch.Tensor) -> torch.Tensor:
        return self.squeeze(z)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(self.code(z), size=self.out_size, mode="bilinear", align_corners=False)
        return self.expand(up)


def reconstruction_loss(noisy: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between the noisy latent and its decoded reconstruction."""
    return ((noisy - recon) ** 2).mean()


class RainClassifier(nn.Module):
    """conv3x3 -> global pool -> FC -> sigmoid on the current-time full-size crop."""

    def __init__(self, in_channels: int, input_scale: int, channels: int = 16):
        super().__init__()
        self.input_scale = input_scale
        self.net = nn.Sequential(nn.Conv2d(in_channels, channels, 3, padding=1), nn.ReLU(),
                                 nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels, 1))

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        if crop.shape[-1] != self.input_scale or crop.shape[-2] != self.input_scale:
            raise ValueError(f"rain classifier expects {self.input_scale}x{self.input_scale} crops, "
                             f"got {tuple(crop.shape[-2:])}")
        return torch.sigmoid(self.net(crop).squeeze(-1))


def classify_rain(prob):
    """Binarize classifier probabilities at 0.5 (inclusive)."""
    if isinstance(prob, torch.Tensor):
        return (prob >= 0.5).to(prob.dtype)
    return (np.asarray(prob) >= 0.5).astype(np.float64)


def fuse(y_tp, y_rc):
    if isinstance(y_tp, torch.Tensor):
        return y_tp * y_rc
    return np.asarray(y_tp, dtype=np.float64) * np.asarray(y_rc, dtype=np.float64)


class PrecipRegressor(nn.Module):
    """Pooled ConvLSTM summary -> ordinal classifiers.

    The summary concatenates the global mean of the hidden map with the mean of
    its central 2x2 block, where the station sits.
    """

    def __init__(self, hidden_channels: int, n_classes: int = 60, xi: float = 0.5,
                 theta: float = 0.5, width: int = 32):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * hidden_channels, width), nn.ReLU())
        self.ordinal = OrdinalHead(width, n_classes, xi, theta)

    def features(self, hidden: torch.Tensor) -> torch.Tensor:
        H, W = hidden.shape[-2:]
        r0, c0 = (H - 1) // 2, (W - 1) // 2
        center = hidden[:, :, r0:r0 + 2, c0:c0 + 2].mean(dim=(2, 3))
        return torch.cat([hidden.mean(dim=(2, 3)), center], dim=-1)

    def forward(self, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        probs = self.ordinal(self.mlp(self.features(hidden)))
        return probs, self.ordinal.decode(probs)


@dataclass
class ForwardOutput:
    latents: torch.Tensor
    recon: torch.Tensor
    hidden: torch.Tensor
    probs: torch.Tensor
    y_tp: torch.Tensor


class Backbone(nn.Module):
    """Encoder, decoder, ConvLSTM stack and ordinal regressor (no selection logic)."""

    def __init__(self, in_channels: int, scale_ladder, enc_channels: int = 16,
                 latent_size: int = 16, lstm_hidden: int = 16, lstm_layers: int = 2,
                 n_classes: int = 60, xi: float = 0.5, theta: float = 0.5,
                 noise_std: float = 1e-3):
        super().__init__()
        self.scale_ladder = tuple(int(s) for s in scale_ladder)
        self.uniform_scale = max(self.scale_ladder)
        self.noise_std = noise_std
        self.encoder = Encoder(in_channels, enc_channels, latent_size)
        # fixes the latent scale; otherwise the other losses inflate it and the
        # latent-to-latent reconstruction loss is not comparable across training
        self.latent_norm = nn.BatchNorm2d(enc_channels, affine=False)
        self.decoder = Decoder(enc_channels, self.encoder.out_size)
        self.lstm = ConvLSTM(enc_channels, lstm_hidden, lstm_layers)
        self.regressor = PrecipRegressor(lstm_hidden, n_classes, xi, theta)

    def encode(self, fields: torch.Tensor, plan: np.ndarray | None,
               generator: torch.Generator | None = None) -> torch.Tensor:
        """Latent sequence (B, L, C_e, u+2, u+2), newest first.

        fields: (B, C, L, S, S) stored at the largest scale; plan: (B, L-1) scales for
        lags 1..L-1 (None keeps every lag at the largest scale). All lags share one batch
        normalization without affine terms. Noise is added only in training mode.
        """
        B, _, L = fields.shape[:3]
        if plan is not None and (plan.shape[0] != B or plan.shape[1] != L - 1):
            raise ValueError(f"scale plan shape {plan.shape} does not match batch {B} x lags {L - 1}")
        lags = [self.encoder(fields[:, :, 0])]
        for k in range(1, L):
            if plan is None:
                lags.append(self.encoder(fields[:, :, k]))
                continue
            out = lags[0].new_empty(lags[0].shape)
            for s in np.unique(plan[:, k - 1]):
                idx = torch.as_tensor(np.flatnonzero(plan[:, k - 1] == s))
                out = out.index_copy(0, idx, self.encoder(center_crop(fields[idx, :, k], int(s))))
            lags.append(out)
        z = torch.stack(lags, dim=1)
        z = self.latent_norm(z.flatten(0, 1)).view_as(z)
        return inject_noise(z, self.noise_std, generator, self.training)

    def temporal_encode(self, latents: torch.Tensor, ell: int) -> torch.Tensor:
        if ell < 1 or ell > latents.shape[1]:
            raise ValueError(f"lag length {ell} outside 1..{latents.shape[1]}")
        return self.lstm(latents[:, :ell].flip(1))

    def forward(self, fields: torch.Tensor, plan: np.ndarray | None, ell: int,
                generator: torch.Generator | None = None) -> ForwardOutput:
        z = self.encode(fields, plan, generator)
        hidden = self.temporal_encode(z, ell)
        probs, y_tp = self.regressor(hidden)
        return ForwardOutput(z, self.decoder(z.flatten(0, 1)).view_as(z), hidden, probs, y_tp)
