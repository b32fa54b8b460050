"""Differentiable building blocks: deformable conv, ConvLSTM, ordinal and rank heads, latent noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class DeformConv2d(nn.Module):
    """Deformable convolution with bilinear sampling, stride 1 and 'same' output size.

    A companion conv predicts 2*k*k offset maps per group, laid out (dy, dx) per
    kernel tap. Sampling positions are the regular grid plus ``gamma`` times those
    offsets; positions outside the input read zeros. With ``groups > 1`` the
    channels split into independent blocks, each with its own offsets.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 gamma: float = 1.0, bias: bool = True, groups: int = 1):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"deformable conv needs an odd kernel, got {kernel_size}")
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"channels {in_channels}->{out_channels} not divisible by {groups} groups")
        self.kernel_size = kernel_size
        self.gamma = gamma
        self.groups = groups
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels // groups, kernel_size,
                                               kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        self.offset = nn.Conv2d(in_channels, 2 * groups * kernel_size * kernel_size, kernel_size,
                                padding=kernel_size // 2, groups=groups)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return deform_conv2d(x, self.offset(x), self.weight, self.bias, self.gamma, self.groups)


def _tap_grid(k: int, dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    r = k // 2
    ky, kx = torch.meshgrid(torch.arange(-r, r + 1, dtype=dtype, device=device),
                            torch.arange(-r, r + 1, dtype=dtype, device=device), indexing="ij")
    return ky.reshape(-1), kx.reshape(-1)


def bilinear_gather(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample x (B, C, H, W) at fractional positions py, px (B, K, H', W').

    Returns (B, C, K, H', W'). Corners outside the image contribute zero.
    """
    B, C, H, W = x.shape
    K, Ho, Wo = py.shape[1:]
    # grid_sample with align_corners=True maps -1/+1 onto the first/last pixel centers
    gx = 2 * px / max(W - 1, 1) - 1
    gy = 2 * py / max(H - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1).reshape(B, K * Ho, Wo, 2)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.view(B, C, K, Ho, Wo)


def deform_conv2d(x: torch.Tensor, offset: torch.Tensor, weight: torch.Tensor,
                  bias: torch.Tensor | None = None, gamma: float = 1.0,
                  groups: int = 1) -> torch.Tensor:
    B, C, H, W = x.shape
    O, Ci, k, _ = weight.shape
    if Ci * groups != C:
        raise ValueError(f"weight expects {Ci * groups} input channels, input has {C}")
    K, G = k * k, groups
    ky, kx = _tap_grid(k, x.dtype, x.device)
    rows = torch.arange(H, dtype=x.dtype, device=x.device).view(1, 1, H, 1)
    cols = torch.arange(W, dtype=x.dtype, device=x.device).view(1, 1, 1, W)
    off = offset.reshape(B * G, K, 2, H, W)
    py = rows + ky.view(1, K, 1, 1) + gamma * off[:, :, 0]
    px = cols + kx.view(1, K, 1, 1) + gamma * off[:, :, 1]
    sampled = bilinear_gather(x.reshape(B * G, Ci, H, W), py, px).view(B, G, Ci, K, H, W)
    out = torch.einsum("bgckhw,gock->bgohw", sampled, weight.reshape(G, O // G, Ci, K))
    out = out.reshape(B, O, H, W)
    if bias is not None:
        out = out + bias.view(1, O, 1, 1)
    return out


# ---------------------------------------------------------------------------
# ConvLSTM

@dataclass
class ConvLSTMState:
    h: torch.Tensor
    c: torch.Tensor


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell; gates ordered input, forget, output, candidate."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, kernel_size,
                               padding=kernel_size // 2)

    def init_state(self, x: torch.Tensor) -> ConvLSTMState:
        B, _, H, W = x.shape
        z = x.new_zeros(B, self.hidden_channels, H, W)
        return ConvLSTMState(z, z.clone())

    def forward(self, x: torch.Tensor, state: ConvLSTMState | None = None) -> ConvLSTMState:
        return conv_lstm_step(x, self.init_state(x) if state is None else state, self)


def conv_lstm_step(x: torch.Tensor, state: ConvLSTMState, cell: ConvLSTMCell) -> ConvLSTMState:
    if x.dim() != 4 or x.shape[1] != cell.in_channels:
        raise ValueError(f"input shape {tuple(x.shape)} does not match {cell.in_channels} channels")
    if x.shape[0] != state.h.shape[0] or x.shape[-2:] != state.h.shape[-2:]:
        raise ValueError(f"input batch/spatial dims {tuple(x.shape[:1]) + tuple(x.shape[-2:])} "
                         f"differ from state dims {tuple(state.h.shape[:1]) + tuple(state.h.shape[-2:])}")
    i, f, o, g = cell.gates(torch.cat([x, state.h], dim=1)).chunk(4, dim=1)
    c = torch.sigmoid(f) * state.c + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return ConvLSTMState(h, c)


class ConvLSTM(nn.Module):
    """Stacked ConvLSTM; consumes a sequence oldest to newest, returns the top hidden map."""

    def __init__(self, in_channels: int, hidden_channels: int, num_layers: int = 2):
        super().__init__()
        self.cells = nn.ModuleList(
            ConvLSTMCell(in_channels if n == 0 else hidden_channels, hidden_channels)
            for n in range(num_layers))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        # seq: (B, T, C, H, W), oldest first
        states: list[ConvLSTMState | None] = [None] * len(self.cells)
        for t in range(seq.shape[1]):
            inp = seq[:, t]
            for n, cell in enumerate(self.cells):
                states[n] = cell(inp, states[n])
                inp = states[n].h
        return states[-1].h


# ---------------------------------------------------------------------------
# ordinal regression

def ordinal_thresholds(xi: float, n_classes: int) -> np.ndarray:
    return xi * np.arange(n_classes)


def ordinal_encode(y, xi: float = 0.5, n_classes: int = 60):
    """Binary targets: classifier v fires iff y > v * xi. Works on floats, arrays and tensors."""
    if isinstance(y, torch.Tensor):
        th = torch.arange(n_classes, dtype=y.dtype, device=y.device) * xi
        return (y.unsqueeze(-1) > th).to(y.dtype)
    y = np.asarray(y, dtype=np.float64)
    return (y[..., None] > ordinal_thresholds(xi, n_classes)).astype(np.float64)


def ordinal_decode(p, xi: float = 0.5, theta: float = 0.5):
    """Precipitation from classifier probabilities: xi times the count of p_v >= theta."""
    if isinstance(p, torch.Tensor):
        return xi * (p >= theta).sum(dim=-1).to(p.dtype)
    p = np.asarray(p, dtype=np.float64)
    return xi * (p >= theta).sum(axis=-1)


class OrdinalHead(nn.Module):
    """c independent binary classifiers over a shared feature vector."""

    def __init__(self, in_features: int, n_classes: int = 60, xi: float = 0.5, theta: float = 0.5):
        super().__init__()
        self.n_classes = n_classes
        self.xi = xi
        self.theta = theta
        self.linear = nn.Linear(in_features, n_classes)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(feats))

    def decode(self, probs: torch.Tensor) -> torch.Tensor:
        return ordinal_decode(probs, self.xi, self.theta)

    def loss(self, probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """BCE summed over the classifiers, averaged over the batch."""
        target = ordinal_encode(y, self.xi, self.n_classes)
        bce = F.binary_cross_entropy(probs.clamp(1e-7, 1 - 1e-7), target, reduction="none")
        return bce.sum(-1).mean()

    @torch.no_grad()
    def init_bias(self, y) -> None:
        """Start each classifier at the logit of its training base rate."""
        rate = ordinal_encode(torch.as_tensor(y, dtype=torch.float64), self.xi, self.n_classes).mean(0)
        rate = rate.clamp(1e-3, 1 - 1e-3)
        self.linear.bias.copy_(torch.log(rate / (1 - rate)).to(self.linear.bias.dtype))


# ---------------------------------------------------------------------------
# rank regression

def rank_bin_centers(interval: float, n_bins: int) -> np.ndarray:
    return interval * (np.arange(n_bins) + 0.5)


def rank_regress_decode(distribution, refinement, interval: float = 1.5):
    """Expected bin center plus refinement, floored at zero."""
    if isinstance(distribution, torch.Tensor):
        if torch.any(distribution < 0):
            raise ValueError("bin probabilities must be non-negative")
        n = distribution.shape[-1]
        centers = interval * (torch.arange(n, dtype=distribution.dtype, device=distribution.device) + 0.5)
        return torch.clamp((distribution * centers).sum(-1) + refinement, min=0.0)
    dist = np.asarray(distribution, dtype=np.float64)
    if np.any(dist < 0):
        raise ValueError("bin probabilities must be non-negative")
    if np.any(np.abs(dist.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("bin probabilities must sum to 1")
    centers = rank_bin_centers(interval, dist.shape[-1])
    return np.maximum((dist * centers).sum(axis=-1) + np.asarray(refinement, dtype=np.float64), 0.0)


class RankRegressor(nn.Module):
    """Two-branch head: softmax over fixed-width value bins plus a scalar refinement."""

    def __init__(self, in_features: int, n_bins: int = 20, interval: float = 1.5):
        super().__init__()
        self.interval = interval
        self.bins = nn.Linear(in_features, n_bins)
        self.refine = nn.Linear(in_features, 1)

    def distribution(self, feats: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.bins(feats), dim=-1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return rank_regress_decode(self.distribution(feats), self.refine(feats).squeeze(-1),
                                   self.interval)


# ---------------------------------------------------------------------------

def inject_noise(z: torch.Tensor, sigma: float, generator: torch.Generator | None = None,
                 training: bool = True) -> torch.Tensor:
    if sigma < 0:
        raise ValueError("noise std must be non-negative")
    if not training or sigma == 0:
        return z
    eps = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    return z + sigma * eps
