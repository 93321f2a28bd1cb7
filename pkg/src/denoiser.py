"""Point-denoising network: a small time-conditioned U-Net predicting x0.

In continuous mode the network maps a noisy image to an x0 estimate; in
discrete mode it embeds tokens (mask included) and returns a distribution over
the K clean tokens at every position. Either way the output of the last
decoder block is exposed as the feature tap for the context head.
"""
import math
import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserCfg:
    mode: str = 'continuous'
    in_channels: int = 1
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 2)
    time_dim: int = 64
    num_timesteps: int = 2000
    num_tokens: int = 8
    token_dim: int = 16
    tap: str = 'penultimate'

    @property
    def tap_dim(self):
        return self.base_channels * self.channel_mults[0]


@dataclass
class PointPrediction:
    primary: torch.Tensor                   # x0 estimate (B, C, H, W) or token probabilities (B, K, H, W)
    tap: torch.Tensor                       # (B, tap_dim, H, W)
    t_emb: torch.Tensor                     # (B, time_dim)
    log_probs: Optional[torch.Tensor] = None


def time_embedding(t, dim):
    """Sinusoidal embedding [sin(t w_k), cos(t w_k)] with w_k = 10000^(-k / (dim / 2))."""
    if dim < 2 or dim % 2:
        raise ParameterError(f"time embedding dim must be even and >= 2, got {dim}")
    t = torch.as_tensor(t)
    scalar = t.ndim == 0
    t = t.reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, out_channels)
        # FiLM conditioning on the time embedding
        self.time_mlp = nn.Linear(time_dim, out_channels * 2)

    def forward(self, x, t_emb):
        gamma, beta = self.time_mlp(t_emb).chunk(2, dim=1)
        gamma = gamma[:, :, None, None]
        beta = beta[:, :, None, None]
        h = F.silu(self.norm1(self.conv1(x)) * (1 + gamma) + beta)
        h = F.silu(self.norm2(self.conv2(h)) * (1 + gamma) + beta)
        return h


class UNetDenoiser(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        if cfg.mode not in ('continuous', 'discrete'):
            raise ParameterError(f"Unknown denoiser mode: {cfg.mode}")
        self.cfg = cfg
        channels = [cfg.base_channels * m for m in cfg.channel_mults]

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )

        if cfg.mode == 'discrete':
            # K clean tokens plus the mask token
            self.token_embedding = nn.Embedding(cfg.num_tokens + 1, cfg.token_dim)
            in_channels, out_channels = cfg.token_dim, cfg.num_tokens
        else:
            self.token_embedding = None
            in_channels, out_channels = cfg.in_channels, cfg.in_channels

        self.encoders = nn.ModuleList()
        prev = in_channels
        for ch in channels:
            self.encoders.append(ConvBlock(prev, ch, cfg.time_dim))
            prev = ch
        self.pool = nn.MaxPool2d(2)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(len(channels) - 1)):
            self.ups.append(nn.ConvTranspose2d(channels[level + 1], channels[level], 2, stride=2))
            self.decoders.append(ConvBlock(channels[level] * 2, channels[level], cfg.time_dim))

        self.final_conv = nn.Conv2d(channels[0], out_channels, 1)

    def embed_time(self, t):
        emb = time_embedding(t, self.cfg.time_dim).to(dtype=self.final_conv.weight.dtype, device=self.final_conv.weight.device)
        return self.time_mlp(emb)

    def forward(self, xt, t):
        """xt: image (B, C, H, W) or tokens (B, H, W); t: (B,) training timesteps."""
        t = torch.as_tensor(t, device=xt.device).reshape(-1)
        if t.numel() == 1 and xt.shape[0] > 1:
            t = t.expand(xt.shape[0])
        if int(t.min()) < 1 or int(t.max()) > self.cfg.num_timesteps:
            raise ParameterError(f"t must lie in [1, {self.cfg.num_timesteps}], got {int(t.min())}..{int(t.max())}")

        t_emb = self.embed_time(t)
        h = self.token_embedding(xt).permute(0, 3, 1, 2) if self.cfg.mode == 'discrete' else xt

        skips = []
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                h = self.pool(h)
            h = encoder(h, t_emb)
            skips.append(h)

        h = skips.pop()
        for up, decoder in zip(self.ups, self.decoders):
            h = decoder(torch.cat([up(h), skips.pop()], dim=1), t_emb)
        tap = h
        out = self.final_conv(tap)

        if not torch.isfinite(out).all():
            raise NumericError(f"non-finite denoiser output at t in {t.unique().tolist()}")

        if self.cfg.mode == 'discrete':
            log_probs = F.log_softmax(out, dim=1)
            return PointPrediction(primary=log_probs.exp(), tap=tap, t_emb=t_emb, log_probs=log_probs)
        return PointPrediction(primary=out, tap=tap, t_emb=t_emb)


def denoise_point(model, xt, t):
    """Run the point denoiser; returns x0 (or token distribution) plus the feature tap."""
    return model(xt, t)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
