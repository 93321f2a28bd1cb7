"""Neighborhood context heads attached to the denoiser's feature tap during training.

Two variants share the same two non-linear blocks:

* ``FeatureDecoder`` predicts all K_n neighbor vectors at once (output K_n * d).
* ``DistributionDecoder`` predicts a diagonal Gaussian and pushes q reparameterized
  samples through FNN_n, so its size does not depend on the neighborhood.

Both operate per position on channel-last vectors, i.e. a 1x1 convolution
over the tap.
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContextHeadInvokedError, NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureDecoderCfg:
    in_dim: int
    d: int
    k_n: int
    hidden: tuple = (64, 64)
    time_dim: int = 64


@dataclass(frozen=True)
class DistributionDecoderCfg:
    in_dim: int
    d: int
    hidden: tuple = (64, 64)
    time_dim: int = 64
    logvar_min: float = -10.0
    logvar_max: float = 4.0


class NonLinearBlock(nn.Module):
    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.norm = nn.LayerNorm(out_dim)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(self.linear(x)))


class ContextHead(nn.Module):
    """Base class that counts evaluations and refuses to run while locked."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.calls = 0
        self.locked = False
        h1, h2 = cfg.hidden
        self.trunk = nn.Sequential(NonLinearBlock(cfg.in_dim + cfg.time_dim, h1), NonLinearBlock(h1, h2))

    def _enter(self, points, t_emb):
        if self.locked:
            raise ContextHeadInvokedError("context head evaluated while locked for inference")
        self.calls += 1
        if points.shape[-1] != self.cfg.in_dim:
            raise ShapeError(f"point dim {points.shape[-1]} != decoder in_dim {self.cfg.in_dim}")
        if t_emb.shape[-1] != self.cfg.time_dim:
            raise ShapeError(f"time embedding dim {t_emb.shape[-1]} != decoder time_dim {self.cfg.time_dim}")
        return self.trunk(torch.cat([points, t_emb], dim=-1))


class FeatureDecoder(ContextHead):
    variant = 'feature'

    def __init__(self, cfg):
        super().__init__(cfg)
        self.out = nn.Linear(cfg.hidden[1], cfg.k_n * cfg.d)

    def forward(self, points, t_emb):
        """(N, in_dim), (N, time_dim) -> (N, K_n, d) in neighbor offset order."""
        h = self._enter(points, t_emb)
        return self.out(h).reshape(*points.shape[:-1], self.cfg.k_n, self.cfg.d)


class DistributionDecoder(ContextHead):
    variant = 'distribution'

    def __init__(self, cfg):
        super().__init__(cfg)
        h2 = cfg.hidden[1]
        self.fnn_mu = nn.Linear(h2, cfg.d)
        self.fnn_sigma = nn.Linear(h2, cfg.d)
        self.fnn_n = nn.Sequential(NonLinearBlock(cfg.d, h2), nn.Linear(h2, cfg.d))

    def moments(self, points, t_emb):
        """Mean and clamped log-variance of the latent Gaussian for each point."""
        h = self._enter(points, t_emb)
        mu = self.fnn_mu(h)
        logvar = self.fnn_sigma(h)
        bad = ~(torch.isfinite(mu).all(-1) & torch.isfinite(logvar).all(-1))
        if bad.any():
            position = torch.nonzero(bad)[0].tolist()
            raise NumericError(f"non-finite mean or log-variance at position {position}")
        return mu, logvar.clamp(self.cfg.logvar_min, self.cfg.logvar_max)

    def forward(self, points, t_emb, q, generator=None):
        """(N, in_dim), (N, time_dim) -> (N, q, d) samples of FNN_n(xi), xi ~ N(mu, diag(exp(logvar)))."""
        if q < 1:
            raise ParameterError(f"q must be >= 1, got {q}")
        mu, logvar = self.moments(points, t_emb)
        eps = torch.randn(
            (*mu.shape[:-1], q, mu.shape[-1]), generator=generator, dtype=mu.dtype, device='cpu'
        ).to(mu.device)
        xi = mu.unsqueeze(-2) + torch.exp(0.5 * logvar).unsqueeze(-2) * eps
        return self.fnn_n(xi)


def build_context_head(cfg):
    if isinstance(cfg, FeatureDecoderCfg):
        return FeatureDecoder(cfg)
    if isinstance(cfg, DistributionDecoderCfg):
        return DistributionDecoder(cfg)
    raise ParameterError(f"Unknown decoder config: {type(cfg).__name__}")


def decode_features(decoder, point, t_emb):
    """K_n neighbor predictions for a single point vector."""
    if point.ndim != 1:
        raise ShapeError(f"expected a single point vector, got shape {tuple(point.shape)}")
    return decoder(point.unsqueeze(0), t_emb.reshape(1, -1))[0]


def decode_distribution_samples(decoder, point, t_emb, q, generator=None):
    """q samples of the decoded neighborhood distribution for a single point vector."""
    if point.ndim != 1:
        raise ShapeError(f"expected a single point vector, got shape {tuple(point.shape)}")
    return decoder(point.unsqueeze(0), t_emb.reshape(1, -1), q, generator)[0]


def param_count(cfg):
    """Exact number of trainable parameters of the head described by ``cfg``."""
    head = build_context_head(cfg)
    return sum(p.numel() for p in head.parameters() if p.requires_grad)
