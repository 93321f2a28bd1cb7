"""Sample-quality proxy and run reports.

The FID proxy fits Gaussians to the features of a fixed, randomly initialized
convolutional extractor and returns their Frechet distance. Only relative
comparisons between runs are meaningful.
"""
import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg

from .dataset import VALUE_MAPPING
from .errors import NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

MIN_IMAGES = 64
COVARIANCE_EPS = 1e-6
SINGULAR_TOL = 1e-12


class RandomFeatureExtractor(nn.Module):
    """Two strided convolutions and a projection, weights drawn from a seeded generator."""

    def __init__(self, in_channels=1, feature_dim=32, seed=0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.proj = nn.Linear(64, feature_dim)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for param in self.parameters():
                fan_in = param[0].numel() if param.ndim > 1 else param.numel()
                param.copy_(torch.randn(param.shape, generator=generator) / math.sqrt(fan_in))
        self.requires_grad_(False)
        self.eval()

    def forward(self, images):
        h = F.relu(self.conv1(images))
        h = F.relu(self.conv2(h))
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return self.proj(pooled)


def extract_features(images, extractor_seed=0, feature_dim=32):
    if images.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) images, got shape {tuple(images.shape)}")
    extractor = RandomFeatureExtractor(images.shape[1], feature_dim, extractor_seed).double()
    with torch.no_grad():
        return extractor(images.detach().cpu().double()).numpy()


@dataclass
class FidResult:
    value: float
    regularized: bool


def _regularize(sigma):
    """Add eps * I when the covariance is singular; returns the matrix and whether it was changed."""
    eigvals = linalg.eigvalsh(sigma)
    if eigvals.min() <= SINGULAR_TOL * max(eigvals.max(), 1.0):
        return sigma + COVARIANCE_EPS * np.eye(sigma.shape[0]), True
    return sigma, False


def _psd_sqrt(sigma):
    eigvals, eigvecs = linalg.eigh(sigma)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2):
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2) via symmetric eigendecompositions."""
    sigma1, reg1 = _regularize(np.atleast_2d(sigma1))
    sigma2, reg2 = _regularize(np.atleast_2d(sigma2))
    root1 = _psd_sqrt(sigma1)
    middle = root1 @ sigma2 @ root1
    eigvals = linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_covmean = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean)
    if not np.isfinite(value):
        raise NumericError("Frechet distance is not finite")
    return FidResult(value=max(value, 0.0), regularized=reg1 or reg2)


def feature_statistics(features):
    return features.mean(axis=0), np.cov(features, rowvar=False)


def fid_proxy(real_images, fake_images, extractor_seed=0, feature_dim=32, min_images=MIN_IMAGES, details=False):
    """Frechet distance between random-feature Gaussians of two image sets."""
    for name, images in (('real', real_images), ('fake', fake_images)):
        if images.shape[0] < min_images:
            raise ParameterError(f"fid_proxy needs >= {min_images} {name} images, got {images.shape[0]}")
    mu1, s1 = feature_statistics(extract_features(real_images, extractor_seed, feature_dim))
    mu2, s2 = feature_statistics(extract_features(fake_images, extractor_seed, feature_dim))
    result = frechet_distance(mu1, s1, mu2, s2)
    if result.regularized:
        logger.warning("Singular feature covariance regularized with %g * I", COVARIANCE_EPS)
    return result if details else result.value


@dataclass
class MetricsReport:
    label: str
    config: dict
    config_hash: str
    fid_proxy: Optional[float] = None
    fid_regularized: bool = False
    seconds_per_step: Optional[float] = None
    param_counts: dict = field(default_factory=dict)
    head_outputs: dict = field(default_factory=dict)
    loss_curve: list = field(default_factory=list)
    checkpoint_digest: str = ''
    status: str = 'ok'
    error: str = ''
    value_mapping: str = VALUE_MAPPING

    def validate(self):
        numbers = [self.fid_proxy, self.seconds_per_step, *self.param_counts.values(), *self.head_outputs.values()]
        for record in self.loss_curve:
            numbers.extend(v for k, v in record.items() if k != 'step')
        for value in numbers:
            if value is not None and not math.isfinite(value):
                raise NumericError(f"report '{self.label}' contains a non-finite value")
        return self

    def to_dict(self):
        return asdict(self)

    def to_row(self):
        """Flat summary used for ablation tables."""
        row = {
            'label': self.label,
            'status': self.status,
            'fid_proxy': self.fid_proxy,
            'fid_regularized': self.fid_regularized,
            'seconds_per_step': self.seconds_per_step,
            'config_hash': self.config_hash,
            'checkpoint_digest': self.checkpoint_digest,
            'final_loss': self.loss_curve[-1]['total'] if self.loss_curve else None,
        }
        row.update({f'params_{k}': v for k, v in self.param_counts.items()})
        row.update({f'outputs_{k}': v for k, v in self.head_outputs.items()})
        return row
