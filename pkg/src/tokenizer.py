"""Palette tokenizer: k-means colour palette standing in for a learned image quantizer."""
import logging

import numpy as np
import torch
from scipy.cluster.vq import kmeans2

from .corruption import TokenMap
from .errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)


class PaletteTokenizer:
    def __init__(self, K, seed=0):
        if K < 2:
            raise ParameterError(f"K must be >= 2, got {K}")
        self.K = K
        self.seed = seed
        self.palette = None          # (K, C) float64, sorted by brightness

    @property
    def fitted(self):
        return self.palette is not None

    def fit(self, images):
        """Fit the palette once on (N, C, H, W) training images in [-1, 1]."""
        if images.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) images, got shape {tuple(images.shape)}")
        channels = images.shape[1]
        pixels = images.detach().permute(0, 2, 3, 1).reshape(-1, channels).cpu().double().numpy()
        distinct = np.unique(pixels, axis=0)

        if len(distinct) <= self.K:
            centroids = distinct
        else:
            centroids, _ = kmeans2(pixels, self.K, iter=20, minit='++', seed=self.seed)
            centroids = np.unique(centroids, axis=0)

        if len(centroids) < self.K:
            logger.warning(
                "Palette has only %d distinct colours for K=%d; degenerate clusters merged", len(centroids), self.K
            )
            # Duplicates are never selected: argmin prefers the first entry.
            filler = np.repeat(centroids[-1:], self.K - len(centroids), axis=0)
            centroids = np.concatenate([centroids, filler], axis=0)

        order = np.argsort(centroids.sum(1), kind='stable')
        self.palette = centroids[order]
        logger.info("✓ Palette fitted: K=%d over %d pixels", self.K, len(pixels))
        return self

    def _require_fit(self):
        if not self.fitted:
            raise ParameterError("tokenizer palette has not been fitted")

    def quantize(self, images):
        """Nearest palette entry per pixel: (C, H, W) -> (H, W) or (N, C, H, W) -> (N, H, W)."""
        self._require_fit()
        single = images.ndim == 3
        batch = images.unsqueeze(0) if single else images
        palette = torch.as_tensor(self.palette, dtype=torch.float64, device=batch.device)
        pixels = batch.detach().permute(0, 2, 3, 1).double()
        d2 = ((pixels.unsqueeze(-2) - palette) ** 2).sum(-1)
        tokens = d2.argmin(-1)
        return tokens[0] if single else tokens

    def detokenize(self, tokens):
        """Palette lookup: (..., H, W) tokens -> (..., C, H, W) images."""
        self._require_fit()
        if torch.is_tensor(tokens) and int(tokens.max()) >= self.K:
            raise ParameterError("cannot detokenize mask tokens")
        palette = torch.as_tensor(self.palette, dtype=torch.float32, device=tokens.device)
        images = palette[tokens]
        return images.movedim(-1, -3)

    def to_state(self):
        return {'K': self.K, 'seed': self.seed, 'palette': None if self.palette is None else self.palette.tolist()}

    @classmethod
    def from_state(cls, state):
        tokenizer = cls(state['K'], state.get('seed', 0))
        if state.get('palette') is not None:
            tokenizer.palette = np.asarray(state['palette'], dtype=np.float64)
        return tokenizer


def quantize_tokens(image, K, tokenizer=None):
    """TokenMap for a (C, H, W) image, fitting a palette on the image when none is given."""
    if tokenizer is None:
        tokenizer = PaletteTokenizer(K).fit(image.unsqueeze(0))
    elif tokenizer.K != K:
        raise ParameterError(f"tokenizer has K={tokenizer.K}, requested K={K}")
    tokens = tokenizer.quantize(image)
    return TokenMap(tokens.shape[0], tokens.shape[1], tokens.cpu(), K)
