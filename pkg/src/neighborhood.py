"""s-stride neighborhoods: offsets, ground-truth context sets and empirical samples.

Feature maps passed to the batched helpers are channel-first (B, d, H, W); the
single-position operations take channel-last (H, W, d) maps.
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeighborIndex:
    stride: int
    offsets: tuple
    padding: str = 'edge-replicate'

    @property
    def count(self):
        return len(self.offsets)


@dataclass
class ContextSampleBatch:
    positions: torch.Tensor   # (N, 3) rows of (batch, y, x)
    targets: torch.Tensor     # (N, q, d)

    @property
    def q(self):
        return self.targets.shape[1]

    @property
    def d(self):
        return self.targets.shape[2]


def stride_offsets(s):
    """All (dy, dx) with max(|dy|, |dx|) <= s except the center, row-major."""
    if int(s) != s or s < 1:
        raise ParameterError(f"stride must be an integer >= 1, got {s}")
    offsets = tuple(
        (dy, dx)
        for dy in range(-s, s + 1)
        for dx in range(-s, s + 1)
        if (dy, dx) != (0, 0)
    )
    return NeighborIndex(stride=s, offsets=offsets)


def gather_neighbors(features, index):
    """Neighbor features for every position: (B, d, H, W) -> (B, H, W, K_n, d)."""
    if features.ndim != 4:
        raise ShapeError(f"expected (B, d, H, W) features, got shape {tuple(features.shape)}")
    s = index.stride
    _, _, H, W = features.shape
    padded = F.pad(features, (s, s, s, s), mode='replicate')
    shifted = [padded[:, :, s + dy:s + dy + H, s + dx:s + dx + W] for dy, dx in index.offsets]
    return torch.stack(shifted, dim=-1).permute(0, 2, 3, 4, 1)


def extract_context(feature_map, position, index):
    """The K_n neighbor vectors of ``position`` in an (H, W, d) map, in offset order."""
    if feature_map.ndim != 3 or feature_map.numel() == 0:
        raise ShapeError(f"expected a nonempty (H, W, d) map, got shape {tuple(feature_map.shape)}")
    y, x = position
    H, W, _ = feature_map.shape
    if not (0 <= y < H and 0 <= x < W):
        raise ParameterError(f"position {position} outside map of size {H}x{W}")
    # Replicate padding is equivalent to clamping coordinates into the map.
    ys = torch.tensor([min(max(y + dy, 0), H - 1) for dy, _ in index.offsets])
    xs = torch.tensor([min(max(x + dx, 0), W - 1) for _, dx in index.offsets])
    return feature_map[ys, xs]


def sample_context(feature_map, position, index, q, generator=None, replace=True):
    """q draws from the empirical neighborhood distribution of ``position``."""
    if q < 1:
        raise ParameterError(f"q must be >= 1, got {q}")
    neighbors = extract_context(feature_map, position, index)
    if replace:
        picks = torch.randint(index.count, (q,), generator=generator)
    else:
        if q > index.count:
            raise ParameterError(f"cannot draw {q} of {index.count} neighbors without replacement")
        picks = torch.randperm(index.count, generator=generator)[:q]
    return neighbors[picks]


def sample_neighbor_targets(neighbors, q, generator=None):
    """Batched i.i.d. draws: (B, H, W, K_n, d) -> (B, H, W, q, d)."""
    if q < 1:
        raise ParameterError(f"q must be >= 1, got {q}")
    B, H, W, K_n, d = neighbors.shape
    picks = torch.randint(K_n, (B, H, W, q), generator=generator).to(neighbors.device)
    return torch.gather(neighbors, 3, picks.unsqueeze(-1).expand(-1, -1, -1, -1, d))


def sample_context_batch(features, index, q, generator=None):
    """Ground-truth context samples for every position of a (B, d, H, W) map."""
    neighbors = gather_neighbors(features, index)
    targets = sample_neighbor_targets(neighbors, q, generator)
    B, H, W = targets.shape[:3]
    grid = torch.stack(torch.meshgrid(torch.arange(B), torch.arange(H), torch.arange(W), indexing='ij'), dim=-1)
    return ContextSampleBatch(positions=grid.reshape(-1, 3), targets=targets.reshape(B * H * W, q, -1))


def neighbor_mean_pool(psi_outputs):
    """Mean over the center prediction and its K_n neighbor-slot predictions (dim -2)."""
    return psi_outputs.mean(dim=-2)
