"""Training images: built-in synthetic generators, image directories, PNG I/O.

Pixel values live in [-1, 1] everywhere inside the package; 8-bit files map
through x = v / 127.5 - 1 and v = round((x + 1) * 127.5) clipped to [0, 255].
"""
import os
import math
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp', '.gif')
VALUE_MAPPING = 'x = v / 127.5 - 1, v = round((x + 1) * 127.5) clipped to [0, 255]'

# Blob centres (row, col) as fractions of the image size for the two-mode set.
TWO_MODE_CENTERS = ((0.3, 0.3), (0.7, 0.7))


def to_uint8(x):
    """[-1, 1] floats -> uint8 numpy array."""
    values = np.round((x.detach().cpu().double().numpy() + 1.0) * 127.5)
    return np.clip(values, 0, 255).astype(np.uint8)


def from_uint8(values):
    return torch.from_numpy(np.asarray(values, dtype=np.float64) / 127.5 - 1.0).float()


def save_png(image, path):
    """Write a (C, H, W) image in [-1, 1] as an 8-bit PNG."""
    array = to_uint8(image)
    if array.shape[0] == 1:
        pil = Image.fromarray(array[0])
    else:
        pil = Image.fromarray(np.ascontiguousarray(np.transpose(array, (1, 2, 0))))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pil.save(path, format='PNG')
    logger.debug("✓ Image saved to %s", path)


def _read_image(path, channels, size=None):
    with Image.open(path) as img:
        img = img.convert('L' if channels == 1 else 'RGB')
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.Resampling.BILINEAR)
        array = np.asarray(img, dtype=np.uint8)
    if array.ndim == 2:
        array = array[None]
    else:
        array = np.transpose(array, (2, 0, 1))
    return from_uint8(array)


def load_png(path, channels=1, size=None):
    """Read an image file as a (C, H, W) tensor in [-1, 1]."""
    try:
        return _read_image(path, channels, size)
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f"Could not read image {path}: {e}") from e


def load_mask(path, size=None):
    """Single-channel mask file; nonzero pixels are known."""
    try:
        with Image.open(path) as img:
            img = img.convert('L')
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.Resampling.NEAREST)
            return torch.from_numpy(np.asarray(img) > 0)
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f"Could not read mask {path}: {e}") from e


def _grid(size):
    coords = torch.arange(size, dtype=torch.float64)
    return torch.meshgrid(coords, coords, indexing='ij')


def _blob(size, cy, cx, width):
    yy, xx = _grid(size)
    bump = torch.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
    return 2.0 * bump - 1.0


def generate_blobs(n, size, generator):
    """One Gaussian blob per image at a random centre with a random width."""
    centers = torch.rand(n, 2, generator=generator, dtype=torch.float64) * (size - 1)
    widths = size * (0.08 + 0.12 * torch.rand(n, generator=generator, dtype=torch.float64))
    images = [_blob(size, float(c[0]), float(c[1]), float(w)) for c, w in zip(centers, widths)]
    return torch.stack(images).unsqueeze(1).float(), None


def generate_checkerboards(n, size, generator):
    periods = torch.tensor([2, 4, 8])[torch.randint(3, (n,), generator=generator)]
    phases = torch.randint(2, (n, 2), generator=generator)
    yy, xx = _grid(size)
    images = []
    for period, phase in zip(periods.tolist(), phases.tolist()):
        cells = (torch.div(yy + phase[0] * period, period, rounding_mode='floor')
                 + torch.div(xx + phase[1] * period, period, rounding_mode='floor'))
        images.append(torch.where(cells % 2 == 0, 1.0, -1.0))
    return torch.stack(images).unsqueeze(1).float(), None


def generate_two_mode(n, size, generator):
    """Blobs around one of two fixed centres; labels give the mode of each image."""
    labels = torch.randint(2, (n,), generator=generator)
    jitter = 0.04 * size * torch.randn(n, 2, generator=generator, dtype=torch.float64)
    width = 0.12 * size
    images = []
    for label, offset in zip(labels.tolist(), jitter):
        cy, cx = (c * (size - 1) for c in TWO_MODE_CENTERS[label])
        images.append(_blob(size, cy + float(offset[0]), cx + float(offset[1]), width))
    return torch.stack(images).unsqueeze(1).float(), labels


GENERATORS = {
    'blobs': generate_blobs,
    'checkerboard': generate_checkerboards,
    'two_mode': generate_two_mode,
}


def two_mode_centroids(size):
    """Noise-free mode images used by the nearest-centroid check."""
    width = 0.12 * size
    return torch.stack([
        _blob(size, cy * (size - 1), cx * (size - 1), width) for cy, cx in TWO_MODE_CENTERS
    ]).unsqueeze(1).float()


def nearest_centroid(images, centroids):
    """Index of the closest centroid (L2) for each image, plus the distances."""
    d2 = ((images.flatten(1)[:, None, :] - centroids.flatten(1)[None, :, :]) ** 2).sum(-1)
    return d2.argmin(1), d2.min(1).values.sqrt()


def load_image_directory(path, size, channels=1):
    """All readable images in ``path`` (sorted by name); unreadable files are skipped with a warning."""
    if not os.path.isdir(path):
        raise DatasetError(f"Dataset directory not found: {path}")
    images, skipped = [], 0
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith(IMAGE_EXTENSIONS):
            continue
        full = os.path.join(path, name)
        try:
            images.append(_read_image(full, channels, size))
        except (OSError, UnidentifiedImageError) as e:
            skipped += 1
            logger.warning("Skipping unreadable image %s: %s", full, e)
    if not images:
        raise DatasetError(f"No readable images in {path}")
    logger.info("✓ Loaded %d images from %s (%d skipped)", len(images), path, skipped)
    return torch.stack(images)


@dataclass
class ImageDataset:
    images: torch.Tensor                  # (N, C, H, W) in [-1, 1]
    batch_size: int
    seed: int = 0
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return self.images.shape[0]

    @property
    def batches_per_epoch(self):
        return max(1, len(self) // self.batch_size)

    def batch_indices(self, step):
        """Indices of the batch for a 0-based global step; depends only on (seed, step)."""
        epoch, position = divmod(step, self.batches_per_epoch)
        generator = torch.Generator().manual_seed(self.seed * 1_000_003 + epoch)
        perm = torch.randperm(len(self), generator=generator)
        if self.batch_size > len(self):
            return perm.repeat(math.ceil(self.batch_size / len(self)))[:self.batch_size]
        return perm[position * self.batch_size:(position + 1) * self.batch_size]

    def batch_for_step(self, step):
        return self.images[self.batch_indices(step)]

    def iter_batches(self, n_steps, start=0):
        for step in range(start, start + n_steps):
            yield self.batch_for_step(step)

    def __iter__(self):
        return self.iter_batches(self.batches_per_epoch)


def load_dataset(spec, seed=0, channels=1):
    """Build the dataset described by a ``DataConfig``."""
    if spec.source == 'directory':
        images, labels = load_image_directory(spec.path, spec.size, channels), None
    elif spec.source in GENERATORS:
        generator = torch.Generator().manual_seed(seed)
        images, labels = GENERATORS[spec.source](spec.n, spec.size, generator)
        if channels > 1:
            images = images.repeat(1, channels, 1, 1)
    else:
        raise DatasetError(f"Unknown dataset source: {spec.source}")
    if images.shape[0] == 0:
        raise DatasetError("Dataset is empty")
    logger.info("✓ Dataset ready: %s, %d images of %dx%d", spec.source, images.shape[0], images.shape[-2], images.shape[-1])
    return ImageDataset(images=images, batch_size=spec.batch_size, seed=seed, labels=labels)
