"""Inference: ancestral sampling and masked inpainting with jump-back resampling.

Only the point denoiser is evaluated here. Every entry point locks the
context head for its duration, so an accidental call raises instead of
silently consuming randomness.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass

import torch

from .corruption import (
    TokenMap,
    forward_sample_continuous,
    forward_step_continuous,
    posterior_given_x0_probs,
    posterior_mean_continuous,
    respace_schedule,
)
from .errors import NumericError, ParameterError, SamplerInvariantError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class InpaintTask:
    image: torch.Tensor        # (C, H, W) in [-1, 1]
    mask: torch.Tensor         # (H, W) bool, True = known
    T_inpaint: int = 250
    r: int = 10
    j: int = 10

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ShapeError(f"expected a (C, H, W) image, got shape {tuple(self.image.shape)}")
        if tuple(self.mask.shape) != tuple(self.image.shape[1:]):
            raise ShapeError(f"mask shape {tuple(self.mask.shape)} does not match image {tuple(self.image.shape[1:])}")
        if self.T_inpaint < 1 or self.r < 1 or self.j < 1:
            raise ParameterError(f"T_inpaint, r and j must be >= 1, got {self.T_inpaint}, {self.r}, {self.j}")
        self.mask = self.mask.bool()


@contextmanager
def context_head_disabled(model):
    """Lock the context head (if any) for the duration of the block."""
    head = getattr(model, 'context_head', None)
    if head is None:
        yield model
        return
    previous = head.locked
    head.locked = True
    try:
        yield model
    finally:
        head.locked = previous


def _denoiser(model):
    return getattr(model, 'denoiser', model)


def _randn(shape, generator, like):
    return torch.randn(shape, generator=generator, dtype=like.dtype).to(like.device)


def reverse_step_continuous(model, schedule, xt, t, generator=None, clip_each_step=False):
    """x_{t-1} ~ N(mu(x0_hat, x_t), sigma_t^2 I), with no noise at t = 1."""
    batch_t = torch.full((xt.shape[0],), schedule.model_t(t), dtype=torch.long, device=xt.device)
    x0_hat = _denoiser(model)(xt, batch_t).primary
    if clip_each_step:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
    mean = posterior_mean_continuous(schedule, x0_hat, xt, t)
    if t > 1:
        mean = mean + float(schedule.sigma2[t - 1]) ** 0.5 * _randn(xt.shape, generator, xt)
    if not torch.isfinite(mean).all():
        raise NumericError(f"non-finite sample at t={t}")
    return mean


@torch.no_grad()
def ancestral_sample_continuous(model, shape, rng=None, schedule=None, clip_each_step=False):
    """Iterate t = T..1 from pure noise; the result is clipped to [-1, 1]."""
    if schedule is None:
        raise ParameterError("a continuous schedule is required")
    if len(shape) != 4:
        raise ShapeError(f"expected a (B, C, H, W) shape, got {tuple(shape)}")
    denoiser = _denoiser(model)
    denoiser.eval()
    device = denoiser.final_conv.weight.device
    dtype = denoiser.final_conv.weight.dtype
    with context_head_disabled(model):
        x = torch.randn(tuple(shape), generator=rng, dtype=dtype).to(device)
        for t in range(schedule.T, 0, -1):
            x = reverse_step_continuous(model, schedule, x, t, rng, clip_each_step)
    logger.debug("✓ Sampled %d images over %d steps", shape[0], schedule.T)
    return x.clamp(-1.0, 1.0)


@torch.no_grad()
def sample_discrete_batch(model, n, h, w, rng=None, transitions=None):
    """n token maps from the all-mask start; returns (n, h, w) tokens."""
    if transitions is None:
        raise ParameterError("discrete transitions are required")
    denoiser = _denoiser(model)
    denoiser.eval()
    device = denoiser.final_conv.weight.device
    K = transitions.K
    with context_head_disabled(model):
        x = torch.full((n, h, w), K, dtype=torch.long, device=device)
        for t in range(transitions.T, 0, -1):
            batch_t = torch.full((n,), t, dtype=torch.long, device=device)
            probs = _denoiser(model)(x, batch_t).primary.double()
            posterior = posterior_given_x0_probs(transitions, x, probs, batch_t)
            flat = posterior.permute(0, 2, 3, 1).reshape(-1, K + 1).cpu()
            if not bool((flat.sum(-1) > 0).all()):
                raise SamplerInvariantError(f"reverse step at t={t} produced an empty distribution")
            x = torch.multinomial(flat, 1, generator=rng).reshape(n, h, w).to(device)
    if bool((x == K).any()):
        raise SamplerInvariantError(f"{int((x == K).sum())} mask tokens survived to t=0")
    return x


def ancestral_sample_discrete(model, h, w, rng=None, transitions=None):
    tokens = sample_discrete_batch(model, 1, h, w, rng, transitions)[0]
    return TokenMap(h, w, tokens.cpu(), transitions.K)


def jump_schedule(T, r, j):
    """Visiting order of x_t states for resampling: descends by one, jumps up ``j`` steps ``r - 1`` times per anchor.

    Starts at T and ends at 0; with r = 1 it is plain T, T-1, ..., 0.
    """
    if T < 1 or r < 1 or j < 1:
        raise ParameterError(f"T, r and j must be >= 1, got {T}, {r}, {j}")
    jumps = {anchor + 1: r - 1 for anchor in range(0, T - j, j)}
    t = T
    states = [t]
    while t >= 1:
        t -= 1
        states.append(t)
        if jumps.get(t, 0) > 0:
            jumps[t] -= 1
            for _ in range(j):
                t += 1
                states.append(t)
    return states


@torch.no_grad()
def inpaint(model, task, rng=None, schedule=None, clip_each_step=False):
    """Fill the unknown region of ``task.image``; known pixels are replaced by noised ground truth every step."""
    if schedule is None:
        raise ParameterError("a continuous schedule is required")
    denoiser = _denoiser(model)
    if denoiser.cfg.mode != 'continuous':
        raise ParameterError("inpainting requires a continuous-mode model")
    if schedule.T != task.T_inpaint:
        schedule = respace_schedule(schedule, task.T_inpaint, variance='beta')

    image = task.image.unsqueeze(0).to(denoiser.final_conv.weight.device, denoiser.final_conv.weight.dtype)
    known = task.mask.to(image.device)
    if bool(known.all()):
        logger.warning("Inpainting mask covers the whole image; returning the input unchanged")
        return task.image.clone()
    if not bool(known.any()):
        logger.warning("Inpainting mask is empty; falling back to ancestral sampling")
        return ancestral_sample_continuous(model, image.shape, rng, schedule, clip_each_step)[0]

    denoiser.eval()
    keep = known[None, None].to(image.dtype)
    states = jump_schedule(schedule.T, task.r, task.j)
    with context_head_disabled(model):
        x = _randn(image.shape, rng, image)
        for prev, cur in zip(states[:-1], states[1:]):
            if cur < prev:
                if cur == 0:
                    known_part = image
                else:
                    known_part = forward_sample_continuous(schedule, image, cur, _randn(image.shape, rng, image))
                unknown_part = reverse_step_continuous(model, schedule, x, prev, rng, clip_each_step)
                x = keep * known_part + (1.0 - keep) * unknown_part
            else:
                x = forward_step_continuous(schedule, x, cur, _randn(image.shape, rng, image))
    logger.info("✓ Inpainted %s image over %d visited states", tuple(task.image.shape), len(states))
    return x.clamp(-1.0, 1.0)[0]
