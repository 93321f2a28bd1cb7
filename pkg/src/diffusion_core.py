"""Context-diffusion objectives: point denoising plus weighted neighborhood context prediction.

total = point_term + lambda_t * context_term, where the context term sums a
permutation-invariant set loss over every spatial position (Hungarian W2 by
default) between q decoded samples and q ground-truth neighbor samples.
"""
import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .context_decoder import DistributionDecoderCfg, FeatureDecoderCfg, build_context_head
from .corruption import (
    build_linear_schedule,
    build_mask_replace_transitions,
    forward_sample_continuous,
    posterior_coefficients,
    posterior_given_x0_probs,
    sample_tokens,
)
from .denoiser import DenoiserCfg, UNetDenoiser
from .errors import DivergenceError, NumericError, ParameterError, ShapeError
from .neighborhood import gather_neighbors, neighbor_mean_pool, sample_context_batch, stride_offsets
from .set_losses import batched_set_loss

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    point_term: torch.Tensor
    context_term: torch.Tensor
    lambda_t: float
    total: torch.Tensor
    per_position: Optional[torch.Tensor] = None
    t: Optional[torch.Tensor] = None

    def as_record(self):
        return {
            'point_term': float(self.point_term.detach()),
            'context_term': float(self.context_term.detach()),
            'lambda_t': float(self.lambda_t),
            'total': float(self.total.detach()),
        }


@dataclass
class TrainRng:
    """Separate streams so the context term never perturbs the diffusion noise sequence."""

    diffusion: torch.Generator
    context: torch.Generator

    @classmethod
    def from_seed(cls, seed):
        diffusion = torch.Generator().manual_seed(int(seed))
        context = torch.Generator().manual_seed(int(seed) + 1_000_003)
        return cls(diffusion=diffusion, context=context)

    def get_state(self):
        return {'diffusion': self.diffusion.get_state(), 'context': self.context.get_state()}

    def set_state(self, state):
        self.diffusion.set_state(state['diffusion'])
        self.context.set_state(state['context'])


class ContextDiffusionModel(nn.Module):
    """Point denoiser plus an optional training-only context head."""

    def __init__(self, denoiser, context_head=None, neighbor_index=None):
        super().__init__()
        self.denoiser = denoiser
        self.context_head = context_head
        self.neighbor_index = neighbor_index

    @property
    def mode(self):
        return self.denoiser.cfg.mode

    def forward(self, xt, t):
        return self.denoiser(xt, t)


def denoiser_config(cfg):
    return DenoiserCfg(
        mode=cfg.mode,
        in_channels=cfg.model.channels,
        base_channels=cfg.model.base_channels,
        channel_mults=tuple(cfg.model.channel_mults),
        time_dim=cfg.model.time_dim,
        num_timesteps=cfg.schedule.T if cfg.mode == 'continuous' else cfg.schedule.discrete_T,
        num_tokens=cfg.model.num_tokens,
        token_dim=cfg.model.token_dim,
        tap=cfg.model.tap,
    )


def context_head_config(cfg, stride=None, variant=None):
    """Head config for a run; ``None`` when the stride is 0 (plain backbone)."""
    stride = cfg.context.stride if stride is None else stride
    variant = cfg.context.decoder if variant is None else variant
    if stride == 0:
        return None
    dcfg = denoiser_config(cfg)
    d = cfg.model.channels if cfg.mode == 'continuous' else cfg.model.token_dim
    hidden = tuple(cfg.context.hidden)
    if variant == 'feature':
        return FeatureDecoderCfg(in_dim=dcfg.tap_dim, d=d, k_n=stride_offsets(stride).count,
                                 hidden=hidden, time_dim=cfg.model.time_dim)
    return DistributionDecoderCfg(in_dim=dcfg.tap_dim, d=d, hidden=hidden, time_dim=cfg.model.time_dim,
                                  logvar_min=cfg.context.logvar_min, logvar_max=cfg.context.logvar_max)


def build_model(cfg):
    """Denoiser initialized from ``cfg.seed`` regardless of whether a head is attached."""
    torch.manual_seed(cfg.seed)
    denoiser = UNetDenoiser(denoiser_config(cfg))
    head_cfg = context_head_config(cfg)
    head, index = None, None
    if head_cfg is not None:
        torch.manual_seed(cfg.seed + 1)
        head = build_context_head(head_cfg)
        index = stride_offsets(cfg.context.stride)
    return ContextDiffusionModel(denoiser, head, index)


def build_process(cfg):
    """The forward process a run trains against."""
    if cfg.mode == 'continuous':
        return build_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.variance)
    return build_mask_replace_transitions(
        cfg.model.num_tokens, cfg.schedule.discrete_T, cfg.schedule.gamma_end, cfg.schedule.beta_uniform_end
    )


def lambda_schedule(t, cfg, T=None):
    """Context weight lambda_t in [0, 1]: constant, or linear from lambda_start (t=1) to lambda_end (t=T)."""
    context = cfg.context
    if T is None:
        T = cfg.schedule.T if cfg.mode == 'continuous' else cfg.schedule.discrete_T
    if context.lambda_mode == 'constant':
        value = context.lambda_value
    elif context.lambda_mode == 'linear':
        frac = 0.0 if T == 1 else (t - 1) / (T - 1)
        value = context.lambda_start + (context.lambda_end - context.lambda_start) * frac
    else:
        raise ParameterError(f"Unknown lambda mode: {context.lambda_mode}")
    return float(min(max(value, 0.0), 1.0))


def _lambda_weights(t, cfg, T, like):
    values = [lambda_schedule(int(v), cfg, T) for v in t.tolist()]
    return torch.tensor(values, dtype=like.dtype, device=like.device)


def context_sets(model, pred, targets_map, rng, cfg):
    """Ground-truth and predicted context for every position of the batch.

    Distribution decoding returns (N, q, d) sample sets; feature decoding returns
    the ordered (N, K_n, d) neighborhoods.
    """
    head, index = model.context_head, model.neighbor_index
    B, C, H, W = pred.tap.shape
    points = pred.tap.permute(0, 2, 3, 1).reshape(B * H * W, C)
    t_emb = pred.t_emb[:, None, :].expand(B, H * W, -1).reshape(B * H * W, -1)
    if head.variant == 'distribution':
        batch = sample_context_batch(targets_map, index, cfg.context.q, rng.context)
        return batch.targets, head(points, t_emb, cfg.context.q, rng.context)
    neighbors = gather_neighbors(targets_map, index).reshape(B * H * W, index.count, -1)
    return neighbors, head(points, t_emb)


def context_loss(model, pred, targets_map, rng, cfg):
    """Per-image context term (B,) and per-position costs (B, H*W)."""
    B, _, H, W = pred.tap.shape
    targets, preds = context_sets(model, pred, targets_map, rng, cfg)
    if model.context_head.variant == 'distribution':
        costs = batched_set_loss(
            targets, preds, kind=cfg.context.set_loss, normalize=cfg.context.normalize,
            epsilon=cfg.context.sinkhorn_epsilon, max_iters=cfg.context.sinkhorn_iters, tol=cfg.context.sinkhorn_tol,
        )
    else:
        costs = ((preds - targets) ** 2).sum(dim=(1, 2))
    per_position = costs.reshape(B, H * W)
    return per_position.sum(1), per_position


def _assemble(point_per, context_per, lam, per_position, t):
    total = (point_per + lam * context_per).mean()
    point_term = point_per.mean()
    context_term = context_per.mean()
    weighted = (lam * context_per).mean()
    if float(context_term.detach()) > 0:
        lambda_t = float(weighted.detach()) / float(context_term.detach())
    else:
        lambda_t = float(lam.mean())
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss (point={float(point_term.detach())}, context={float(context_term.detach())})")
    return LossBreakdown(point_term=point_term, context_term=context_term, lambda_t=lambda_t,
                         total=total, per_position=per_position, t=t)


def _as_batch_t(t, batch_size, device):
    t = torch.as_tensor(t, dtype=torch.long, device=device).reshape(-1)
    if t.numel() == 1:
        t = t.expand(batch_size)
    if t.numel() != batch_size:
        raise ShapeError(f"expected {batch_size} timesteps, got {t.numel()}")
    return t


def context_continuous_loss(model, schedule, x0, t, rng, cfg):
    """Continuous objective in x0-parameterization plus the weighted context term."""
    B = x0.shape[0]
    t = _as_batch_t(t, B, x0.device)
    noise = torch.randn(x0.shape, generator=rng.diffusion, dtype=x0.dtype).to(x0.device)
    xt = forward_sample_continuous(schedule, x0, t, noise)
    pred = model.denoiser(xt, t)

    point_per = ((pred.primary - x0) ** 2).flatten(1).sum(1)
    if cfg.train.point_loss == 'mu':
        # ||mu(x0, xt) - mu(x0_hat, xt)||^2 / (2 sigma_t^2) = c0_t^2 ||x0 - x0_hat||^2 / (2 sigma_t^2)
        c0, _ = posterior_coefficients(schedule)
        weight = torch.as_tensor(c0 ** 2 / (2.0 * schedule.sigma2), dtype=x0.dtype, device=x0.device)[t - 1]
        point_per = point_per * weight

    lam = _lambda_weights(t, cfg, schedule.T, x0)
    if model.context_head is None or not bool((lam > 0).any()):
        context_per = torch.zeros_like(point_per)
        per_position = None
    else:
        context_per, per_position = context_loss(model, pred, x0, rng, cfg)
    return _assemble(point_per, context_per, lam, per_position, t)


def discrete_kl_terms(transitions, x0, xt, x0_probs, t):
    """Per-position KL(q(x_{t-1} | x_t, x_0) || p(x_{t-1} | x_t)) with p assembled from ``x0_probs``."""
    K = transitions.K
    one_hot = F.one_hot(x0, K).permute(0, 3, 1, 2).to(x0_probs.dtype)
    true_post = posterior_given_x0_probs(transitions, xt, one_hot, t)
    model_post = posterior_given_x0_probs(transitions, xt, x0_probs, t)
    log_model = torch.log(model_post.clamp_min(torch.finfo(model_post.dtype).tiny))
    return (torch.xlogy(true_post, true_post) - true_post * log_model).sum(1)


def context_discrete_loss(model, transitions, x0, t, rng, cfg):
    """Discrete objective: per-step VLB KL plus the context term on token embeddings."""
    B = x0.shape[0]
    t = _as_batch_t(t, B, x0.device)
    xt = sample_tokens(transitions, x0, t, rng.diffusion)
    pred = model.denoiser(xt, t)

    kl = discrete_kl_terms(transitions, x0, xt, pred.primary, t)
    point_per = kl.flatten(1).sum(1)

    lam = _lambda_weights(t, cfg, transitions.T, point_per)
    if model.context_head is None or not bool((lam > 0).any()):
        context_per = torch.zeros_like(point_per)
        per_position = None
    else:
        # Targets are the (frozen) embeddings of the clean neighbor tokens.
        targets_map = model.denoiser.token_embedding(x0).detach().permute(0, 3, 1, 2)
        context_per, per_position = context_loss(model, pred, targets_map, rng, cfg)
    return _assemble(point_per, context_per, lam, per_position, t)


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool

    @property
    def slack(self):
        return self.rhs - self.lhs


def verify_upper_bound(x0_hat, psi_outputs, atol=1e-9):
    """Check ||x0 - mean-pooled Psi||^2 <= 1/(K_n+1) * sum of point and context square losses.

    ``x0_hat``: ground truth (H, W, d). ``psi_outputs``: (H, W, K_n+1, d) where slot 0
    is the point prediction of each unit and the remaining slots are the predictions
    of that unit made by each of its neighbors.
    """
    if psi_outputs.ndim != 4 or x0_hat.ndim != 3:
        raise ShapeError(f"expected x0 (H, W, d) and Psi (H, W, K_n+1, d), got {tuple(x0_hat.shape)} and {tuple(psi_outputs.shape)}")
    if psi_outputs.shape[:2] != x0_hat.shape[:2] or psi_outputs.shape[-1] != x0_hat.shape[-1]:
        raise ShapeError(f"Psi shape {tuple(psi_outputs.shape)} inconsistent with x0 shape {tuple(x0_hat.shape)}")
    slots = psi_outputs.shape[2]
    pooled = neighbor_mean_pool(psi_outputs)
    lhs = float(((x0_hat - pooled) ** 2).sum())
    point = ((psi_outputs[:, :, 0, :] - x0_hat) ** 2).sum()
    context = ((psi_outputs[:, :, 1:, :] - x0_hat.unsqueeze(2)) ** 2).sum()
    rhs = float((point + context) / slots)
    return BoundCheck(lhs=lhs, rhs=rhs, holds=lhs <= rhs + atol)


def assemble_psi_outputs(point_pred, neighbor_preds, index):
    """Combined network output: for each unit, its own prediction followed by its neighbors' predictions of it.

    ``point_pred``: (H, W, d); ``neighbor_preds``: (H, W, K_n, d), where slot k of unit u
    predicts the unit at offset k from u. Borders follow the edge-replicate padding.
    """
    s = index.stride
    H, W, _ = point_pred.shape
    slots = [point_pred]
    maps = neighbor_preds.permute(2, 3, 0, 1)  # (K_n, d, H, W)
    padded = F.pad(maps, (s, s, s, s), mode='replicate')
    for k, (dy, dx) in enumerate(index.offsets):
        slots.append(padded[k, :, s - dy:s - dy + H, s - dx:s - dx + W].permute(1, 2, 0))
    return torch.stack(slots, dim=2)


@torch.no_grad()
def model_psi_outputs(model, schedule, x0, t, noise):
    """Psi tensor of a continuous model with a context head for one clean (C, H, W) image noised to ``t``.

    Feature decoders supply one prediction per offset; distribution decoders
    use FNN_n(mu) for every offset.
    """
    head, index = model.context_head, model.neighbor_index
    if head is None or model.mode != 'continuous':
        raise ParameterError("Psi outputs need a continuous model with a context head")
    xt = forward_sample_continuous(schedule, x0.unsqueeze(0), t, noise.unsqueeze(0))
    pred = model.denoiser(xt, torch.tensor([t], device=x0.device))
    _, H, W = x0.shape
    points = pred.tap[0].permute(1, 2, 0).reshape(H * W, -1)
    t_emb = pred.t_emb.expand(H * W, -1)
    if head.variant == 'feature':
        neighbors = head(points, t_emb)
    else:
        mu, _ = head.moments(points, t_emb)
        neighbors = head.fnn_n(mu).unsqueeze(1).expand(-1, index.count, -1)
    neighbors = neighbors.reshape(H, W, index.count, -1)
    return assemble_psi_outputs(pred.primary[0].permute(1, 2, 0), neighbors, index)


def fuzz_upper_bound(n_cases, seed=0, max_size=8, strides=(1, 2, 3), d_choices=(1, 2, 3)):
    """Random bound checks plus the all-equal equality case; returns a summary dict."""
    generator = torch.Generator().manual_seed(seed)
    violations, min_slack, max_equal_gap = 0, np.inf, 0.0
    for _ in range(n_cases):
        H = int(torch.randint(1, max_size + 1, (1,), generator=generator))
        W = int(torch.randint(1, max_size + 1, (1,), generator=generator))
        s = strides[int(torch.randint(len(strides), (1,), generator=generator))]
        d = d_choices[int(torch.randint(len(d_choices), (1,), generator=generator))]
        k_n = stride_offsets(s).count
        x0 = torch.randn(H, W, d, generator=generator, dtype=torch.float64)
        psi = torch.randn(H, W, k_n + 1, d, generator=generator, dtype=torch.float64)
        check = verify_upper_bound(x0, psi)
        violations += int(not check.holds)
        min_slack = min(min_slack, check.slack)

        equal = psi[:, :, :1, :].expand(-1, -1, k_n + 1, -1)
        eq_check = verify_upper_bound(x0, equal)
        max_equal_gap = max(max_equal_gap, abs(eq_check.rhs - eq_check.lhs))
    return {'cases': n_cases, 'violations': violations, 'min_slack': float(min_slack),
            'max_equality_gap': float(max_equal_gap)}


@dataclass
class TrainState:
    model: ContextDiffusionModel
    optimizer: torch.optim.Optimizer
    process: object
    rng: TrainRng
    step: int = 0


def init_train_state(cfg, model=None):
    model = model if model is not None else build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    return TrainState(model=model, optimizer=optimizer, process=build_process(cfg), rng=TrainRng.from_seed(cfg.seed))


def sample_timesteps(state, batch_size):
    return torch.randint(1, state.process.T + 1, (batch_size,), generator=state.rng.diffusion)


def train_step(state, batch, cfg):
    """One Adam step on the selected objective; raises DivergenceError before touching parameters."""
    state.model.train()
    t = sample_timesteps(state, batch.shape[0])
    if cfg.mode == 'continuous':
        breakdown = context_continuous_loss(state.model, state.process, batch, t, state.rng, cfg)
    else:
        breakdown = context_discrete_loss(state.model, state.process, batch, t, state.rng, cfg)

    total = float(breakdown.total.detach())
    if not np.isfinite(total) or total > cfg.train.divergence_threshold:
        raise DivergenceError(f"loss diverged at step {state.step + 1}: total={total}")

    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def timed_train_step(state, batch, cfg):
    start = time.perf_counter()
    state, breakdown = train_step(state, batch, cfg)
    return state, breakdown, time.perf_counter() - start
