"""Forward processes for continuous (Gaussian) and discrete (mask-and-replace) diffusion.

Timesteps are 1-based throughout (``1 <= t <= T``); the arrays below are stored
0-based so step ``t`` lives at index ``t - 1``. In the discrete chain the mask
token is stored at index ``K`` of a ``K + 1`` state space.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ParameterError, ScheduleError, ShapeError, InconsistencyError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContinuousSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray
    # Training timestep used for each step of a respaced schedule; None means identity.
    timesteps: Optional[np.ndarray] = None

    @property
    def alpha_bar_prev(self):
        return np.concatenate(([1.0], self.alpha_bar[:-1]))

    def model_t(self, t):
        """Timestep to feed the denoiser for step ``t`` of this schedule."""
        if self.timesteps is None:
            return t
        if torch.is_tensor(t):
            return torch.as_tensor(self.timesteps, device=t.device)[t - 1]
        return int(self.timesteps[t - 1])

    def check_t(self, t, low=1):
        values = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        if values.size and (values.min() < low or values.max() > self.T):
            raise ParameterError(f"t must lie in [{low}, {self.T}], got {values.min()}..{values.max()}")

    def to_state(self):
        return {
            'T': self.T,
            'beta': self.beta.tolist(),
            'sigma2': self.sigma2.tolist(),
            'timesteps': None if self.timesteps is None else self.timesteps.tolist(),
        }


@dataclass(frozen=True)
class DiscreteTransition:
    K: int
    T: int
    Q: np.ndarray        # (T, K+1, K+1), row-stochastic: Q[t-1][i, j] = q(x_t = j | x_{t-1} = i)
    Q_bar: np.ndarray    # (T, K+1, K+1), Q_bar[t-1][i, j] = q(x_t = j | x_0 = i)
    gamma_bar: np.ndarray
    beta_bar: np.ndarray

    @property
    def mask_index(self):
        return self.K

    @property
    def num_states(self):
        return self.K + 1

    def Q_bar_prev(self, t):
        """q(x_{t-1} | x_0) as a matrix, identity for t = 1."""
        if t == 1:
            return np.eye(self.K + 1)
        return self.Q_bar[t - 2]

    def to_state(self):
        return {'K': self.K, 'T': self.T, 'gamma_bar': self.gamma_bar.tolist(), 'beta_bar': self.beta_bar.tolist()}


@dataclass
class TokenMap:
    height: int
    width: int
    tokens: torch.Tensor
    K: int

    def __post_init__(self):
        if tuple(self.tokens.shape) != (self.height, self.width):
            raise ShapeError(f"tokens shape {tuple(self.tokens.shape)} != ({self.height}, {self.width})")
        if self.tokens.numel() and (int(self.tokens.min()) < 0 or int(self.tokens.max()) > self.K):
            raise ParameterError(f"tokens must lie in [0, {self.K}]")

    @property
    def has_mask(self):
        return bool((self.tokens == self.K).any())


def build_linear_schedule(T, beta_start=1e-4, beta_end=0.02, variance='beta'):
    """Linear beta schedule with derived alpha, alpha_bar and reverse variances."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not beta_start > 0:
        raise ParameterError(f"beta_start must be > 0, got {beta_start}")
    if not beta_end < 1:
        raise ParameterError(f"beta_end must be < 1, got {beta_end}")
    if beta_start > beta_end:
        raise ParameterError(f"beta_start ({beta_start}) must not exceed beta_end ({beta_end})")

    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return _schedule_from_beta(beta, variance)


def _schedule_from_beta(beta, variance, timesteps=None):
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if variance == 'beta':
        sigma2 = beta.copy()
    elif variance == 'posterior':
        alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
        sigma2 = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        # The t = 1 posterior variance is exactly zero; borrow t = 2.
        sigma2[0] = sigma2[1] if len(sigma2) > 1 else beta[0]
    else:
        raise ParameterError(f"Unknown variance choice: {variance}")
    return ContinuousSchedule(T=len(beta), beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2, timesteps=timesteps)


def respace_schedule(schedule, n_steps, variance='beta'):
    """Schedule over ``n_steps`` evenly spaced training timesteps (betas from alpha_bar ratios)."""
    if not 1 <= n_steps <= schedule.T:
        raise ParameterError(f"n_steps must lie in [1, {schedule.T}], got {n_steps}")
    if n_steps == schedule.T and schedule.timesteps is None:
        return schedule
    keep = np.unique(np.round(np.linspace(1, schedule.T, n_steps)).astype(np.int64))
    alpha_bar = schedule.alpha_bar[keep - 1]
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    beta = 1.0 - alpha_bar / alpha_bar_prev
    base = schedule.timesteps[keep - 1] if schedule.timesteps is not None else keep
    respaced = _schedule_from_beta(beta, variance, timesteps=base)
    logger.debug("Respaced schedule %d -> %d steps", schedule.T, respaced.T)
    return respaced


def _coef(values, t, like):
    """Gather per-step coefficients for scalar or batched ``t`` and broadcast against ``like``."""
    if torch.is_tensor(t) and t.ndim > 0:
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t - 1]
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.as_tensor(float(values[int(t) - 1]), dtype=like.dtype, device=like.device)


def forward_sample_continuous(schedule, x0, t, noise):
    """q(x_t | x_0): sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise."""
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    schedule.check_t(t)
    a = _coef(np.sqrt(schedule.alpha_bar), t, x0)
    s = _coef(np.sqrt(1.0 - schedule.alpha_bar), t, x0)
    return a * x0 + s * noise


def forward_step_continuous(schedule, x_prev, t, noise):
    """q(x_t | x_{t-1}): one step of the Gaussian kernel."""
    if noise.shape != x_prev.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x shape {tuple(x_prev.shape)}")
    schedule.check_t(t)
    return _coef(np.sqrt(schedule.alpha), t, x_prev) * x_prev + _coef(np.sqrt(schedule.beta), t, x_prev) * noise


def posterior_coefficients(schedule):
    """Coefficients (c0, ct) with mean(x_{t-1} | x_t, x_0) = c0 x0 + ct xt."""
    alpha_bar_prev = schedule.alpha_bar_prev
    c0 = schedule.beta * np.sqrt(alpha_bar_prev) / (1.0 - schedule.alpha_bar)
    ct = (1.0 - alpha_bar_prev) * np.sqrt(schedule.alpha) / (1.0 - schedule.alpha_bar)
    return c0, ct


def posterior_mean_continuous(schedule, x0, xt, t):
    """Mean of q(x_{t-1} | x_t, x_0); reduces to x0 at t = 1."""
    if x0.shape != xt.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != xt shape {tuple(xt.shape)}")
    schedule.check_t(t)
    if not torch.is_tensor(t) and int(t) == 1:
        return x0.clone()
    c0, ct = posterior_coefficients(schedule)
    return _coef(c0, t, x0) * x0 + _coef(ct, t, xt) * xt


def build_mask_replace_transitions(K, T, gamma_end=0.9, beta_uniform_end=0.05):
    """Mask-and-replace transitions over K tokens plus an absorbing mask state.

    The cumulative mask probability and cumulative uniform-replace probability
    ramp linearly from 0 at t = 0 to ``gamma_end`` / ``beta_uniform_end`` at t = T;
    per-step probabilities are derived from consecutive cumulative values.
    """
    if K < 2:
        raise ParameterError(f"K must be >= 2, got {K}")
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0 <= gamma_end <= 1 and 0 <= beta_uniform_end <= 1):
        raise ScheduleError(f"gamma_end={gamma_end} and beta_uniform_end={beta_uniform_end} must lie in [0, 1]")
    if gamma_end + beta_uniform_end > 1 + 1e-12:
        raise ScheduleError(
            f"gamma_end + beta_uniform_end = {gamma_end + beta_uniform_end} exceeds 1 at t={T}"
        )

    ramp = np.arange(0, T + 1, dtype=np.float64) / T
    gamma_bar = gamma_end * ramp
    beta_bar = beta_uniform_end * ramp
    keep_bar = 1.0 - gamma_bar - beta_bar

    n = K + 1
    Q = np.zeros((T, n, n))
    for t in range(1, T + 1):
        alpha_t = keep_bar[t] / keep_bar[t - 1]
        gamma_t = 1.0 - (1.0 - gamma_bar[t]) / (1.0 - gamma_bar[t - 1])
        beta_t = 1.0 - alpha_t - gamma_t
        if min(alpha_t, gamma_t) < -1e-12 or beta_t < -1e-12 or max(alpha_t, gamma_t, beta_t) > 1 + 1e-12:
            raise ScheduleError(
                f"Invalid step probabilities at t={t}: keep={alpha_t:.6g}, replace={beta_t:.6g}, mask={gamma_t:.6g}"
            )
        beta_t = max(beta_t, 0.0)
        Q[t - 1, :K, :K] = beta_t / K
        Q[t - 1, np.arange(K), np.arange(K)] += alpha_t
        Q[t - 1, :K, K] = gamma_t
        Q[t - 1, K, K] = 1.0

    Q_bar = np.zeros_like(Q)
    running = np.eye(n)
    for t in range(T):
        running = running @ Q[t]
        Q_bar[t] = running

    return DiscreteTransition(K=K, T=T, Q=Q, Q_bar=Q_bar, gamma_bar=gamma_bar[1:], beta_bar=beta_bar[1:])


def forward_sample_discrete(transitions, x0, t, generator=None):
    """Sample x_t ~ q(x_t | x_0) independently per token."""
    if not 1 <= t <= transitions.T:
        raise ParameterError(f"t must lie in [1, {transitions.T}], got {t}")
    if x0.has_mask:
        raise ParameterError("x0 must not contain mask tokens")
    tokens = sample_tokens(transitions, x0.tokens.unsqueeze(0), torch.tensor([t]), generator)[0]
    return TokenMap(x0.height, x0.width, tokens, transitions.K)


def sample_tokens(transitions, x0, t, generator=None):
    """Batched q(x_t | x_0) for token tensors ``x0`` (B, H, W) and timesteps ``t`` (B,)."""
    Q_bar = torch.as_tensor(transitions.Q_bar, dtype=torch.float64)
    probs = Q_bar[t.cpu() - 1][torch.arange(x0.shape[0])[:, None, None], x0.cpu()]
    flat = probs.reshape(-1, transitions.K + 1)
    draws = torch.multinomial(flat, 1, generator=generator).reshape(x0.shape)
    return draws.to(x0.device)


def discrete_posterior(transitions, xt_token, x0_token, t):
    """q(x_{t-1} | x_t, x_0) over the K + 1 states."""
    if not 1 <= t <= transitions.T:
        raise ParameterError(f"t must lie in [1, {transitions.T}], got {t}")
    if not 0 <= x0_token < transitions.K:
        raise ParameterError(f"x0_token must lie in [0, {transitions.K - 1}], got {x0_token}")
    if not 0 <= xt_token <= transitions.K:
        raise ParameterError(f"xt_token must lie in [0, {transitions.K}], got {xt_token}")

    prior = transitions.Q_bar_prev(t)[x0_token]
    likelihood = transitions.Q[t - 1][:, xt_token]
    unnormalized = prior * likelihood
    z = unnormalized.sum()
    if z <= 0:
        raise InconsistencyError(f"x_t={xt_token} is unreachable from x_0={x0_token} at t={t}")
    return unnormalized / z


def posterior_given_x0_probs(transitions, xt, x0_probs, t):
    """Model posterior: sum over x0 of q(x_{t-1} | x_t, x0) p(x0 | x_t), batched.

    ``xt``: (B, H, W) tokens; ``x0_probs``: (B, K, H, W) distribution over clean tokens;
    ``t``: (B,) timesteps. Returns (B, K+1, H, W). Clean tokens that cannot produce
    the observed x_t contribute nothing and the mixture is renormalized.
    """
    dtype = x0_probs.dtype
    K = transitions.K
    Q = torch.as_tensor(transitions.Q, dtype=dtype, device=xt.device)
    eye = torch.eye(K + 1, dtype=dtype, device=xt.device).unsqueeze(0)
    Q_bar_prev = torch.cat([eye, torch.as_tensor(transitions.Q_bar[:-1], dtype=dtype, device=xt.device)], dim=0)

    # likelihood[b, h, w, k] = q(x_t | x_{t-1} = k)
    B, H, W = xt.shape
    step = Q[t - 1]                                    # (B, K+1, K+1)
    likelihood = step[torch.arange(B, device=xt.device)[:, None], :, xt.reshape(B, -1)]
    likelihood = likelihood.reshape(B, H, W, K + 1)

    prior = Q_bar_prev[t - 1][:, :K, :]                # (B, K, K+1) rows: x0 -> x_{t-1}
    joint = prior[:, None, None, :, :] * likelihood[:, :, :, None, :]   # (B, H, W, K, K+1)
    z = joint.sum(-1, keepdim=True)
    conditional = torch.where(z > 0, joint / z.clamp_min(torch.finfo(dtype).tiny), torch.zeros_like(joint))
    weights = x0_probs.permute(0, 2, 3, 1).unsqueeze(-1)                   # (B, H, W, K, 1)
    mixture = (conditional * weights).sum(-2)
    mixture = mixture / mixture.sum(-1, keepdim=True).clamp_min(torch.finfo(dtype).tiny)
    return mixture.permute(0, 3, 1, 2)
