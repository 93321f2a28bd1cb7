"""Permutation-invariant losses between equal-size point sets.

All costs follow the sum convention of the empirical W2 surrogate: a perfect
match of q points sums q squared distances. Pass ``normalize=True`` to divide
by q instead.
"""
import itertools
import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import ParameterError, ShapeError, SizeError

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_Q = 7


@dataclass
class MatchResult:
    cost: torch.Tensor        # scalar, differentiable with the assignment held fixed
    assignment: np.ndarray    # target j is matched to prediction assignment[j]

    @property
    def value(self):
        return float(self.cost.detach())


@dataclass
class SinkhornResult:
    cost: torch.Tensor
    plan: torch.Tensor
    converged: bool
    iterations: int

    @property
    def value(self):
        return float(self.cost.detach())


def _check_pair(targets, preds, equal_size=True):
    if targets.ndim != 2 or preds.ndim != 2:
        raise ShapeError(f"expected (q, d) sets, got {tuple(targets.shape)} and {tuple(preds.shape)}")
    if targets.shape[1] != preds.shape[1]:
        raise ShapeError(f"dimension mismatch: {targets.shape[1]} vs {preds.shape[1]}")
    if equal_size and targets.shape[0] != preds.shape[0]:
        raise ShapeError(f"set sizes differ: {targets.shape[0]} vs {preds.shape[0]}")
    if targets.shape[0] < 1 or preds.shape[0] < 1:
        raise ParameterError("point sets must be nonempty")


def pairwise_sq_dists(a, b):
    """Squared Euclidean distances between rows, (..., n, d) x (..., m, d) -> (..., n, m)."""
    return ((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1)


def _matched_cost(targets, preds, assignment):
    idx = torch.as_tensor(assignment, dtype=torch.long, device=preds.device)
    return ((targets - preds[idx]) ** 2).sum()


def hungarian_w2(targets, preds):
    """Exact empirical W2^2 under the optimal bijection (Hungarian / Jonker-Volgenant)."""
    _check_pair(targets, preds)
    cost_matrix = pairwise_sq_dists(targets.detach(), preds.detach()).cpu().numpy()
    rows, cols = linear_sum_assignment(cost_matrix)
    assignment = cols[np.argsort(rows)]
    return MatchResult(cost=_matched_cost(targets, preds, assignment), assignment=assignment)


def brute_force_w2(targets, preds):
    """Exhaustive minimum over all q! bijections; test oracle for small q."""
    _check_pair(targets, preds)
    q = targets.shape[0]
    if q > BRUTE_FORCE_MAX_Q:
        raise SizeError(f"brute force refuses q={q} > {BRUTE_FORCE_MAX_Q}")
    cost_matrix = pairwise_sq_dists(targets.detach(), preds.detach()).cpu().numpy()
    best_cost, best = np.inf, None
    for perm in itertools.permutations(range(q)):
        cost = cost_matrix[np.arange(q), perm].sum()
        if cost < best_cost:
            best_cost, best = cost, np.array(perm)
    return MatchResult(cost=_matched_cost(targets, preds, best), assignment=best)


def chamfer(targets, preds, two_sided=True):
    """Nearest-neighbor squared distances summed over targets (and over preds when two-sided)."""
    _check_pair(targets, preds, equal_size=False)
    d2 = pairwise_sq_dists(targets, preds)
    cost = d2.min(dim=1).values.sum()
    if two_sided:
        cost = cost + d2.min(dim=0).values.sum()
    return cost


def sinkhorn(targets, preds, epsilon=0.05, max_iters=200, tol=1e-6):
    """Entropic OT with uniform marginals, log-domain iterations.

    The reported cost is the transport term only, multiplied by q so it is on
    the same scale as ``hungarian_w2``.
    """
    _check_pair(targets, preds)
    if epsilon <= 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    costs, plans, converged, iterations = _sinkhorn_batched(
        targets.unsqueeze(0), preds.unsqueeze(0), epsilon, max_iters, tol
    )
    if not converged:
        logger.warning("Sinkhorn did not converge within %d iterations (epsilon=%g)", max_iters, epsilon)
    return SinkhornResult(cost=costs[0], plan=plans[0], converged=converged, iterations=iterations)


def _sinkhorn_batched(targets, preds, epsilon, max_iters, tol):
    C = pairwise_sq_dists(targets, preds)
    n, q = C.shape[0], C.shape[1]
    log_mu = torch.full((n, q), -np.log(q), dtype=C.dtype, device=C.device)
    f = torch.zeros_like(log_mu)
    g = torch.zeros_like(log_mu)
    converged, it = False, 0
    for it in range(1, max_iters + 1):
        f = epsilon * (log_mu - torch.logsumexp((g.unsqueeze(1) - C) / epsilon, dim=2))
        g = epsilon * (log_mu - torch.logsumexp((f.unsqueeze(2) - C) / epsilon, dim=1))
        with torch.no_grad():
            log_plan = (f.unsqueeze(2) + g.unsqueeze(1) - C) / epsilon
            violation = (log_plan.exp().sum(2) - 1.0 / q).abs().max()
        if violation < tol:
            converged = True
            break
    plan = ((f.unsqueeze(2) + g.unsqueeze(1) - C) / epsilon).exp()
    costs = q * (plan * C).sum(dim=(1, 2))
    return costs, plan, converged, it


def batched_set_loss(targets, preds, kind='hungarian', normalize=False, epsilon=0.05, max_iters=200, tol=1e-6):
    """Per-set losses for (N, q, d) target and prediction sets -> (N,)."""
    if targets.shape != preds.shape:
        raise ShapeError(f"target sets {tuple(targets.shape)} and prediction sets {tuple(preds.shape)} differ")
    N, q, _ = targets.shape
    if kind == 'hungarian':
        cost_matrices = pairwise_sq_dists(targets.detach(), preds.detach()).cpu().numpy()
        assignment = np.empty((N, q), dtype=np.int64)
        for n in range(N):
            rows, cols = linear_sum_assignment(cost_matrices[n])
            assignment[n] = cols[np.argsort(rows)]
        idx = torch.as_tensor(assignment, device=preds.device)
        matched = torch.gather(preds, 1, idx.unsqueeze(-1).expand_as(preds))
        costs = ((targets - matched) ** 2).sum(dim=(1, 2))
    elif kind == 'chamfer':
        d2 = pairwise_sq_dists(targets, preds)
        costs = d2.min(dim=2).values.sum(1) + d2.min(dim=1).values.sum(1)
    elif kind == 'sinkhorn':
        costs, _, converged, _ = _sinkhorn_batched(targets, preds, epsilon, max_iters, tol)
        if not converged:
            logger.warning("Batched Sinkhorn did not converge within %d iterations", max_iters)
    else:
        raise ParameterError(f"Unknown set loss: {kind}")
    return costs / q if normalize else costs
