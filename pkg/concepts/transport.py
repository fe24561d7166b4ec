"""
Distribution distances between latent point sets.

KL divergence for discrete distributions, log-domain entropic Sinkhorn
distance between uniformly weighted point clouds, the SBSD contrastive loss
and margin rule built on it, and exact assignment oracles for testing the
solver.
"""
import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from django.conf import settings
from scipy.optimize import linear_sum_assignment

from .exceptions import ContractError, DomainError, ShapeError

logger = logging.getLogger(__name__)

SBSD_GROUP_SIZE = 7
SBSD_SPLIT = (3, 4)
# below this epsilon sinkhorn_distance warm-starts through a shrinking epsilon schedule
ANNEALING_EPSILON = 1e-2


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"Sinkhorn epsilon must be positive, got {self.epsilon}")
        if not self.tol > 0:
            raise ContractError(f"Sinkhorn tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ContractError(f"Sinkhorn max_iters must be >= 1, got {self.max_iters}")

    @classmethod
    def from_settings(cls):
        """Defaults taken from the SINKHORN_* settings"""
        return cls(
            epsilon=settings.SINKHORN_EPSILON,
            max_iters=settings.SINKHORN_MAX_ITERS,
            tol=settings.SINKHORN_TOL,
        )


@dataclass(frozen=True)
class PointCloud:
    """Uniformly weighted samples, shape (..., k, d)"""

    points: torch.Tensor

    def __post_init__(self):
        if self.points.dim() < 2 or self.points.shape[-2] < 1:
            raise ContractError(f"point cloud needs shape (..., k>=1, d), got {list(self.points.shape)}")

    @property
    def size(self):
        return self.points.shape[-2]

    @property
    def weights(self):
        k = self.size
        return torch.full(self.points.shape[:-1], 1.0 / k, dtype=self.points.dtype, device=self.points.device)


@dataclass
class SinkhornResult:
    distance: torch.Tensor
    coupling: torch.Tensor
    converged: bool
    iterations: int
    marginal_error: float
    potentials: Tuple[torch.Tensor, torch.Tensor] = None


class SinkhornDistance(NamedTuple):
    value: torch.Tensor
    converged: bool


def kl_divergence(p, q):
    """
    KL(p || q) = sum p log(p / q) for discrete distributions along the last axis.

    Zero-probability entries of p contribute nothing; q must be positive wherever p is.
    """
    p = torch.as_tensor(p)
    q = torch.as_tensor(q, dtype=p.dtype)
    if p.shape != q.shape:
        raise ShapeError('kl_divergence', p.shape, q.shape)
    if (p < 0).any() or (q < 0).any():
        raise DomainError('kl_divergence: probabilities must be non-negative')
    if ((p > 0) & (q <= 0)).any():
        raise DomainError('kl_divergence: q must be positive wherever p is positive')
    return (torch.special.xlogy(p, p) - torch.special.xlogy(p, q)).sum(dim=-1)


def squared_euclidean_cost(x, y):
    """Pairwise squared distances (..., k, l) between (..., k, d) and (..., l, d)"""
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError('sinkhorn_distance', x.shape, y.shape, detail='clouds must share d')
    diff = x.unsqueeze(-2) - y.unsqueeze(-3)
    return (diff * diff).sum(dim=-1)


def sinkhorn(a: PointCloud, b: PointCloud, cfg: SinkhornConfig = None, potentials=None) -> SinkhornResult:
    """
    Entropic OT between two clouds by alternating log-domain marginal scaling.

    Stops once both marginal violations drop below ``cfg.tol`` or after
    ``cfg.max_iters`` iterations; gradients flow through the unrolled iterations.
    ``potentials`` warm-starts the dual variables (f, g).
    """
    cfg = cfg or SinkhornConfig.from_settings()
    cost = squared_euclidean_cost(a.points, b.points)
    eps = cfg.epsilon
    log_a = torch.log(a.weights)
    log_b = torch.log(b.weights)
    if potentials is None:
        f = torch.zeros_like(log_a)
        g = torch.zeros_like(log_b)
    else:
        f, g = potentials

    converged = False
    violation = math.inf
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        f = -eps * torch.logsumexp((g.unsqueeze(-2) - cost) / eps + log_b.unsqueeze(-2), dim=-1)
        g = -eps * torch.logsumexp((f.unsqueeze(-1) - cost) / eps + log_a.unsqueeze(-1), dim=-2)
        with torch.no_grad():
            log_plan = (f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / eps + log_a.unsqueeze(-1) + log_b.unsqueeze(-2)
            plan = torch.exp(log_plan)
            row_error = (plan.sum(dim=-1) - a.weights).abs().max().item()
            col_error = (plan.sum(dim=-2) - b.weights).abs().max().item()
            violation = max(row_error, col_error)
        if violation < cfg.tol:
            converged = True
            break

    log_plan = (f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / eps + log_a.unsqueeze(-1) + log_b.unsqueeze(-2)
    coupling = torch.exp(log_plan)
    distance = (coupling * cost).sum(dim=(-2, -1))
    if not converged:
        logger.debug(f"Sinkhorn stopped after {iterations} iterations with marginal violation {violation:.2e}")
    return SinkhornResult(distance, coupling, converged, iterations, violation, (f, g))


def sinkhorn_annealed(a: PointCloud, b: PointCloud, cfg: SinkhornConfig = None, factor=0.5) -> SinkhornResult:
    """
    Sinkhorn with epsilon scaling: solve at a coarse epsilon near the largest
    cost, then shrink it geometrically down to ``cfg.epsilon``, warm-starting
    each stage from the previous potentials.

    Returns the final stage's result; ``iterations`` counts every stage.
    """
    cfg = cfg or SinkhornConfig.from_settings()
    if not 0 < factor < 1:
        raise ContractError(f"epsilon scaling factor must lie in (0, 1), got {factor}")
    with torch.no_grad():
        top = squared_euclidean_cost(a.points, b.points).max().item()
    schedule = []
    eps = max(top, cfg.epsilon)
    while eps > cfg.epsilon:
        schedule.append(eps)
        eps *= factor
    schedule.append(cfg.epsilon)

    potentials, total = None, 0
    for eps in schedule:
        result = sinkhorn(a, b, replace(cfg, epsilon=eps), potentials)
        potentials, total = result.potentials, total + result.iterations
    result.iterations = total
    logger.debug(f"Annealed Sinkhorn over {len(schedule)} stages, {total} iterations")
    return result


def sinkhorn_distance(a: PointCloud, b: PointCloud, cfg: SinkhornConfig = None) -> SinkhornDistance:
    """
    Regularised transport cost <T*, C> and whether both marginals met ``cfg.tol``.

    Epsilon below ANNEALING_EPSILON is reached through ``sinkhorn_annealed``,
    with ``cfg.max_iters`` per stage.
    """
    cfg = cfg or SinkhornConfig.from_settings()
    solve = sinkhorn_annealed if cfg.epsilon < ANNEALING_EPSILON else sinkhorn
    result = solve(a, b, cfg)
    if not result.converged:
        logger.warning(
            f"Sinkhorn did not converge at epsilon {cfg.epsilon:g} within {cfg.max_iters} iterations "
            f"(marginal violation {result.marginal_error:.2e})"
        )
    return SinkhornDistance(result.distance, result.converged)


def exact_ot_oracle(a: PointCloud, b: PointCloud) -> float:
    """Optimal assignment cost / k between equal-size uniform clouds (Hungarian search)"""
    if a.points.dim() != 2 or b.points.dim() != 2:
        raise ContractError('exact_ot_oracle works on single (k, d) clouds')
    if a.size != b.size:
        raise ContractError(f"exact_ot_oracle needs equal cardinalities, got {a.size} and {b.size}")
    cost = squared_euclidean_cost(a.points.detach(), b.points.detach()).double().cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.size)


def brute_force_ot(a: PointCloud, b: PointCloud) -> float:
    """Same quantity as ``exact_ot_oracle`` by enumerating all k! assignments"""
    if a.size != b.size:
        raise ContractError(f"brute_force_ot needs equal cardinalities, got {a.size} and {b.size}")
    cost = squared_euclidean_cost(a.points.detach(), b.points.detach()).double().cpu().numpy()
    k = a.size
    best = min(cost[np.arange(k), list(perm)].sum() for perm in itertools.permutations(range(k)))
    return float(best / k)


def sbsd_contrast(within, between):
    """-log(e^-within / (e^-within + e^-between)), written as softplus(within - between)"""
    return F.softplus(within - between)


def split_primary(split_seed, size=SBSD_GROUP_SIZE):
    """Disjoint 3 + 4 index partition of the primary group drawn from ``split_seed``"""
    generator = torch.Generator().manual_seed(int(split_seed))
    order = torch.randperm(size, generator=generator)
    return order[:SBSD_SPLIT[0]], order[SBSD_SPLIT[0]:]


def sbsd_loss(primary: PointCloud, auxiliary: PointCloud, split_seed, cfg: SinkhornConfig = None):
    """
    Contrast the distance between two halves of the primary group against
    the distance between the primary and auxiliary groups.

    Both clouds hold 7 points: 6 primary images plus the positive test image,
    and the 7 auxiliary-side images.
    """
    if primary.size != SBSD_GROUP_SIZE or auxiliary.size != SBSD_GROUP_SIZE:
        raise ContractError(
            f"sbsd_loss needs {SBSD_GROUP_SIZE} points per side, got {primary.size} and {auxiliary.size}"
        )
    first, second = split_primary(split_seed)
    left = PointCloud(primary.points.index_select(-2, first))
    right = PointCloud(primary.points.index_select(-2, second))
    within = sinkhorn_distance(left, right, cfg).value
    between = sinkhorn_distance(primary, auxiliary, cfg).value
    return sbsd_contrast(within, between)


def sbsd_score(candidate, primary: PointCloud, auxiliary: PointCloud, cfg: SinkhornConfig = None):
    """
    Margin D({c}, auxiliary) - D({c}, primary); positive means the candidate
    sits closer to the primary group.
    """
    single = PointCloud(candidate.unsqueeze(-2))
    return sinkhorn_distance(single, auxiliary, cfg).value - sinkhorn_distance(single, primary, cfg).value
