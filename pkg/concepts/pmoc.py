"""
Probability model of concept membership.

An image encoder turns each image into a set of perspective vectors. Per
perspective, a head scores how likely each of the 8 candidate images belongs
to the distribution of the 6 primary images: the Gaussian head (v1)
parameterises that distribution and evaluates a log-density, the direct head
(v2) fits the membership probability itself. Scores are averaged over
perspectives.
"""
import enum
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from .attention import EncoderConfig, EncoderLayer, PositionalEmbedding
from .exceptions import ContractError, ShapeError
from .pose import PoseStackConfig, StackVariant, build_stack

logger = logging.getLogger(__name__)

EPISODE_SIZE = 14
PRIMARY = slice(0, 6)
CANDIDATES = slice(6, 14)
LOG_VAR_RANGE = (-10.0, 10.0)
SIGMA_FLOOR = 1e-12
# scores are clamped to [SCORE_EPS, 1 - SCORE_EPS] before taking logits
SCORE_EPS = 1e-6


class HeadVersion(str, enum.Enum):
    GAUSSIAN = 'v1'
    DIRECT = 'v2'


class LossMode(str, enum.Enum):
    SOFTMAX = 'softmax'
    BINARY = 'binary'


@dataclass(frozen=True)
class EncoderBackboneConfig:
    """Conv schedule and perspective sizing of the image encoder"""

    channels: Tuple[int, ...] = (1, 16, 32, 64)
    image_side: int = 64
    d: int = 64
    m: int = 4
    n_perspectives: int = 16

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(self.channels))
        if len(self.channels) < 2 or self.channels[0] != 1:
            raise ContractError(f"conv schedule must start at 1 channel, got {self.channels}")
        if not 1 <= self.n_perspectives <= self.grid_cells:
            raise ContractError(
                f"n_perspectives must lie in [1, {self.grid_cells}] for a "
                f"{self.grid_side}x{self.grid_side} feature grid, got {self.n_perspectives}"
            )

    @property
    def grid_side(self):
        side = self.image_side
        for _ in self.channels[1:]:
            side = (side + 1) // 2
        return side

    @property
    def grid_cells(self):
        return self.grid_side ** 2


class ImageEncoder(nn.Module):
    """
    Conv backbone, a projection of the cell mean added to every cell, one
    self-attention pass over the feature-map cells, then ``n_perspectives``
    evenly spaced cells kept as perspectives.
    """

    def __init__(self, cfg: EncoderBackboneConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        for c_in, c_out in zip(cfg.channels[:-1], cfg.channels[1:]):
            blocks += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1), nn.ReLU()]
        self.convs = nn.Sequential(*blocks)
        self.project = nn.Linear(cfg.channels[-1], cfg.d)
        self.context = nn.Linear(cfg.d, cfg.d)
        self.position = PositionalEmbedding(cfg.grid_cells, cfg.d)
        self.attention = EncoderLayer(EncoderConfig(d=cfg.d, m=cfg.m))
        keep = torch.linspace(0, cfg.grid_cells - 1, cfg.n_perspectives).round().long()
        self.register_buffer('keep', keep, persistent=False)

    def forward(self, images):
        side = self.cfg.image_side
        if images.dim() < 3 or tuple(images.shape[-3:]) != (1, side, side):
            raise ShapeError('encode_image', images.shape, (1, side, side))
        lead = images.shape[:-3]
        features = self.convs(images.reshape(-1, 1, side, side))
        tokens = self.project(features.flatten(-2).transpose(-2, -1))
        tokens = tokens + self.context(tokens.mean(dim=-2, keepdim=True))
        tokens = self.attention(self.position(tokens))
        perspectives = tokens.index_select(-2, self.keep)
        return perspectives.reshape(*lead, self.cfg.n_perspectives, self.cfg.d)


def spectral_normalize(weight, u, iterations=1):
    """
    Divide ``weight`` by its power-iteration estimate of sigma_max.

    Returns:
        tuple: (normalised weight, updated left singular vector estimate, sigma)
    """
    with torch.no_grad():
        for _ in range(iterations):
            v = F.normalize(weight.t() @ u, dim=0)
            u = F.normalize(weight @ v, dim=0)
        v = F.normalize(weight.t() @ u, dim=0)
    sigma = torch.dot(u, weight @ v)
    return weight / sigma.clamp(min=SIGMA_FLOOR), u, sigma


class SpectralNorm(nn.Module):
    """Weight parametrization dividing by sigma_max; one power iteration per training forward"""

    def __init__(self, weight, warmup=15):
        super().__init__()
        rows = weight.shape[0]
        u = F.normalize(torch.randn(rows, dtype=weight.dtype), dim=0)
        self.register_buffer('u', u)
        with torch.no_grad():
            _, u, _ = spectral_normalize(weight.detach(), self.u, iterations=warmup)
        self.u.copy_(u)

    def forward(self, weight):
        normalised, u, _ = spectral_normalize(weight, self.u, iterations=1 if self.training else 0)
        if self.training:
            self.u.copy_(u)
        return normalised


def apply_spectral_norm(module: nn.Module):
    """Register SpectralNorm on the weight of every nn.Linear inside ``module``"""
    count = 0
    for layer in module.modules():
        if isinstance(layer, nn.Linear) and not parametrize.is_parametrized(layer, 'weight'):
            parametrize.register_parametrization(layer, 'weight', SpectralNorm(layer.weight))
            count += 1
    logger.debug(f"spectral norm applied to {count} linear maps")
    return module


@dataclass(frozen=True)
class HeadConfig:
    """Attention stack settings for a PMoC head"""

    variant: StackVariant = StackVariant.VANILLA
    N: int = 2
    d: int = 64
    m: int = 4
    spectral_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'variant', StackVariant(self.variant))

    def stack(self, n) -> PoseStackConfig:
        return PoseStackConfig(N=self.N, n=n, cfg=EncoderConfig(d=self.d, m=self.m), variant=self.variant)


@dataclass
class GaussianParams:
    mu: torch.Tensor
    log_var: torch.Tensor


def gaussian_log_prob(z, params: GaussianParams):
    """
    Diagonal-Gaussian log-density summed over dimensions:
    sum_m [ -(z_m - mu_m)^2 / (2 sigma_m^2) - log sigma_m - log(2 pi) / 2 ]
    """
    log_var = params.log_var.clamp(*LOG_VAR_RANGE)
    return (
        -0.5 * (z - params.mu) ** 2 * torch.exp(-log_var)
        - 0.5 * log_var
        - 0.5 * math.log(2 * math.pi)
    ).sum(dim=-1)


class GaussianHead(nn.Module):
    """
    Per perspective: 6 primary tokens plus two learnable slot vectors, with
    positional embedding, through the attention stack; the slots read out as
    mean and log-variance.
    """

    tokens = 8

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.slots = nn.Parameter(torch.randn(2, cfg.d) * 0.02)
        self.position = PositionalEmbedding(self.tokens, cfg.d)
        self.stack = build_stack(cfg.stack(self.tokens))

    def forward(self, primary_z) -> GaussianParams:
        if primary_z.shape[-2] != 6:
            raise ContractError(f"gaussian_head needs 6 primary tokens, got {primary_z.shape[-2]}")
        slots = self.slots.expand(*primary_z.shape[:-2], 2, self.cfg.d)
        encoded = self.stack(self.position(torch.cat([primary_z, slots], dim=-2)))
        return GaussianParams(mu=encoded[..., 6, :], log_var=encoded[..., 7, :].clamp(*LOG_VAR_RANGE))


class DirectProbabilityHead(nn.Module):
    """
    Per perspective: 6 primary tokens plus one candidate, with positional
    embedding, through the attention stack; a shared two-layer perceptron with
    sigmoid scores every token and the 7 scores are averaged.
    """

    tokens = 7

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.position = PositionalEmbedding(self.tokens, cfg.d)
        self.stack = build_stack(cfg.stack(self.tokens))
        self.readout = nn.Sequential(nn.Linear(cfg.d, cfg.d), nn.GELU(approximate='tanh'), nn.Linear(cfg.d, 1))
        if cfg.spectral_norm:
            apply_spectral_norm(self)

    def forward(self, primary_z, candidate_z):
        tokens = torch.cat([primary_z, candidate_z.unsqueeze(-2)], dim=-2)
        if tokens.shape[-2] != self.tokens:
            raise ContractError(f"direct_prob_head needs 6 primary tokens + 1 candidate, got {tokens.shape[-2]}")
        encoded = self.stack(self.position(tokens))
        return torch.sigmoid(self.readout(encoded)).squeeze(-1).mean(dim=-1)


class LogProbCalibration(nn.Module):
    """sigmoid((logp - running mean) / running std), with batch statistics while training"""

    def __init__(self, momentum=0.1):
        super().__init__()
        self.momentum = momentum
        self.register_buffer('running_mean', torch.zeros(()))
        self.register_buffer('running_var', torch.ones(()))

    def forward(self, log_prob):
        if self.training:
            mean = log_prob.detach().mean()
            var = log_prob.detach().var(unbiased=False) if log_prob.numel() > 1 else self.running_var
            self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
            self.running_var.mul_(1 - self.momentum).add_(self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        return torch.sigmoid((log_prob - mean) / torch.sqrt(var + 1e-5))


def _split_episode(latents):
    if latents.dim() < 4 or latents.shape[-3] != EPISODE_SIZE:
        raise ContractError(
            f"score_episode needs latents shaped (..., 14, n, d), got {list(latents.shape)}"
        )
    # (..., 14, n, d) -> (..., n, 14, d): perspectives become a batch axis
    per_perspective = latents.transpose(-3, -2)
    return per_perspective[..., PRIMARY, :], per_perspective[..., CANDIDATES, :]


def score_episode(latents, head, version=HeadVersion.DIRECT, calibration=None):
    """
    Score the 8 candidates (images 7..14) of each episode.

    Args:
        latents: (..., 14, n, d) perspective sets
        head: GaussianHead (v1) or DirectProbabilityHead (v2)
        version: HeadVersion
        calibration: LogProbCalibration, required for v1

    Returns:
        torch.Tensor: (..., 8) scores in [0, 1], the mean over perspectives
    """
    version = HeadVersion(version)
    primary, candidates = _split_episode(latents)
    if version == HeadVersion.GAUSSIAN:
        if calibration is None:
            raise ContractError('score_episode v1 needs a LogProbCalibration')
        params = head(primary)
        log_prob = gaussian_log_prob(
            candidates,
            GaussianParams(mu=params.mu.unsqueeze(-2), log_var=params.log_var.unsqueeze(-2)),
        )
        per_perspective = calibration(log_prob)
    else:
        count = candidates.shape[-2]
        expanded = primary.unsqueeze(-3).expand(*primary.shape[:-2], count, *primary.shape[-2:])
        per_perspective = head(expanded, candidates)
    # (..., n, 8) -> (..., 8)
    return per_perspective.mean(dim=-2)


def score_logits(scores):
    """log(s / (1 - s)) of membership probabilities, clamped away from 0 and 1"""
    return torch.logit(scores, eps=SCORE_EPS)


def pmoc_loss(scores, mode=LossMode.SOFTMAX):
    """
    Cross-entropy with candidate 0 (image 7) as the positive, taken over the
    logits of the 8 scores.

    softmax: categorical cross-entropy over the 8 logits.
    binary: per-candidate binary cross-entropy, target 1 for candidate 0 and 0 otherwise.
    """
    mode = LossMode(mode)
    logits = score_logits(scores.reshape(-1, scores.shape[-1]))
    if mode == LossMode.SOFTMAX:
        target = torch.zeros(logits.shape[0], dtype=torch.long, device=logits.device)
        return F.cross_entropy(logits, target)
    target = torch.zeros_like(logits)
    target[:, 0] = 1.0
    return F.binary_cross_entropy_with_logits(logits, target)


@dataclass(frozen=True)
class TestImageDecision:
    per_image: Tuple[bool, bool]
    pairwise: bool

    @property
    def per_image_correct(self):
        return all(self.per_image)


def classify_test_images(scores):
    """
    Decide the two test images of one episode from its 8 scores.

    per_image: score(x7) > 0.5 and score(x14) <= 0.5; pairwise: score(x7) > score(x14).
    """
    positive = float(scores[0])
    negative = float(scores[-1])
    return TestImageDecision(per_image=(positive > 0.5, negative <= 0.5), pairwise=positive > negative)


def accuracy(decisions):
    """Fraction of episodes decided correctly under each rule"""
    decisions = list(decisions)
    if not decisions:
        return {'per_image': 0.0, 'pairwise': 0.0, 'episodes': 0}
    return {
        'per_image': sum(d.per_image_correct for d in decisions) / len(decisions),
        'pairwise': sum(d.pairwise for d in decisions) / len(decisions),
        'episodes': len(decisions),
    }
