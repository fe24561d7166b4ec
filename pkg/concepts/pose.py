"""
Pose-matrix embedding blocks and the stacks built from them.

A pose block cuts each encoded token into head-width pieces, maps every piece
through a learnable ``(d/m) x d`` matrix, sums the resulting pose vectors per
output token, squashes the sum and adds it back onto that token. The full
block keeps a matrix for every (source token, head, target token) triple; the
straw block keeps one per (head, target token) and reads the pieces from a
global token that a masked encoder layer has pooled over all tokens.
"""
import enum
import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .attention import EncoderConfig, EncoderLayer, FeedForwardBlock, MaskedGlobalEncoderLayer
from .exceptions import ContractError, ShapeError

logger = logging.getLogger(__name__)

BANK_INIT_GAIN = 0.1


class StackVariant(str, enum.Enum):
    VANILLA = 'vanilla'
    POSE = 'pose'
    STRAW = 'straw'


def squash(v, dim=-1):
    """
    Capsule squash: (|v|^2 / (1 + |v|^2)) * v / |v|, with squash(0) = 0.

    Written as v * |v| / (1 + |v|^2); the norm is floored inside the square root
    so the value and gradient stay finite at the origin.
    """
    norm_sq = (v * v).sum(dim=dim, keepdim=True)
    norm = torch.sqrt(norm_sq.clamp(min=1e-24))
    return v * (norm / (1.0 + norm_sq))


def segment(token, m):
    """Split the last axis into ``m`` contiguous head-width pieces: (..., d) -> (..., m, d/m)"""
    d = token.shape[-1]
    if m < 1 or d % m:
        raise ShapeError('segment', token.shape, (m,), detail='d must be divisible by m')
    return token.unflatten(-1, (m, d // m))


def _init_bank(bank, fan_in):
    bound = BANK_INIT_GAIN * math.sqrt(3.0 / fan_in)
    nn.init.uniform_(bank, -bound, bound)


class PoseEmbedding(nn.Module):
    """
    Full pose block: O_k = V_k + squash(sum_i sum_j H_ij W_ijk).

    ``bank`` holds n*m*n matrices laid out as (i, j, k, d/m, d).
    """

    def __init__(self, n, cfg: EncoderConfig):
        super().__init__()
        self.n = n
        self.cfg = cfg
        self.bank = nn.Parameter(torch.empty(n, cfg.m, n, cfg.head_width, cfg.d))
        _init_bank(self.bank, n * cfg.d)

    def forward(self, tokens):
        if tuple(tokens.shape[-2:]) != (self.n, self.cfg.d):
            raise ShapeError('pose_embed_full', tokens.shape, (self.n, self.cfg.d))
        pieces = segment(tokens, self.cfg.m)
        pose = torch.einsum('...ijh,ijkhd->...kd', pieces, self.bank)
        return tokens + squash(pose)


class StrawPoseEmbedding(nn.Module):
    """
    Straw pose block over ``[V_0, V_1..V_n]``: O_k = V_k + squash(sum_j H_0j W~_jk).

    ``bank`` holds m*n matrices laid out as (j, k, d/m, d). Returns the n
    token rows; the global row is handed back separately by the stack.
    """

    def __init__(self, n, cfg: EncoderConfig):
        super().__init__()
        self.n = n
        self.cfg = cfg
        self.bank = nn.Parameter(torch.empty(cfg.m, n, cfg.head_width, cfg.d))
        _init_bank(self.bank, cfg.d)

    def forward(self, tokens):
        if tokens.shape[-2] != self.n + 1:
            raise ContractError(
                f"pose_embed_straw: expected {self.n + 1} rows (global row first), got {tokens.shape[-2]}"
            )
        if tokens.shape[-1] != self.cfg.d:
            raise ShapeError('pose_embed_straw', tokens.shape, (self.n + 1, self.cfg.d))
        global_pieces = segment(tokens[..., 0, :], self.cfg.m)
        pose = torch.einsum('...jh,jkhd->...kd', global_pieces, self.bank)
        return tokens[..., 1:, :] + squash(pose)


@dataclass(frozen=True)
class PoseStackConfig:
    """N logical layers over n tokens; the last one is always a plain encoder layer"""

    N: int
    n: int
    cfg: EncoderConfig
    variant: StackVariant = StackVariant.VANILLA

    def __post_init__(self):
        if self.N < 1:
            raise ContractError(f"stack needs N >= 1, got {self.N}")
        if self.n < 1:
            raise ContractError(f"stack needs n >= 1, got {self.n}")
        object.__setattr__(self, 'variant', StackVariant(self.variant))


class VanillaStack(nn.Module):
    """N standard encoder layers"""

    def __init__(self, stack: PoseStackConfig):
        super().__init__()
        self.stack = stack
        self.layers = nn.ModuleList(EncoderLayer(stack.cfg) for _ in range(stack.N))

    def forward(self, tokens):
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens


class PoseTransformer(nn.Module):
    """
    N-1 logical layers of [encoder layer -> full pose block -> feedforward block],
    then one terminal encoder layer. With N = 1 this is a single encoder layer.
    """

    def __init__(self, stack: PoseStackConfig):
        super().__init__()
        self.stack = stack
        self.encoders = nn.ModuleList(EncoderLayer(stack.cfg) for _ in range(stack.N - 1))
        self.poses = nn.ModuleList(PoseEmbedding(stack.n, stack.cfg) for _ in range(stack.N - 1))
        self.feedforwards = nn.ModuleList(FeedForwardBlock(stack.cfg) for _ in range(stack.N - 1))
        self.terminal = EncoderLayer(stack.cfg)

    def forward(self, tokens):
        for encoder, pose, feedforward in zip(self.encoders, self.poses, self.feedforwards):
            tokens = feedforward(pose(encoder(tokens)))
        return self.terminal(tokens)


class StrawPoseTransformer(nn.Module):
    """
    Straw variant. The first logical layer prepends the learnable global token;
    every logical layer but the last hands ``[V_0, O_1..O_n]`` onward, the last
    drops ``V_0``, and a terminal encoder layer follows.
    """

    def __init__(self, stack: PoseStackConfig):
        super().__init__()
        self.stack = stack
        blocks = stack.N - 1
        self.global_token = nn.Parameter(torch.randn(stack.cfg.d) * 0.02) if blocks else None
        self.encoders = nn.ModuleList(MaskedGlobalEncoderLayer(stack.cfg) for _ in range(blocks))
        self.poses = nn.ModuleList(StrawPoseEmbedding(stack.n, stack.cfg) for _ in range(blocks))
        self.feedforwards = nn.ModuleList(FeedForwardBlock(stack.cfg) for _ in range(blocks))
        self.terminal = EncoderLayer(stack.cfg)

    def forward(self, tokens):
        if self.encoders:
            lead = tokens.shape[:-2]
            v0 = self.global_token.expand(*lead, 1, self.stack.cfg.d)
            rows = torch.cat([v0, tokens], dim=-2)
            last = len(self.encoders) - 1
            for index, (encoder, pose, feedforward) in enumerate(zip(self.encoders, self.poses, self.feedforwards)):
                encoded = encoder(rows)
                outputs = pose(encoded)
                if index == last:
                    tokens = feedforward(outputs)
                else:
                    rows = feedforward(torch.cat([encoded[..., :1, :], outputs], dim=-2))
        return self.terminal(tokens)


STACKS = {
    StackVariant.VANILLA: VanillaStack,
    StackVariant.POSE: PoseTransformer,
    StackVariant.STRAW: StrawPoseTransformer,
}


def build_stack(stack: PoseStackConfig) -> nn.Module:
    """Factory function to get the attention stack for a variant"""
    logger.debug(f"Building {stack.variant.value} stack: N={stack.N}, n={stack.n}, d={stack.cfg.d}, m={stack.cfg.m}")
    return STACKS[stack.variant](stack)


def mapping_params_per_block(stack: PoseStackConfig) -> int:
    """Closed-form mapping-bank size of one pose block: n^2 d^2 (pose), n d^2 (straw), 0 (vanilla)"""
    n, d = stack.n, stack.cfg.d
    if stack.variant == StackVariant.POSE:
        return n * n * d * d
    if stack.variant == StackVariant.STRAW:
        return n * d * d
    return 0


def param_count(stack: PoseStackConfig, module: nn.Module = None):
    """
    Count mapping-bank and total parameters for a stack.

    Returns:
        dict: mapping_params_per_block, mapping_params (all blocks), total_params
    """
    module = module if module is not None else build_stack(stack)
    per_block = mapping_params_per_block(stack)
    blocks = stack.N - 1 if stack.variant != StackVariant.VANILLA else 0
    counted = sum(p.numel() for name, p in module.named_parameters() if name.split('.')[-1] == 'bank')
    if counted != per_block * blocks:
        raise ContractError(f"mapping banks hold {counted} params, closed form says {per_block * blocks}")
    return {
        'mapping_params_per_block': per_block,
        'mapping_params': counted,
        'total_params': sum(p.numel() for p in module.parameters()),
    }
