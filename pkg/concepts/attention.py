"""
Multi-head self-attention encoder layers.

Layers take token matrices of shape ``(..., n, d)``. ``key_mask`` marks
positions (``True`` = hidden) that no query may attend to.
"""
import math
from dataclasses import dataclass

import torch
from torch import nn

from .autodiff import LAYERNORM_EPS, forward_op
from .exceptions import ContractError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    """Width, head count and feedforward sizing shared by every layer of a stack"""

    d: int = 64
    m: int = 4
    ffn_mult: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ContractError(f"d and m must be positive, got d={self.d}, m={self.m}")
        if self.d % self.m:
            raise ShapeError('EncoderConfig', (self.d,), (self.m,), detail='d must be divisible by m')
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_width(self):
        return self.d // self.m


def _check_width(tokens, d, op):
    if tokens.dim() < 2 or tokens.shape[-1] != d:
        raise ShapeError(op, tokens.shape, (d,), detail='token width must equal d')


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``m`` heads with optional key masking"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.query = nn.Linear(cfg.d, cfg.d)
        self.key = nn.Linear(cfg.d, cfg.d)
        self.value = nn.Linear(cfg.d, cfg.d)
        self.out_proj = nn.Linear(cfg.d, cfg.d)
        self.dropout = nn.Dropout(cfg.dropout)

    def _split_heads(self, x):
        # (..., n, d) -> (..., m, n, d/m)
        return x.unflatten(-1, (self.cfg.m, self.cfg.head_width)).transpose(-3, -2)

    def forward(self, tokens, key_mask=None, need_weights=False):
        _check_width(tokens, self.cfg.d, 'multi_head_attention')
        n = tokens.shape[-2]
        q = self._split_heads(self.query(tokens))
        k = self._split_heads(self.key(tokens))
        v = self._split_heads(self.value(tokens))

        logits = forward_op('matmul', q, k.transpose(-2, -1)) / math.sqrt(self.cfg.head_width)
        if key_mask is not None:
            key_mask = torch.as_tensor(key_mask, dtype=torch.bool, device=tokens.device)
            if key_mask.shape[-1] != n:
                raise ShapeError('multi_head_attention', tokens.shape, key_mask.shape, detail='mask length must equal n')
            if key_mask.all(dim=-1).any():
                raise ContractError('multi_head_attention: every key is masked for some query')
            # (..., n) -> (..., 1, 1, n): same keys hidden for every head and query
            hidden = key_mask.unsqueeze(-2).unsqueeze(-2)
            logits = logits.masked_fill(hidden, float('-inf'))

        weights = torch.softmax(logits, dim=-1)
        mixed = forward_op('matmul', self.dropout(weights), v)
        merged = mixed.transpose(-3, -2).flatten(-2)
        output = self.out_proj(merged)
        if need_weights:
            return output, weights
        return output


class FeedForwardBlock(nn.Module):
    """Position-wise FFN followed by residual and layer norm"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        hidden = cfg.ffn_mult * cfg.d
        self.linear1 = nn.Linear(cfg.d, hidden)
        self.linear2 = nn.Linear(hidden, cfg.d)
        self.dropout = nn.Dropout(cfg.dropout)
        self.norm = nn.LayerNorm(cfg.d, eps=LAYERNORM_EPS)

    def forward(self, x):
        hidden = forward_op('gelu', self.linear1(x))
        return self.norm(x + self.dropout(self.linear2(hidden)))


class EncoderLayer(nn.Module):
    """Post-norm encoder layer: attention, residual, norm, then the feedforward block"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.attention = MultiHeadAttention(cfg)
        self.dropout = nn.Dropout(cfg.dropout)
        self.norm = nn.LayerNorm(cfg.d, eps=LAYERNORM_EPS)
        self.feedforward = FeedForwardBlock(cfg)

    def forward(self, tokens, key_mask=None):
        _check_width(tokens, self.cfg.d, 'encoder_layer')
        attended = self.attention(tokens, key_mask=key_mask)
        x = self.norm(tokens + self.dropout(attended))
        return self.feedforward(x)


class MaskedGlobalEncoderLayer(EncoderLayer):
    """
    Encoder layer whose row 0 carries a global token.

    Row 0 is hidden as a key for every query, itself included, so rows 1..n are
    exactly the encoding of those rows alone while row 0 becomes the
    attention-weighted combination of rows 1..n under its own query.
    """

    def forward(self, tokens, key_mask=None):
        _check_width(tokens, self.cfg.d, 'masked_global_encoder_layer')
        rows = tokens.shape[-2]
        if rows < 2:
            raise ContractError('masked_global_encoder_layer: needs at least one token besides the global row')
        mask = torch.zeros(rows, dtype=torch.bool, device=tokens.device)
        mask[0] = True
        return super().forward(tokens, key_mask=mask)


class PositionalEmbedding(nn.Module):
    """Learnable, zero-initialised offsets added to an ``n x d`` token matrix"""

    def __init__(self, n, d):
        super().__init__()
        if n < 1 or d < 1:
            raise ContractError(f"positional table needs n, d >= 1, got n={n}, d={d}")
        self.table = nn.Parameter(torch.zeros(n, d))

    def forward(self, tokens):
        if tuple(tokens.shape[-2:]) != tuple(self.table.shape):
            raise ShapeError('positional_embedding', tokens.shape, self.table.shape)
        return tokens + self.table
