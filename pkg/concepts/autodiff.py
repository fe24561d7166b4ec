"""
Differentiable-tensor surface used by the rest of the app.

Tensors are ``torch.Tensor`` and the recorded graph is torch's autograd graph.
This module pins the operation contracts the other modules rely on: a checked
``forward_op`` dispatcher, ``backward`` with explicit seeds, the finite
difference ``grad_check`` harness and the optimizer sub-surface.
"""
import logging
import math
from typing import Callable, Dict, Sequence

import torch
import torch.nn.functional as F

from .exceptions import ContractError, DomainError, ShapeError, StateError

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5

TRAINING_DTYPE = torch.float32
VERIFICATION_DTYPE = torch.float64


def _broadcast_shape(kind, a, b):
    try:
        return torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(kind, a.shape, b.shape) from None


def _require_finite(kind, tensor):
    if not torch.isfinite(tensor).all():
        raise DomainError(f"{kind}: input contains non-finite values")


def _binary(kind, fn):
    def apply(a, b):
        _broadcast_shape(kind, a, b)
        return fn(a, b)
    return apply


def _matmul(a, b):
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError('matmul', a.shape, b.shape, detail='operands must be at least 1-d')
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if inner_a != inner_b:
        raise ShapeError('matmul', a.shape, b.shape)
    if a.dim() > 2 and b.dim() > 2:
        try:
            torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except RuntimeError:
            raise ShapeError('matmul', a.shape, b.shape, detail='batch dims') from None
    return torch.matmul(a, b)


def _div(a, b):
    _broadcast_shape('div', a, b)
    if (b == 0).any():
        raise DomainError('div: divisor contains zeros')
    return a / b


def _log(a):
    _require_finite('log', a)
    if (a <= 0).any():
        raise DomainError('log: input must be strictly positive')
    return torch.log(a)


def _softmax(a):
    _require_finite('softmax-lastdim', a)
    return torch.softmax(a, dim=-1)


def _layernorm(a, weight=None, bias=None, eps=LAYERNORM_EPS):
    if eps <= 0:
        raise DomainError('layernorm-lastdim: epsilon must be positive')
    width = a.shape[-1]
    for param in (weight, bias):
        if param is not None and tuple(param.shape) != (width,):
            raise ShapeError('layernorm-lastdim', a.shape, param.shape)
    return F.layer_norm(a, (width,), weight, bias, eps)


def _conv2d(image, kernel, bias=None, stride=1, padding=0):
    if image.dim() not in (3, 4) or kernel.dim() != 4:
        raise ShapeError('conv2d', image.shape, kernel.shape, detail='expected (B,)C,H,W and O,C,kh,kw')
    if image.shape[-3] != kernel.shape[1]:
        raise ShapeError('conv2d', image.shape, kernel.shape, detail='channel mismatch')
    height, width = image.shape[-2] + 2 * padding, image.shape[-1] + 2 * padding
    if height < kernel.shape[2] or width < kernel.shape[3]:
        raise ShapeError('conv2d', image.shape, kernel.shape, detail='kernel larger than padded input')
    return F.conv2d(image, kernel, bias, stride=stride, padding=padding)


def _reduce(kind, fn):
    def apply(a, dim=None, keepdim=False):
        if dim is None:
            return fn(a)
        if not -a.dim() <= dim < max(a.dim(), 1):
            raise ShapeError(kind, a.shape, detail=f'dim {dim} out of range')
        return fn(a, dim=dim, keepdim=keepdim)
    return apply


def _l2norm(a, dim=-1, keepdim=False):
    return torch.linalg.vector_norm(a, dim=dim, keepdim=keepdim)


def _concat(*tensors, dim=0):
    if not tensors:
        raise ContractError('concat: needs at least one input')
    reference = tensors[0]
    for other in tensors[1:]:
        if other.dim() != reference.dim():
            raise ShapeError('concat', reference.shape, other.shape)
        for axis in range(reference.dim()):
            if axis != dim % reference.dim() and other.shape[axis] != reference.shape[axis]:
                raise ShapeError('concat', reference.shape, other.shape)
    return torch.cat(tensors, dim=dim)


def _slice(a, dim=0, start=0, stop=None):
    stop = a.shape[dim] if stop is None else stop
    if not 0 <= start <= stop <= a.shape[dim]:
        raise ShapeError('slice', a.shape, detail=f'[{start}:{stop}] along dim {dim}')
    return a.narrow(dim, start, stop - start)


def _transpose(a, dim0=-2, dim1=-1):
    if a.dim() < 2:
        raise ShapeError('transpose', a.shape, detail='needs at least 2 dims')
    return a.transpose(dim0, dim1)


def _broadcast(a, shape=()):
    try:
        torch.broadcast_shapes(a.shape, tuple(shape))
    except RuntimeError:
        raise ShapeError('broadcast', a.shape, shape) from None
    return a.expand(*shape)


OPS: Dict[str, Callable[..., torch.Tensor]] = {
    'matmul': _matmul,
    'add': _binary('add', torch.add),
    'mul': _binary('mul', torch.mul),
    'sub': _binary('sub', torch.sub),
    'div': _div,
    'exp': torch.exp,
    'log': _log,
    'relu': torch.relu,
    'gelu': lambda a: F.gelu(a, approximate='tanh'),
    'softmax-lastdim': _softmax,
    'layernorm-lastdim': _layernorm,
    'conv2d': _conv2d,
    'mean': _reduce('mean', torch.mean),
    'sum': _reduce('sum', torch.sum),
    'l2norm': _l2norm,
    'concat': _concat,
    'slice': _slice,
    'transpose': _transpose,
    'broadcast': _broadcast,
}


def forward_op(kind: str, *inputs: torch.Tensor, **params) -> torch.Tensor:
    """
    Apply a named operation after checking its shape and domain rules.

    Args:
        kind: one of ``OPS``
        inputs: operand tensors
        params: op-specific keywords (``dim``, ``stride``, ``padding`` ...)

    Returns:
        torch.Tensor: the result; autograd records it when any input tracks gradients
    """
    try:
        op = OPS[kind]
    except KeyError:
        raise ContractError(f"Unknown op: {kind}. Available: {sorted(OPS)}") from None
    return op(*inputs, **params)


def backward(output: torch.Tensor, inputs: Sequence[torch.Tensor], seed: torch.Tensor = None):
    """
    Propagate ``seed`` back from ``output`` and accumulate into each input's ``.grad``.

    Returns the accumulated gradient for every input, in order. Gradients add
    across fan-out and across repeated calls, as torch accumulates them.
    """
    if output.grad_fn is None and not output.requires_grad:
        raise StateError('backward called on a tensor with no recorded forward graph')
    if seed is None:
        seed = torch.ones_like(output)
    if tuple(seed.shape) != tuple(output.shape):
        raise ShapeError('backward', output.shape, seed.shape, detail='seed must match output')
    output.backward(seed, inputs=list(inputs))
    return [tensor.grad for tensor in inputs]


def numeric_gradient(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, eps: float = 1e-5):
    """Central-difference gradient of a scalar function at ``point``"""
    base = point.detach().clone()
    flat = base.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for index in range(flat.numel()):
            original = flat[index].item()
            flat[index] = original + eps
            plus = fn(base).item()
            flat[index] = original - eps
            minus = fn(base).item()
            flat[index] = original
            grad[index] = (plus - minus) / (2 * eps)
    return grad.view_as(point)


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, eps: float = 1e-5) -> float:
    """
    Compare autograd against central differences at ``point``.

    Returns:
        float: max over coordinates of |analytic - numeric| / max(1e-8, |numeric|)
    """
    if point.dtype != VERIFICATION_DTYPE:
        raise ContractError(f"grad_check needs float64 points, got {point.dtype}")
    tracked = point.detach().clone().requires_grad_(True)
    value = fn(tracked)
    if value.numel() != 1:
        raise ContractError(f"grad_check needs a scalar function, got output shape {list(value.shape)}")
    (analytic,) = torch.autograd.grad(value.reshape(()), tracked, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(tracked)
    numeric = numeric_gradient(fn, point, eps)
    error = (analytic.detach() - numeric).abs() / numeric.abs().clamp(min=1e-8)
    worst = error.max().item() if error.numel() else 0.0
    logger.debug(f"grad_check over {point.numel()} coordinates: max relative error {worst:.3e}")
    return worst


def build_optimizer(parameters, step_size=1e-3, weight_decay=1e-4, decay=0.995):
    """
    Adaptive-moment optimizer with a per-epoch exponential step decay.

    Returns:
        tuple: (torch.optim.Adam, torch.optim.lr_scheduler.ExponentialLR)
    """
    if not math.isfinite(step_size) or step_size <= 0:
        raise ContractError(f"step size must be positive, got {step_size}")
    optimizer = torch.optim.Adam(parameters, lr=step_size, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=decay)
    return optimizer, scheduler
