"""
Unit tests for the differentiable-tensor surface
"""
import torch
from django.test import SimpleTestCase

from concepts.autodiff import (
    OPS,
    VERIFICATION_DTYPE,
    backward,
    build_optimizer,
    forward_op,
    grad_check,
)
from concepts.exceptions import ContractError, DomainError, ShapeError, StateError


class ForwardOpTest(SimpleTestCase):
    """Test cases for forward_op shape and domain rules"""

    def setUp(self):
        """Set up test data"""
        self.g = torch.Generator().manual_seed(0)

    def randn(self, *shape):
        return torch.randn(*shape, generator=self.g, dtype=VERIFICATION_DTYPE)

    def test_every_op_is_registered(self):
        """Test that the op table covers every supported kind"""
        expected = {
            'matmul', 'add', 'mul', 'sub', 'div', 'exp', 'log', 'relu', 'gelu',
            'softmax-lastdim', 'layernorm-lastdim', 'conv2d', 'mean', 'sum',
            'l2norm', 'concat', 'slice', 'transpose', 'broadcast',
        }
        self.assertEqual(set(OPS), expected)

    def test_unknown_op(self):
        """Test that an unknown kind raises ContractError naming the options"""
        with self.assertRaises(ContractError) as ctx:
            forward_op('tanh', self.randn(2))
        self.assertIn('Available', str(ctx.exception))

    def test_matmul_shape_mismatch(self):
        """Test that matmul with mismatched inner dims raises ShapeError"""
        with self.assertRaises(ShapeError):
            forward_op('matmul', self.randn(2, 3), self.randn(4, 5))

    def test_matmul_batched(self):
        """Test matmul over leading batch dims"""
        out = forward_op('matmul', self.randn(5, 2, 3), self.randn(5, 3, 4))
        self.assertEqual(tuple(out.shape), (5, 2, 4))

    def test_add_broadcast_failure(self):
        """Test that non-broadcastable operands raise ShapeError"""
        with self.assertRaises(ShapeError):
            forward_op('add', self.randn(2, 3), self.randn(4))

    def test_log_domain(self):
        """Test that log of a non-positive value raises DomainError"""
        with self.assertRaises(DomainError):
            forward_op('log', torch.tensor([1.0, 0.0], dtype=VERIFICATION_DTYPE))

    def test_div_by_zero(self):
        """Test that dividing by zero raises DomainError"""
        with self.assertRaises(DomainError):
            forward_op('div', self.randn(3), torch.zeros(3, dtype=VERIFICATION_DTYPE))

    def test_softmax_rows_sum_to_one(self):
        """Test that softmax-lastdim rows sum to one"""
        out = forward_op('softmax-lastdim', self.randn(4, 6))
        torch.testing.assert_close(out.sum(-1), torch.ones(4, dtype=VERIFICATION_DTYPE))

    def test_softmax_rejects_nan(self):
        """Test that softmax on NaN input raises DomainError"""
        with self.assertRaises(DomainError):
            forward_op('softmax-lastdim', torch.tensor([0.0, float('nan')], dtype=VERIFICATION_DTYPE))

    def test_layernorm_statistics(self):
        """Test that layernorm output has zero mean and unit variance per row"""
        out = forward_op('layernorm-lastdim', self.randn(3, 16) * 5 + 2)
        torch.testing.assert_close(out.mean(-1), torch.zeros(3, dtype=VERIFICATION_DTYPE), atol=1e-10, rtol=0)
        torch.testing.assert_close(out.var(-1, unbiased=False), torch.ones(3, dtype=VERIFICATION_DTYPE), atol=1e-3, rtol=0)

    def test_conv2d_channel_mismatch(self):
        """Test that conv2d checks input channels against the kernel"""
        with self.assertRaises(ShapeError):
            forward_op('conv2d', self.randn(1, 2, 8, 8), self.randn(4, 3, 3, 3))

    def test_slice_out_of_range(self):
        """Test that slicing past the end raises ShapeError"""
        with self.assertRaises(ShapeError):
            forward_op('slice', self.randn(4, 3), dim=0, start=2, stop=6)

    def test_reduce_dim_out_of_range(self):
        """Test that reductions validate their dim"""
        with self.assertRaises(ShapeError):
            forward_op('sum', self.randn(2, 3), dim=2)

    def test_concat_mismatch(self):
        """Test that concat requires equal off-axis dims"""
        with self.assertRaises(ShapeError):
            forward_op('concat', self.randn(2, 3), self.randn(2, 4), dim=0)


class BackwardTest(SimpleTestCase):
    """Test cases for backward and gradient accumulation"""

    def test_backward_without_forward(self):
        """Test that backward on a plain tensor raises StateError"""
        with self.assertRaises(StateError):
            backward(torch.ones(2), [torch.ones(2)])

    def test_seed_shape_must_match(self):
        """Test that a mismatched seed raises ShapeError"""
        x = torch.ones(3, dtype=VERIFICATION_DTYPE, requires_grad=True)
        with self.assertRaises(ShapeError):
            backward(x * 2, [x], seed=torch.ones(2, dtype=VERIFICATION_DTYPE))

    def test_fan_out_accumulates(self):
        """Test that a tensor used twice receives the sum of both contributions"""
        x = torch.tensor([0.3, -1.2], dtype=VERIFICATION_DTYPE, requires_grad=True)
        y = forward_op('add', forward_op('mul', x, x), forward_op('mul', x, torch.full_like(x, 3.0)))
        (grad,) = backward(y, [x])
        torch.testing.assert_close(grad, 2 * x.detach() + 3)

    def test_repeated_backward_accumulates(self):
        """Test that two backward passes add into .grad"""
        x = torch.tensor([1.0, 2.0], dtype=VERIFICATION_DTYPE, requires_grad=True)
        backward(forward_op('sum', x * 2), [x])
        (grad,) = backward(forward_op('sum', x * 2), [x])
        torch.testing.assert_close(grad, torch.full_like(x, 4.0))


class GradCheckTest(SimpleTestCase):
    """Test cases for the finite-difference harness"""

    def test_smooth_function_passes(self):
        """Test that a smooth composite has tiny relative error"""
        point = torch.tensor([[0.4, -0.7], [1.1, 0.2]], dtype=VERIFICATION_DTYPE)
        error = grad_check(lambda x: forward_op('sum', forward_op('exp', x) * x), point)
        self.assertLess(error, 1e-6)

    def test_requires_float64(self):
        """Test that grad_check refuses float32 points"""
        with self.assertRaises(ContractError):
            grad_check(lambda x: x.sum(), torch.ones(3))

    def test_requires_scalar(self):
        """Test that grad_check refuses non-scalar functions"""
        with self.assertRaises(ContractError):
            grad_check(lambda x: x * 2, torch.ones(3, dtype=VERIFICATION_DTYPE))

    def test_detects_wrong_gradient(self):
        """Test that a function with a detached branch shows a large error"""
        def broken(x):
            return (x * x.detach()).sum()
        point = torch.tensor([1.0, 2.0], dtype=VERIFICATION_DTYPE)
        self.assertGreater(grad_check(broken, point), 0.4)


class OptimizerTest(SimpleTestCase):
    """Test cases for the optimizer sub-surface"""

    def test_defaults(self):
        """Test default step size, weight decay and decay"""
        param = torch.nn.Parameter(torch.zeros(2))
        optimizer, scheduler = build_optimizer([param])
        group = optimizer.param_groups[0]
        self.assertAlmostEqual(group['lr'], 1e-3)
        self.assertAlmostEqual(group['weight_decay'], 1e-4)
        self.assertAlmostEqual(scheduler.gamma, 0.995)

    def test_rejects_non_positive_step(self):
        """Test that a zero step size raises ContractError"""
        with self.assertRaises(ContractError):
            build_optimizer([torch.nn.Parameter(torch.zeros(2))], step_size=0.0)

    def test_decay_per_epoch(self):
        """Test that the step size decays once per scheduler step"""
        param = torch.nn.Parameter(torch.zeros(2))
        optimizer, scheduler = build_optimizer([param], step_size=0.1, decay=0.5)
        optimizer.step()
        scheduler.step()
        self.assertAlmostEqual(scheduler.get_last_lr()[0], 0.05)
