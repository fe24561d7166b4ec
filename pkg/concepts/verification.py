"""
Property suites run by the verify command.

Each check is a function registered under one suite; it returns
``(passed, detail)``. Every check builds its own inputs from a fixed seed
and works in float64.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
from torch.func import functional_call

from . import pose
from .attention import EncoderConfig, EncoderLayer, MaskedGlobalEncoderLayer, MultiHeadAttention
from .autodiff import OPS, VERIFICATION_DTYPE, forward_op, grad_check
from .pmoc import (
    DirectProbabilityHead,
    GaussianHead,
    HeadConfig,
    apply_spectral_norm,
    gaussian_log_prob,
    GaussianParams,
    pmoc_loss,
    spectral_normalize,
)
from .transport import (
    PointCloud,
    SinkhornConfig,
    brute_force_ot,
    exact_ot_oracle,
    kl_divergence,
    sbsd_contrast,
    sbsd_loss,
    sinkhorn,
    sinkhorn_annealed,
)

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
SINKHORN_GRAD_TOLERANCE = 1e-3
EQUIVALENCE_TOLERANCE = 1e-6
GRAD_POINTS = 10
RELU_KINK_MARGIN = 1e-3

SUITES = OrderedDict((name, []) for name in ('grad', 'equivalence', 'sinkhorn', 'params', 'spectral', 'anchors'))


@dataclass
class PropertyResult:
    suite: str
    name: str
    passed: bool
    detail: str = ''

    def __str__(self):
        status = 'PASS' if self.passed else 'FAIL'
        return f"{status} {self.suite}.{self.name} {self.detail}".rstrip()


def check(suite):
    """Register a property function under ``suite``"""
    def register(fn):
        SUITES[suite].append(fn)
        return fn
    return register


def run_suite(name):
    """Run one suite, or every suite for ``all``; checks that raise count as failures"""
    names = list(SUITES) if name == 'all' else [name]
    results = []
    for suite in names:
        if suite not in SUITES:
            raise KeyError(f"Unknown suite: {suite}. Available: {list(SUITES) + ['all']}")
        for fn in SUITES[suite]:
            label = fn.__name__.removeprefix('check_')
            try:
                passed, detail = fn()
            except Exception as e:
                logger.exception(f"property {suite}.{label} raised")
                passed, detail = False, f"raised {type(e).__name__}: {e}"
            results.append(PropertyResult(suite, label, bool(passed), detail))
    return results


def _generator(seed):
    return torch.Generator().manual_seed(seed)


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=VERIFICATION_DTYPE)


def _positive(g, *shape):
    return torch.rand(*shape, generator=g, dtype=VERIFICATION_DTYPE) * 1.5 + 0.5


def _off_kink(g, *shape):
    x = _randn(g, *shape)
    return x + x.sign() * 10 * RELU_KINK_MARGIN


def _pooled(fn, weights):
    return lambda x: (fn(x) * weights).sum()


def _module(factory, seed):
    torch.manual_seed(seed)
    module = factory().to(VERIFICATION_DTYPE)
    module.eval()
    return module


def _worst_param_error(module, name, inputs, g):
    """grad_check against one named parameter, holding everything else fixed"""
    params = dict(module.named_parameters())
    point = params[name].detach().clone()
    weights = _randn(g, *module(*inputs).shape)

    def fn(value):
        return (functional_call(module, {name: value}, inputs) * weights).sum()

    return grad_check(fn, point)


_OP_CASES = {
    'matmul': (lambda g: (_randn(g, 3, 4), _randn(g, 4, 2)), {}),
    'add': (lambda g: (_randn(g, 3, 4), _randn(g, 4)), {}),
    'mul': (lambda g: (_randn(g, 3, 4), _randn(g, 3, 4)), {}),
    'sub': (lambda g: (_randn(g, 3, 4), _randn(g, 1, 4)), {}),
    'div': (lambda g: (_randn(g, 3, 4), _positive(g, 3, 4)), {}),
    'exp': (lambda g: (_randn(g, 3, 4),), {}),
    'log': (lambda g: (_positive(g, 3, 4),), {}),
    'relu': (lambda g: (_off_kink(g, 3, 4),), {}),
    'gelu': (lambda g: (_randn(g, 3, 4),), {}),
    'softmax-lastdim': (lambda g: (_randn(g, 3, 4),), {}),
    'layernorm-lastdim': (lambda g: (_randn(g, 3, 4),), {}),
    'conv2d': (lambda g: (_randn(g, 1, 2, 5, 5), _randn(g, 3, 2, 3, 3)), {'stride': 1, 'padding': 1}),
    'mean': (lambda g: (_randn(g, 3, 4),), {'dim': -1}),
    'sum': (lambda g: (_randn(g, 3, 4),), {'dim': 0}),
    'l2norm': (lambda g: (_randn(g, 3, 4),), {}),
    'concat': (lambda g: (_randn(g, 2, 3), _randn(g, 1, 3)), {'dim': 0}),
    'slice': (lambda g: (_randn(g, 4, 3),), {'dim': 0, 'start': 1, 'stop': 3}),
    'transpose': (lambda g: (_randn(g, 3, 4),), {}),
    'broadcast': (lambda g: (_randn(g, 1, 4),), {'shape': (3, 4)}),
}


@check('grad')
def check_forward_ops():
    worst = 0.0
    worst_kind = None
    for kind in OPS:
        build, params = _OP_CASES[kind]
        for point in range(GRAD_POINTS):
            g = _generator(1000 + point)
            inputs = build(g)
            weights = _randn(g, *forward_op(kind, *inputs, **params).shape)
            for position in range(len(inputs)):
                def fn(x, position=position):
                    args = list(inputs)
                    args[position] = x
                    return (forward_op(kind, *args, **params) * weights).sum()
                error = grad_check(fn, inputs[position])
                if error > worst:
                    worst, worst_kind = error, kind
    return worst < GRAD_TOLERANCE, f"{len(OPS)} ops x {GRAD_POINTS} points, max rel err {worst:.2e} ({worst_kind})"


@check('grad')
def check_fan_out_accumulation():
    g = _generator(7)
    point = _randn(g, 5)

    def f(x):
        return torch.sin(x).sum()

    def h(x):
        return (3.0 * x).sum()

    separate = []
    for fn in (f, h):
        x = point.clone().requires_grad_(True)
        fn(x).backward()
        separate.append(x.grad)
    x = point.clone().requires_grad_(True)
    (f(x) + h(x)).backward()
    exact = torch.equal(x.grad, separate[0] + separate[1])
    return exact, 'grad(f + g) == grad f + grad g' if exact else 'fan-out gradients do not add exactly'


def _small_cfg():
    return EncoderConfig(d=8, m=2)


@check('grad')
def check_encoder_layers():
    g = _generator(11)
    errors = {}
    layer = _module(lambda: EncoderLayer(_small_cfg()), 11)
    tokens = _randn(g, 3, 8)
    errors['encoder_layer'] = grad_check(_pooled(layer, _randn(g, 3, 8)), tokens)
    masked = _module(lambda: MaskedGlobalEncoderLayer(_small_cfg()), 12)
    rows = _randn(g, 4, 8)
    errors['masked_global_encoder_layer'] = grad_check(_pooled(masked, _randn(g, 4, 8)), rows)
    worst = max(errors.values())
    return worst < GRAD_TOLERANCE, ', '.join(f"{k} {v:.2e}" for k, v in errors.items())


@check('grad')
def check_pose_blocks():
    g = _generator(13)
    errors = {}
    cfg = _small_cfg()
    full = _module(lambda: pose.PoseEmbedding(3, cfg), 13)
    tokens = _randn(g, 3, 8)
    errors['pose_embed_full/V'] = grad_check(_pooled(full, _randn(g, 3, 8)), tokens)
    errors['pose_embed_full/W'] = _worst_param_error(full, 'bank', (tokens,), g)
    straw = _module(lambda: pose.StrawPoseEmbedding(3, cfg), 14)
    rows = _randn(g, 4, 8)
    errors['pose_embed_straw/V'] = grad_check(_pooled(straw, _randn(g, 3, 8)), rows)
    errors['pose_embed_straw/W'] = _worst_param_error(straw, 'bank', (rows,), g)
    stack = _module(lambda: pose.StrawPoseTransformer(pose.PoseStackConfig(N=2, n=3, cfg=cfg, variant='straw')), 15)
    errors['straw_stack/V0'] = _worst_param_error(stack, 'global_token', (tokens,), g)
    squash_point = _randn(g, 6)
    errors['squash'] = grad_check(lambda v: torch.linalg.vector_norm(pose.squash(v)), squash_point)
    worst = max(errors.values())
    return worst < GRAD_TOLERANCE, ', '.join(f"{k} {v:.2e}" for k, v in errors.items())


@check('grad')
def check_sinkhorn_gradient():
    g = _generator(17)
    cfg = SinkhornConfig(epsilon=0.1, max_iters=300, tol=1e-13)
    b = PointCloud(_randn(g, 4, 2))
    point = _randn(g, 3, 2)
    error = grad_check(lambda x: sinkhorn(PointCloud(x), b, cfg).distance, point)
    return error < SINKHORN_GRAD_TOLERANCE, f"max rel err {error:.2e} at epsilon {cfg.epsilon}"


@check('grad')
def check_pmoc_heads():
    g = _generator(19)
    head_cfg = HeadConfig(N=2, d=8, m=2)
    errors = {}
    gaussian = _module(lambda: GaussianHead(head_cfg), 19)
    primary = _randn(g, 6, 8)
    weights = _randn(g, 8)
    errors['gaussian_head/mu'] = grad_check(lambda z: (gaussian(z).mu * weights).sum(), primary)
    direct = _module(lambda: DirectProbabilityHead(head_cfg), 20)
    candidate = _randn(g, 8)
    errors['direct_prob_head/primary'] = grad_check(lambda z: direct(z, candidate), primary)
    errors['direct_prob_head/candidate'] = grad_check(lambda c: direct(primary, c), candidate)
    worst = max(errors.values())
    return worst < GRAD_TOLERANCE, ', '.join(f"{k} {v:.2e}" for k, v in errors.items())


@check('equivalence')
def check_mask_equivalence():
    g = _generator(23)
    worst = 0.0
    for trial in range(100):
        n = 2 + trial % 13
        d = 16 if trial % 2 else 64
        cfg = EncoderConfig(d=d, m=4)
        masked = _module(lambda: MaskedGlobalEncoderLayer(cfg), 2300 + trial)
        plain = _module(lambda: EncoderLayer(cfg), 0)
        plain.load_state_dict(masked.state_dict())
        rows = _randn(g, n + 1, d)
        with torch.no_grad():
            diff = (masked(rows)[1:] - plain(rows[1:])).abs().max().item()
        worst = max(worst, diff)
    return worst < EQUIVALENCE_TOLERANCE, f"100 trials, max abs diff {worst:.2e}"


@check('equivalence')
def check_single_layer_collapse():
    g = _generator(29)
    cfg = EncoderConfig(d=16, m=4)
    tokens = _randn(g, 7, 16)
    diffs = {}
    for variant in (pose.StackVariant.POSE, pose.StackVariant.STRAW):
        stack = _module(lambda: pose.build_stack(pose.PoseStackConfig(N=1, n=7, cfg=cfg, variant=variant)), 29)
        vanilla = _module(lambda: pose.VanillaStack(pose.PoseStackConfig(N=1, n=7, cfg=cfg)), 0)
        vanilla.layers[0].load_state_dict(stack.terminal.state_dict())
        with torch.no_grad():
            diffs[variant.value] = (stack(tokens) - vanilla(tokens)).abs().max().item()
    worst = max(diffs.values())
    return worst < EQUIVALENCE_TOLERANCE, ', '.join(f"{k} {v:.2e}" for k, v in diffs.items())


@check('equivalence')
def check_squash_closed_form():
    g = _generator(31)
    v = _randn(g, 20, 5) * 3
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    expected = (norm ** 2 / (1 + norm ** 2)) * v / norm
    error = (pose.squash(v) - expected).abs().max().item()
    unit = pose.squash(torch.tensor([0.6, 0.8], dtype=VERIFICATION_DTYPE))
    scaled = pose.squash(torch.tensor([3.0, 0.0], dtype=VERIFICATION_DTYPE))
    zero = pose.squash(torch.zeros(4, dtype=VERIFICATION_DTYPE))
    anchors_ok = (
        abs(torch.linalg.vector_norm(unit).item() - 0.5) < 1e-9
        and abs(torch.linalg.vector_norm(scaled).item() - 0.9) < 1e-9
        and bool((zero == 0).all())
    )
    return error < 1e-12 and anchors_ok, f"max abs diff {error:.2e}, anchors {'ok' if anchors_ok else 'broken'}"


@check('equivalence')
def check_straw_factorization():
    """A full bank W_ijk = w_i * W~_jk acts like the straw bank on the pooled token sum_i w_i V_i"""
    g = _generator(37)
    n, cfg = 5, EncoderConfig(d=16, m=4)
    tokens = _randn(g, n, cfg.d)
    w = _randn(g, n)
    straw = _module(lambda: pose.StrawPoseEmbedding(n, cfg), 37)
    full = _module(lambda: pose.PoseEmbedding(n, cfg), 0)
    with torch.no_grad():
        full.bank.copy_(w.view(n, 1, 1, 1, 1) * straw.bank.unsqueeze(0))
        pooled = (w.unsqueeze(-1) * tokens).sum(dim=0, keepdim=True)
        diff = (full(tokens) - straw(torch.cat([pooled, tokens], dim=0))).abs().max().item()
    return diff < 1e-10, f"max abs diff {diff:.2e}"


@check('equivalence')
def check_residual_floor():
    g = _generator(41)
    cfg = EncoderConfig(d=16, m=4)
    full = _module(lambda: pose.PoseEmbedding(4, cfg), 41)
    straw = _module(lambda: pose.StrawPoseEmbedding(4, cfg), 42)
    tokens = _randn(g, 5, 16)
    with torch.no_grad():
        full.bank.zero_()
        straw.bank.zero_()
        identical = torch.equal(full(tokens[1:]), tokens[1:]) and torch.equal(straw(tokens), tokens[1:])
    return identical, 'zero banks leave token rows unchanged' if identical else 'zero banks changed token rows'


@check('equivalence')
def check_permutation_equivariance():
    g = _generator(43)
    cfg = EncoderConfig(d=16, m=4)
    stack = _module(lambda: pose.VanillaStack(pose.PoseStackConfig(N=2, n=6, cfg=cfg)), 43)
    tokens = _randn(g, 6, 16)
    perm = torch.randperm(6, generator=g)
    with torch.no_grad():
        diff = (stack(tokens)[perm] - stack(tokens[perm])).abs().max().item()
    return diff < EQUIVALENCE_TOLERANCE, f"max abs diff {diff:.2e}"


@check('equivalence')
def check_head_permutation_invariance():
    g = _generator(47)
    head_cfg = HeadConfig(N=2, d=16, m=4)
    gaussian = _module(lambda: GaussianHead(head_cfg), 47)
    direct = _module(lambda: DirectProbabilityHead(head_cfg), 48)
    primary = _randn(g, 6, 16)
    candidate = _randn(g, 16)
    perm = torch.randperm(6, generator=g)
    with torch.no_grad():
        a, b = gaussian(primary), gaussian(primary[perm])
        gaussian_diff = max((a.mu - b.mu).abs().max().item(), (a.log_var - b.log_var).abs().max().item())
        direct_diff = (direct(primary, candidate) - direct(primary[perm], candidate)).abs().item()
    worst = max(gaussian_diff, direct_diff)
    return worst < EQUIVALENCE_TOLERANCE, f"gaussian {gaussian_diff:.2e}, direct {direct_diff:.2e}"


@check('equivalence')
def check_attention_rows():
    g = _generator(53)
    attention = _module(lambda: MultiHeadAttention(EncoderConfig(d=16, m=4)), 53)
    tokens = _randn(g, 6, 16)
    mask = torch.tensor([True, False, False, True, False, False])
    with torch.no_grad():
        _, weights = attention(tokens, key_mask=mask, need_weights=True)
    sums = (weights.sum(dim=-1) - 1).abs().max().item()
    hidden = weights[..., mask].abs().max().item()
    ok = sums < EQUIVALENCE_TOLERANCE and hidden == 0.0 and bool((weights >= 0).all())
    return ok, f"row-sum err {sums:.2e}, mass on hidden keys {hidden:.1e}"


def _cloud(g, k, d=3, scale=1.0):
    return PointCloud(_randn(g, k, d) * scale)


@check('sinkhorn')
def check_oracle_fidelity():
    g = _generator(59)
    cfg = SinkhornConfig(epsilon=1e-3, max_iters=5000, tol=1e-6)
    worst = 0.0
    for k in range(1, 7):
        a, b = _cloud(g, k), _cloud(g, k)
        exact = exact_ot_oracle(a, b)
        value = sinkhorn_annealed(a, b, cfg).distance.item()
        worst = max(worst, abs(value - exact) / max(exact, 1e-12))
    return worst < 0.01, f"k=1..6, max rel gap to assignment oracle {worst:.2e}"


@check('sinkhorn')
def check_oracle_agreement():
    g = _generator(61)
    a, b = _cloud(g, 6), _cloud(g, 6)
    hungarian, brute = exact_ot_oracle(a, b), brute_force_ot(a, b)
    return abs(hungarian - brute) < 1e-12, f"hungarian {hungarian:.6f}, exhaustive {brute:.6f}"


@check('sinkhorn')
def check_symmetry_and_marginals():
    g = _generator(67)
    cfg = SinkhornConfig(epsilon=0.05, max_iters=10000, tol=1e-9)
    a, b = _cloud(g, 4, scale=0.5), _cloud(g, 6, scale=0.5)
    forward, backward = sinkhorn(a, b, cfg), sinkhorn(b, a, cfg)
    asym = abs(forward.distance.item() - backward.distance.item())
    ok = forward.converged and backward.converged and asym < 1e-6 and forward.marginal_error < cfg.tol
    return ok, f"|D(a,b)-D(b,a)| {asym:.2e}, marginal err {forward.marginal_error:.1e}"


@check('sinkhorn')
def check_epsilon_monotonicity():
    g = _generator(71)
    a, b = _cloud(g, 5, scale=0.5), _cloud(g, 5, scale=0.5)
    exact = exact_ot_oracle(a, b)
    values = [
        sinkhorn_annealed(a, b, SinkhornConfig(epsilon=eps, max_iters=5000, tol=1e-9)).distance.item()
        for eps in (0.5, 0.2, 0.1, 0.05, 0.02, 0.01)
    ]
    gaps = [v - exact for v in values]
    monotone = all(later <= earlier + 1e-6 for earlier, later in zip(gaps, gaps[1:])) and gaps[-1] >= -1e-6
    return monotone, 'gaps ' + ', '.join(f"{gap:.2e}" for gap in gaps)


@check('sinkhorn')
def check_singletons():
    g = _generator(73)
    u, v = _randn(g, 1, 3), _randn(g, 1, 3)
    expected = ((u - v) ** 2).sum().item()
    errors = [abs(sinkhorn(PointCloud(u), PointCloud(v), SinkhornConfig(epsilon=eps)).distance.item() - expected)
              for eps in (1e-3, 0.05, 1.0)]
    return max(errors) < 1e-10, f"max abs diff {max(errors):.1e}"


def _mapping_counts(n, m, d):
    cfg = EncoderConfig(d=d, m=m)
    full = pose.param_count(pose.PoseStackConfig(N=2, n=n, cfg=cfg, variant='pose'))
    straw = pose.param_count(pose.PoseStackConfig(N=2, n=n, cfg=cfg, variant='straw'))
    return full['mapping_params_per_block'], straw['mapping_params_per_block']


@check('params')
def check_mapping_param_counts():
    full, straw = _mapping_counts(7, 4, 64)
    ok = full == 7 * 7 * 64 * 64 and straw == 7 * 64 * 64 and full == 7 * straw
    return ok, f"full={full}, straw={straw}, ratio={full // straw if straw else 'n/a'}"


@check('params')
def check_mapping_ratio_grid():
    mismatches = []
    for n, m, d in ((2, 1, 8), (3, 2, 8), (5, 4, 16), (6, 8, 32), (7, 2, 12)):
        full, straw = _mapping_counts(n, m, d)
        if full != n * n * d * d or straw != n * d * d or full != n * straw:
            mismatches.append((n, m, d))
    return not mismatches, f"mismatches {mismatches}" if mismatches else 'ratio exactly n on 5 configs'


@check('params')
def check_vanilla_has_no_mapping():
    counts = pose.param_count(pose.PoseStackConfig(N=2, n=7, cfg=EncoderConfig(d=64, m=4)))
    return counts['mapping_params'] == 0, f"vanilla mapping params {counts['mapping_params']}"


@check('spectral')
def check_power_iteration_vs_svd():
    g = _generator(79)
    worst = 0.0
    for _ in range(20):
        weight = _randn(g, 32, 32)
        u = torch.nn.functional.normalize(_randn(g, 32), dim=0)
        normalised, _, _ = spectral_normalize(weight, u, iterations=50)
        sigma = torch.linalg.svdvals(normalised)[0].item()
        worst = max(worst, abs(sigma - 1.0))
    return worst < 0.01, f"20 matrices, max |sigma_max - 1| {worst:.2e}"


@check('spectral')
def check_spectral_edge_cases():
    g = _generator(83)
    u = torch.nn.functional.normalize(_randn(g, 4), dim=0)
    eye = torch.eye(4, dtype=VERIFICATION_DTYPE)
    identity_out, _, _ = spectral_normalize(eye, u, iterations=5)
    weight = _randn(g, 4, 4)
    plain, _, _ = spectral_normalize(weight, u, iterations=30)
    scaled, _, _ = spectral_normalize(7.5 * weight, u, iterations=30)
    zero, _, _ = spectral_normalize(torch.zeros(4, 4, dtype=VERIFICATION_DTYPE), u, iterations=5)
    ok = (
        (identity_out - eye).abs().max().item() < 1e-12
        and (plain - scaled).abs().max().item() < 1e-10
        and bool((zero == 0).all())
    )
    return ok, 'identity, scale invariance and zero guard'


@check('spectral')
def check_readout_lipschitz():
    """|p(z1) - p(z2)| <= prod(sigma_max) * |z1 - z2| * 1.05 for the spectrally normalised readout"""
    g = _generator(89)
    torch.manual_seed(89)
    readout = torch.nn.Sequential(
        torch.nn.Linear(16, 16), torch.nn.GELU(approximate='tanh'), torch.nn.Linear(16, 1)
    ).to(VERIFICATION_DTYPE)
    apply_spectral_norm(readout)
    readout.eval()
    with torch.no_grad():
        bound = 1.0
        for layer in (readout[0], readout[2]):
            bound *= torch.linalg.matrix_norm(layer.weight, ord=2).item()
        worst = 0.0
        for _ in range(200):
            z1, z2 = _randn(g, 16) * 2, _randn(g, 16) * 2
            change = (torch.sigmoid(readout(z1)) - torch.sigmoid(readout(z2))).abs().item()
            worst = max(worst, change / torch.linalg.vector_norm(z1 - z2).item())
    return worst <= bound * 1.05, f"max ratio {worst:.3f}, bound {bound * 1.05:.3f}"


@check('anchors')
def check_closed_form_anchors():
    details = {}
    equal = torch.tensor(0.37, dtype=VERIFICATION_DTYPE)
    details['sbsd_symmetric'] = abs(sbsd_contrast(equal, equal).item() - math.log(2))
    same = PointCloud(torch.ones(7, 3, dtype=VERIFICATION_DTYPE))
    details['sbsd_coincident'] = abs(sbsd_loss(same, same, split_seed=5).item() - math.log(2))
    details['pmoc_uniform'] = abs(pmoc_loss(torch.full((8,), 0.3, dtype=VERIFICATION_DTYPE)).item() - math.log(8))
    d = 5
    mu = torch.linspace(-1, 1, d, dtype=VERIFICATION_DTYPE)
    log_prob = gaussian_log_prob(mu, GaussianParams(mu=mu, log_var=torch.zeros(d, dtype=VERIFICATION_DTYPE)))
    details['gaussian_at_mean'] = abs(log_prob.item() + 0.5 * d * math.log(2 * math.pi))
    unit = pose.squash(torch.tensor([0.0, 1.0, 0.0], dtype=VERIFICATION_DTYPE))
    details['squash_unit'] = abs(torch.linalg.vector_norm(unit).item() - 0.5)
    p = torch.tensor([1.0, 0.0], dtype=VERIFICATION_DTYPE)
    details['kl_half'] = abs(kl_divergence(p, torch.tensor([0.5, 0.5], dtype=VERIFICATION_DTYPE)).item() - math.log(2))
    limits = {'gaussian_at_mean': 1e-10}
    failed = [k for k, v in details.items() if v > limits.get(k, 1e-9)]
    return not failed, f"failed {failed}" if failed else f"{len(details)} anchors within tolerance"
