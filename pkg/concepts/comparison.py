"""
Side-by-side cost of the vanilla, pose and straw-pose attention stacks.

Each variant is timed on one random batch (forward plus backward, averaged
over a few steps). Peak resident memory is read from ``getrusage`` inside a
freshly spawned interpreter per variant, so one variant's peak never masks
another's.
"""
import csv
import logging
import multiprocessing
import resource
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import torch

from .attention import EncoderConfig
from .exceptions import ContractError
from .pose import PoseStackConfig, StackVariant, build_stack, param_count

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    'variant', 'n', 'd', 'm', 'N', 'batch',
    'mapping_params_per_block', 'mapping_params', 'total_params',
    'step_seconds', 'peak_rss_mb',
]


@dataclass(frozen=True)
class ComparisonConfig:
    variant: str
    n: int = 7
    d: int = 64
    m: int = 4
    N: int = 2
    batch: int = 40
    steps: int = 5

    def __post_init__(self):
        object.__setattr__(self, 'variant', StackVariant(self.variant).value)

    @property
    def shared_dims(self):
        return (self.n, self.d, self.m, self.N)

    def stack(self):
        return PoseStackConfig(N=self.N, n=self.n, cfg=EncoderConfig(d=self.d, m=self.m), variant=self.variant)


@dataclass
class ComparisonRow:
    variant: str
    n: int
    d: int
    m: int
    N: int
    batch: int
    mapping_params_per_block: int
    mapping_params: int
    total_params: int
    step_seconds: float
    peak_rss_mb: float

    def as_dict(self):
        return asdict(self)


def default_configs(n=7, d=64, m=4, N=2, batch=40, steps=5):
    return [ComparisonConfig(variant.value, n, d, m, N, batch, steps) for variant in StackVariant]


def check_shared_dims(configs):
    dims = {cfg.shared_dims for cfg in configs}
    if len(dims) > 1:
        raise ContractError(f"compared configs must share (n, d, m, N), got {sorted(dims)}")


def _peak_rss_mb():
    # ru_maxrss is reported in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def measure_variant(cfg: ComparisonConfig) -> ComparisonRow:
    """Count parameters and time forward + backward of one stack in this process"""
    torch.manual_seed(0)
    stack_cfg = cfg.stack()
    module = build_stack(stack_cfg)
    counts = param_count(stack_cfg, module)
    tokens = torch.randn(cfg.batch, cfg.n, cfg.d)

    def step():
        module.zero_grad(set_to_none=True)
        module(tokens).square().mean().backward()

    step()
    started = time.perf_counter()
    for _ in range(cfg.steps):
        step()
    elapsed = (time.perf_counter() - started) / max(cfg.steps, 1)

    return ComparisonRow(
        variant=cfg.variant,
        n=cfg.n,
        d=cfg.d,
        m=cfg.m,
        N=cfg.N,
        batch=cfg.batch,
        mapping_params_per_block=counts['mapping_params_per_block'],
        mapping_params=counts['mapping_params'],
        total_params=counts['total_params'],
        step_seconds=elapsed,
        peak_rss_mb=_peak_rss_mb(),
    )


def compare_heads(configs, isolate=True):
    """
    Measure every config; with ``isolate`` each one runs in its own spawned process.

    Returns:
        list: ComparisonRow per config, in input order
    """
    configs = list(configs)
    check_shared_dims(configs)
    if not isolate:
        return [measure_variant(cfg) for cfg in configs]

    rows = []
    context = multiprocessing.get_context('spawn')
    for cfg in configs:
        with ProcessPoolExecutor(max_workers=1, mp_context=context) as pool:
            rows.append(pool.submit(measure_variant, cfg).result())
        logger.info(f"Measured {cfg.variant}: {rows[-1].step_seconds:.4f}s/step, {rows[-1].peak_rss_mb:.1f} MB peak")
    return rows


def write_csv(rows, path):
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())
