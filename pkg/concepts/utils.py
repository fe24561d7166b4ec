"""
Utility functions for the concepts app
"""
import hashlib
import random
from pathlib import Path

import numpy as np
import torch
from django.conf import settings


def configure_threads(threads=None):
    """
    Pin torch to a worker count and return it.

    One thread also switches torch to deterministic algorithms, which is what
    makes two runs from the same config and seed produce identical metrics.
    """
    threads = threads or settings.REASONER_THREADS
    threads = max(1, int(threads))
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(threads == 1)
    return threads


def seed_everything(seed):
    """Seed python, numpy and torch generators from one integer"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def derive_seed(*parts):
    """Stable 63-bit seed derived from arbitrary printable parts"""
    digest = hashlib.sha256(':'.join(str(p) for p in parts).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & (2 ** 63 - 1)


def sha256_file(path):
    """Hex digest of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def code_version():
    """
    Hash of the application's python sources.

    Stored with every run so a run directory names the code that produced it.
    """
    digest = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.rglob('*.py')):
        if 'tests' in path.parts or 'migrations' in path.parts:
            continue
        digest.update(str(path.relative_to(root)).encode('utf-8'))
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]
