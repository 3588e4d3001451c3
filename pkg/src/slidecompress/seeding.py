"""Named random sub-streams derived from one root seed.

Every consumer asks for its own stream by name (``"data"``, ``"mask"``,
``"init"`` ...), so enabling or disabling one component never shifts the
random numbers another component sees.
"""

import zlib

import numpy as np
import torch


def _entropy(seed, name):
    # a tuple seed such as (root, step) gives one stream per step
    parts = seed if isinstance(seed, (tuple, list)) else (seed,)
    return [int(p) & 0xFFFFFFFFFFFFFFFF for p in parts] + [zlib.crc32(name.encode("utf-8"))]


def substream(seed, name):
    """Return a numpy Generator for the sub-stream ``name`` of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, name)))


def sub_seed(seed, name):
    """Integer seed for the sub-stream ``name`` (usable by torch)."""
    return int(np.random.SeedSequence(_entropy(seed, name)).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed, name):
    g = torch.Generator()
    g.manual_seed(sub_seed(seed, name))
    return g
