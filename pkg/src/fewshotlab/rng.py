"""Counter-keyed random streams.

Every stochastic operation in the package takes an explicit numpy Generator.
Streams are derived from an integer seed plus a key tuple via Philox, so a
stream for (seed, trial, episode) is independent of iteration order and can
be re-created in isolation to replay any single draw.
"""

import numpy as np
import torch


def stream(seed, *key):
    """Return a Generator keyed by (seed, *key).

    Keys may be ints or short strings; strings are folded to ints so that
    named substreams ("aux", "support") never collide with index keys.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in key:
        if isinstance(k, str):
            entropy.append(int.from_bytes(k.encode("utf-8")[:8].ljust(8, b"\0"), "little"))
        else:
            entropy.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def torch_generator(seed):
    """CPU torch Generator with a fixed seed (parameter init, shuffling)."""
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g
