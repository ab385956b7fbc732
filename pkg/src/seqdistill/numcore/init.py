"""Seeded, splittable random streams and parameter initialization.

Streams are counter-based (Philox keyed through `SeedSequence`), so a given
(seed, stream path, draw index) produces the same value on every platform.
"""

import hashlib

import numpy as np

from seqdistill.errors import ConfigError
from seqdistill.numcore.tensor import Tensor, default_dtype


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ConfigError("stream keys must be non-negative")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.blake2s(key.encode("utf-8"), digest_size=4).digest()
        return int.from_bytes(digest, "little")
    raise ConfigError(f"stream key must be int or str, got {type(key).__name__}")


class Rng:
    """A 64-bit-seeded random stream that splits into independent substreams."""

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys):
        """Derive an independent substream; keys are ints or names."""
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    # thin delegates to the underlying generator
    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, x):
        return self.gen.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def shuffle(self, x):
        self.gen.shuffle(x)


def seeded_init(shape, scheme, rng, sigma=0.02):
    """Deterministically initialize a tensor.

    Schemes: "uniform-xavier" (U(-a, a), a = sqrt(6/(fan_in+fan_out))),
    "normal" (N(0, sigma^2)), "zeros".
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "normal":
        data = rng.normal(0.0, sigma, size=shape)
    elif scheme == "uniform-xavier":
        if len(shape) >= 2:
            fan_in = int(np.prod(shape[:-1]))
            fan_out = shape[-1]
        else:
            fan_in = fan_out = shape[0] if shape else 1
        a = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-a, a, size=shape)
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(default_dtype()))
