"""Float64 array helpers and the seeded random stream used everywhere.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""

import numpy as np

from .errors import DimensionError, EmptyGroupError

DTYPE = np.float64


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=DTYPE)


class RngStream:
    """Deterministic random stream backed by the Philox counter-based generator.

    Streams derived with :meth:`child` depend only on the parent seed and the
    given keys, never on how much the parent has been consumed. That is what
    keeps per-camera work independent of evaluation order.
    """

    def __init__(self, seed, *keys):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys):
        return RngStream(self.seed, *self.keys, *keys)

    def gaussian(self, shape):
        return self._gen.standard_normal(shape, dtype=DTYPE)

    def uniform(self, low, high, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, keys={self.keys})"


def gaussian(rng, shape):
    """I.i.d. standard normal tensor drawn from ``rng``."""
    return rng.gaussian(shape)


def affine(x, W, b):
    x = as_tensor(x)
    W = as_tensor(W)
    b = as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(
            f"affine shape mismatch: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    return x @ W + b


def reduce_moments(x):
    """Column mean and population (1/M) variance of an (M, D) tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"reduce_moments expects a 2-D tensor, got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise EmptyGroupError("cannot compute moments of an empty group")
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    return mean, var


def merge_moments(n_a, mean_a, var_a, n_b, mean_b, var_b):
    """Combine population moments of two disjoint groups (Chan et al.)."""
    n = n_a + n_b
    if n == 0:
        raise EmptyGroupError("cannot merge two empty groups")
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = var_a * n_a + var_b * n_b + delta**2 * (n_a * n_b / n)
    return n, mean, m2 / n


def l2_normalize(x, eps=1e-12):
    """Row-wise L2 normalization; returns (normalized, valid_mask).

    Rows with norm below ``eps`` come back as zeros and are flagged invalid.
    """
    x = as_tensor(x)
    norms = np.linalg.norm(x, axis=1)
    valid = norms > eps
    out = np.zeros_like(x)
    out[valid] = x[valid] / norms[valid, None]
    return out, valid
