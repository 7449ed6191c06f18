"""Seedable 64-bit random streams with deterministic splitting."""

from __future__ import annotations

import numpy as np


class Rng:
    """A reproducible random stream.

    Uniform variates come from a PCG64 bit generator; Gaussian variates are
    produced from those uniforms with the Box-Muller transform so that the
    normal stream only depends on the uniform stream. Child streams obtained
    with :meth:`split` are statistically independent of the parent and of
    each other.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if int(seed) < 0:
                raise ValueError("seed must be non-negative")
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))
        self.n_children = 0

    def split(self, n: int | None = None):
        """Spawn independent child streams (one ``Rng`` if ``n`` is None)."""
        count = 1 if n is None else int(n)
        children = [Rng(s) for s in self._seq.spawn(count)]
        self.n_children += count
        return children[0] if n is None else children

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on [0, 1) in float64."""
        return self._gen.random(size)

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        """Standard (or shifted/scaled) normal draws via Box-Muller."""
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1], keeps log finite
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(ang)
        z[1::2] = r * np.sin(ang)
        out = loc + scale * z[:n].reshape(shape)
        return out if shape else float(out)

    def student_t(self, df: int, size=None) -> np.ndarray:
        """Student-t draws with integer degrees of freedom from Gaussian ratios."""
        if df < 1:
            raise ValueError("df must be >= 1")
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        z = np.asarray(self.normal(shape))
        chi2 = np.sum(np.asarray(self.normal(shape + (df,))) ** 2, axis=-1)
        out = z / np.sqrt(chi2 / df)
        return out if shape else float(out)

    def integers(self, low: int, high: int, size=None):
        """Integers uniform on [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
