"""Poisson and Normal primitives shared by the models, inference and diagnostics.

Scalar and array arguments are both accepted; results follow numpy broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream)``.

    Two streams with the same pair produce identical draw sequences, and
    distinct stream ids give statistically independent sequences.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, self.stream * 1_000_003 + stream + 1)


def _check_rate(rate):
    rate = np.asarray(rate, dtype=float)
    if np.any(~(rate > 0)):
        raise ValueError("Poisson rate must be strictly positive")
    return rate


def poisson_logpmf(y, rate):
    """``y*log(rate) - rate - log(y!)``."""
    rate = _check_rate(rate)
    y = np.asarray(y, dtype=float)
    out = y * np.log(rate) - rate - special.gammaln(y + 1.0)
    return out if out.ndim else float(out)


def poisson_cdf(y, rate):
    """P(Y <= y) for Y ~ Poisson(rate); zero for y < 0."""
    rate = _check_rate(rate)
    y = np.asarray(y, dtype=float)
    out = np.where(y < 0, 0.0, special.pdtr(np.maximum(np.floor(y), 0.0), rate))
    return out if out.ndim else float(out)


def sample_poisson(rng: np.random.Generator, rate, size=None):
    return rng.poisson(rate, size=size)


def normal_logpdf(x, mean=0.0, sd=1.0):
    sd = np.asarray(sd, dtype=float)
    if np.any(~(sd > 0)):
        raise ValueError("normal scale must be strictly positive")
    z = (np.asarray(x, dtype=float) - mean) / sd
    out = -0.5 * z * z - np.log(sd) - LOG_SQRT_2PI
    return out if out.ndim else float(out)


def normal_cdf(x, mean=0.0, sd=1.0):
    if np.any(~(np.asarray(sd) > 0)):
        raise ValueError("normal scale must be strictly positive")
    out = special.ndtr((np.asarray(x, dtype=float) - mean) / sd)
    return out if out.ndim else float(out)


def normal_quantile(p, mean=0.0, sd=1.0):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("quantile argument must lie strictly inside (0, 1)")
    if np.any(~(np.asarray(sd) > 0)):
        raise ValueError("normal scale must be strictly positive")
    out = mean + sd * special.ndtri(p)
    return out if out.ndim else float(out)


def sample_normal(rng: np.random.Generator, mean=0.0, sd=1.0, size=None):
    if np.any(np.asarray(sd) < 0):
        raise ValueError("normal scale must be nonnegative")
    return mean + sd * rng.standard_normal(size)
