"""The six Poisson models: latent layout, log-joint density and per-observation rates.

Every model writes the log-rate of an observation as

    log r = log_rate[cell]                      (M1-M4)
    log r = log_rate[h, d, g] + log_method[m, g]  (M5, M6)

with Normal(0, 5) priors on all log quantities (M6: ``log_method[m, g] ~
Normal(method_mean[m], 5)`` and ``method_mean[m] ~ Normal(0, 5)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.special import gammaln

from .distributions import normal_logpdf

PRIOR_SD = 5.0
N_HOURS = 24
N_DAYS = 7
N_METHODS = 2
MODEL_IDS = ("M1", "M2", "M3", "M4", "M5", "M6")


@dataclass(frozen=True)
class ModelSpec:
    id: str
    k: int = 1

    def __post_init__(self):
        if self.id not in MODEL_IDS:
            raise ValueError(f"unknown model {self.id!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.uses_groups and self.k != 1:
            object.__setattr__(self, "k", 1)

    @property
    def uses_seasonality(self) -> bool:
        return self.id in ("M2", "M4", "M5", "M6")

    @property
    def uses_groups(self) -> bool:
        return self.id in ("M3", "M4", "M5", "M6")

    @property
    def uses_method(self) -> bool:
        return self.id in ("M5", "M6")

    @property
    def hierarchical_method(self) -> bool:
        return self.id == "M6"

    @cached_property
    def index(self) -> "ParamIndex":
        return ParamIndex(self)


class ParamIndex:
    """Dense positions of the latent vector: log-rates, then method effects, then hyper-means."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        k = spec.k if spec.uses_groups else 1
        seasonal = N_HOURS * N_DAYS if spec.uses_seasonality else 1
        self.n_rate = seasonal * k
        self.n_method = N_METHODS * spec.k if spec.uses_method else 0
        self.n_hyper = N_METHODS if spec.hierarchical_method else 0
        self.rate_slice = slice(0, self.n_rate)
        self.method_slice = slice(self.n_rate, self.n_rate + self.n_method)
        self.hyper_slice = slice(self.n_rate + self.n_method, self.size)

    @property
    def size(self) -> int:
        return self.n_rate + self.n_method + self.n_hyper

    def rate_pos(self, h, d, g):
        """Position of log_rate for hour ``h`` (0-23), day ``d`` (1-7), group ``g``; arrays broadcast."""
        spec = self.spec
        h, d, g = np.asarray(h), np.asarray(d), np.asarray(g)
        if np.any((h < 0) | (h >= N_HOURS)) or np.any((d < 1) | (d > N_DAYS)):
            raise IndexError("hour or day index out of range")
        if spec.uses_groups and np.any((g < 0) | (g >= spec.k)):
            raise IndexError(f"group index outside [0, {spec.k})")
        seasonal = h * N_DAYS + (d - 1) if spec.uses_seasonality else np.zeros_like(h)
        if spec.id == "M3":
            return g + 0 * h
        if spec.uses_groups:
            return g * (N_HOURS * N_DAYS) + seasonal
        return seasonal

    def method_pos(self, m, g):
        """Position of log_method for method ``m`` (1 Kerberos, 2 NTLM) and group ``g``."""
        m, g = np.asarray(m), np.asarray(g)
        if not self.spec.uses_method:
            raise IndexError(f"{self.spec.id} has no method effects")
        if np.any((m < 1) | (m > N_METHODS)) or np.any((g < 0) | (g >= self.spec.k)):
            raise IndexError("method or group index out of range")
        return self.n_rate + (m - 1) * self.spec.k + g

    def hyper_pos(self, m):
        if not self.spec.hierarchical_method:
            raise IndexError(f"{self.spec.id} has no hyper-means")
        return self.n_rate + self.n_method + np.asarray(m) - 1

    @cached_property
    def names(self) -> list[str]:
        spec = self.spec
        names = [""] * self.size
        if spec.id == "M1":
            names[0] = "log_rate"
        elif spec.id == "M3":
            for g in range(spec.k):
                names[g] = f"log_rate[g={g}]"
        else:
            gs = range(spec.k) if spec.uses_groups else [None]
            for g in gs:
                for h in range(N_HOURS):
                    for d in range(1, N_DAYS + 1):
                        pos = int(self.rate_pos(h, d, 0 if g is None else g))
                        names[pos] = f"log_rate[h={h},d={d}]" if g is None else f"log_rate[h={h},d={d},g={g}]"
        if spec.uses_method:
            for m in (1, 2):
                for g in range(spec.k):
                    names[int(self.method_pos(m, g))] = f"log_method[m={m},g={g}]"
        if spec.hierarchical_method:
            for m in (1, 2):
                names[int(self.hyper_pos(m))] = f"method_mean[m={m}]"
        return names

    def block_of(self) -> np.ndarray:
        """Block id per position: 0 log-rate, 1 method effect, 2 hyper-mean."""
        blocks = np.zeros(self.size, dtype=int)
        blocks[self.method_slice] = 1
        blocks[self.hyper_slice] = 2
        return blocks


@dataclass
class Observations:
    """Column-oriented observations; ``m`` is 1 for Kerberos and 2 for NTLM."""

    y: np.ndarray
    h: np.ndarray
    d: np.ndarray
    g: np.ndarray
    m: np.ndarray
    user: list[str] = field(default_factory=list)
    bucket: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.y.size)

    @classmethod
    def from_arrays(cls, y, h, d, g, m, user=(), bucket=()) -> "Observations":
        arr = lambda v: np.asarray(v, dtype=np.int64).ravel()  # noqa: E731
        return cls(arr(y), arr(h), arr(d), arr(g), arr(m), list(user), list(bucket))

    def subset(self, idx) -> "Observations":
        idx = np.asarray(idx)
        pick = lambda seq: [seq[i] for i in idx] if seq else []  # noqa: E731
        return Observations(self.y[idx], self.h[idx], self.d[idx], self.g[idx], self.m[idx], pick(self.user), pick(self.bucket))

    def concat(self, other: "Observations") -> "Observations":
        return Observations(
            *(np.concatenate([getattr(self, f), getattr(other, f)]) for f in "yhdgm"),
            self.user + other.user,
            self.bucket + other.bucket,
        )


def build_observations(rows: Sequence, groups) -> Observations:
    """One observation per hourly-count row; ``groups`` maps user -> group id."""
    mapping = groups.mapping if hasattr(groups, "mapping") else groups
    missing = sorted({r.user for r in rows if r.user not in mapping})
    if missing:
        raise KeyError(f"users without a group: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return Observations.from_arrays(
        [r.count for r in rows],
        [r.hour for r in rows],
        [r.dow for r in rows],
        [mapping[r.user] for r in rows],
        [r.method.index for r in rows],
        user=[r.user for r in rows],
        bucket=[r.bucket for r in rows],
    )


def cell_positions(spec: ModelSpec, obs: Observations) -> tuple[np.ndarray, np.ndarray]:
    """(log_rate position, log_method position or -1) per observation."""
    idx = spec.index
    g = obs.g if spec.uses_groups else np.zeros_like(obs.g)
    rate = np.broadcast_to(idx.rate_pos(obs.h, obs.d, g), obs.y.shape).astype(np.int64)
    if spec.uses_method:
        method = idx.method_pos(obs.m, obs.g).astype(np.int64)
    else:
        method = np.full(obs.y.shape, -1, dtype=np.int64)
    return rate, method


def log_rates(spec: ModelSpec, latents: np.ndarray, obs: Observations) -> np.ndarray:
    """Log-rate per observation; ``latents`` may carry leading batch dimensions."""
    latents = np.asarray(latents, dtype=float)
    if latents.shape[-1] != spec.index.size:
        raise ValueError(f"latent dimension {latents.shape[-1]} != {spec.index.size}")
    rate, method = cell_positions(spec, obs)
    out = latents[..., rate]
    if spec.uses_method:
        out = out + latents[..., method]
    return out


def rate_lookup(spec: ModelSpec, latents: np.ndarray, obs: Observations) -> np.ndarray:
    return np.exp(log_rates(spec, latents, obs))


class CellLikelihood:
    """Poisson likelihood reduced to per-cell sufficient statistics.

    A cell is a unique (log_rate position, log_method position) pair. The
    log-likelihood of all observations in a cell depends on the data only
    through the count total, the number of rows and the sum of log(y!).
    """

    def __init__(self, spec: ModelSpec, obs: Observations | None):
        self.spec = spec
        dim = spec.index.size
        if obs is None or len(obs) == 0:
            self.rate_pos = np.zeros(0, dtype=np.int64)
            self.method_pos = np.zeros(0, dtype=np.int64)
            self.sum_y = self.n = self.sum_lgamma = np.zeros(0)
        else:
            rate, method = cell_positions(spec, obs)
            keys, inverse = np.unique(np.stack([rate, method]), axis=1, return_inverse=True)
            inverse = inverse.ravel()
            self.rate_pos, self.method_pos = keys[0], keys[1]
            n_cells = keys.shape[1]
            self.sum_y = np.bincount(inverse, weights=obs.y, minlength=n_cells)
            self.n = np.bincount(inverse, minlength=n_cells).astype(float)
            self.sum_lgamma = np.bincount(inverse, weights=gammaln(obs.y + 1.0), minlength=n_cells)
        n_cells = self.rate_pos.size
        rows = np.arange(n_cells)
        has_m = self.method_pos >= 0
        self.incidence = sparse.csr_matrix(
            (np.ones(n_cells + int(has_m.sum())), (np.concatenate([rows, rows[has_m]]), np.concatenate([self.rate_pos, self.method_pos[has_m]]))),
            shape=(n_cells, dim),
        )
        self._incidence_t = self.incidence.T.tocsr()
        self._const = float(self.sum_lgamma.sum())

    def cell_log_rates(self, latents: np.ndarray) -> np.ndarray:
        lat = np.atleast_2d(latents)
        return (self.incidence @ lat.T).T

    def loglik(self, latents: np.ndarray):
        lr = self.cell_log_rates(latents)
        val = lr @ self.sum_y - np.exp(lr) @ self.n - self._const
        return val if np.ndim(latents) > 1 else float(val[0])

    def loglik_and_grad(self, latents: np.ndarray):
        lat = np.atleast_2d(latents)
        lr = self.cell_log_rates(lat)
        mu = np.exp(lr) * self.n
        val = lr @ self.sum_y - mu.sum(axis=1) - self._const
        grad = (self._incidence_t @ (self.sum_y[None, :] - mu).T).T
        if np.ndim(latents) == 1:
            return float(val[0]), grad[0]
        return val, grad


def log_prior_and_grad(spec: ModelSpec, latents: np.ndarray):
    """Normal log-prior over all latents and its gradient (batched over leading axis)."""
    lat = np.atleast_2d(np.asarray(latents, dtype=float))
    idx = spec.index
    var = PRIOR_SD**2
    const = -math.log(PRIOR_SD) - 0.5 * math.log(2 * math.pi)
    grad = -lat / var
    val = (-0.5 * lat**2 / var).sum(axis=1) + idx.size * const
    if spec.hierarchical_method:
        k = spec.k
        psi = lat[:, idx.method_slice].reshape(-1, N_METHODS, k)
        mu = lat[:, idx.hyper_slice]
        centred = psi - mu[:, :, None]
        # replace the N(0, sd) terms of psi by N(mu_m, sd)
        val = val + (0.5 * psi**2 / var).sum(axis=(1, 2)) - (0.5 * centred**2 / var).sum(axis=(1, 2))
        grad[:, idx.method_slice] = (-centred / var).reshape(-1, N_METHODS * k)
        grad[:, idx.hyper_slice] += centred.sum(axis=2) / var
    if np.ndim(latents) == 1:
        return float(val[0]), grad[0]
    return val, grad


def log_prior(spec: ModelSpec, latents: np.ndarray):
    return log_prior_and_grad(spec, latents)[0]


def log_prior_reference(spec: ModelSpec, latents: np.ndarray) -> float:
    """Term-by-term prior density, used to cross-check the vectorized form."""
    idx = spec.index
    lat = np.asarray(latents, dtype=float)
    total = float(np.sum(normal_logpdf(lat[idx.rate_slice], 0.0, PRIOR_SD)))
    if spec.uses_method:
        for m in (1, 2):
            center = lat[int(idx.hyper_pos(m))] if spec.hierarchical_method else 0.0
            for g in range(spec.k):
                total += normal_logpdf(lat[int(idx.method_pos(m, g))], center, PRIOR_SD)
    if spec.hierarchical_method:
        total += float(np.sum(normal_logpdf(lat[idx.hyper_slice], 0.0, PRIOR_SD)))
    return total


def log_joint(spec: ModelSpec, latents: np.ndarray, obs: Observations | CellLikelihood | None) -> float:
    latents = np.asarray(latents, dtype=float)
    if latents.shape != (spec.index.size,):
        raise ValueError(f"latent vector must have shape ({spec.index.size},)")
    if not np.all(np.isfinite(latents)):
        raise ValueError("latents must be finite")
    lik = obs if isinstance(obs, CellLikelihood) else CellLikelihood(spec, obs)
    return lik.loglik(latents) + log_prior(spec, latents)


def log_joint_and_grad(spec: ModelSpec, latents: np.ndarray, lik: CellLikelihood):
    lv, lg = lik.loglik_and_grad(latents)
    pv, pg = log_prior_and_grad(spec, latents)
    return lv + pv, lg + pg
