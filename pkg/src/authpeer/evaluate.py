"""WAIC, randomized quantile residuals, residual tests and labeled detection metrics."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from .distributions import RngStream, normal_quantile, poisson_cdf
from .inference import PosteriorSamples
from .models import ModelSpec, Observations, cell_positions

_RESIDUAL_STREAM = 400


@dataclass
class WaicResult:
    elpd_waic: float
    lppd: float
    p_waic: float
    pointwise_lppd: np.ndarray = field(repr=False)
    pointwise_p: np.ndarray = field(repr=False)

    @property
    def pointwise_elpd(self) -> np.ndarray:
        return self.pointwise_lppd - self.pointwise_p


def waic_from_loglik(loglik: np.ndarray) -> WaicResult:
    """WAIC from an (S, n) matrix of pointwise log-likelihoods."""
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim == 1:
        ll = ll[:, None]
    if ll.shape[0] < 2:
        raise ValueError("WAIC needs at least two posterior draws")
    lppd_i = logsumexp(ll, axis=0) - math.log(ll.shape[0])
    p_i = ll.var(axis=0, ddof=1)
    lppd, p = float(lppd_i.sum()), float(p_i.sum())
    return WaicResult(lppd - p, lppd, p, lppd_i, p_i)


def waic(samples: PosteriorSamples, spec: ModelSpec, observations: Observations, chunk: int = 1024) -> WaicResult:
    """WAIC over the training observations.

    Rows sharing a model cell and a count have identical pointwise terms, so
    each distinct (cell, y) pair is evaluated once and broadcast back.
    """
    if samples.S < 2:
        raise ValueError("WAIC needs at least two posterior draws")
    rate, method = cell_positions(spec, observations)
    keys, inverse = np.unique(np.stack([rate, method, observations.y]), axis=1, return_inverse=True)
    inverse = inverse.ravel()
    n_keys = keys.shape[1]
    lppd_k = np.empty(n_keys)
    p_k = np.empty(n_keys)
    theta = samples.draws
    for start in range(0, n_keys, chunk):
        sl = slice(start, start + chunk)
        r, m, y = keys[0, sl], keys[1, sl], keys[2, sl].astype(float)
        log_rate = theta[:, r]
        has_m = m >= 0
        if has_m.any():
            log_rate[:, has_m] += theta[:, m[has_m]]
        ll = y * log_rate - np.exp(log_rate) - gammaln(y + 1.0)
        part = waic_from_loglik(ll)
        lppd_k[sl], p_k[sl] = part.pointwise_lppd, part.pointwise_p
    lppd_i, p_i = lppd_k[inverse], p_k[inverse]
    # sum per distinct key times multiplicity: identical to the pointwise sum, cheaper and order-stable
    mult = np.bincount(inverse, minlength=n_keys)
    lppd, p = float(lppd_k @ mult), float(p_k @ mult)
    return WaicResult(lppd - p, lppd, p, lppd_i, p_i)


def posterior_mean_rates(samples: PosteriorSamples, spec: ModelSpec, observations: Observations) -> np.ndarray:
    """Posterior-mean Poisson rate of each observation's cell."""
    rate, method = cell_positions(spec, observations)
    cells, inverse = np.unique(np.stack([rate, method]), axis=1, return_inverse=True)
    log_rate = samples.draws[:, cells[0]]
    has_m = cells[1] >= 0
    if has_m.any():
        log_rate[:, has_m] += samples.draws[:, cells[1, has_m]]
    return np.exp(log_rate).mean(axis=0)[inverse.ravel()]


def quantile_residuals(y, rates, seed: int = 0, u: np.ndarray | None = None) -> np.ndarray:
    """Randomized quantile residuals for Poisson counts.

    ``u`` in [0, 1] positions each residual inside its CDF jump; by default it
    is drawn uniformly from a seeded stream.
    """
    y = np.asarray(y, dtype=float)
    rates = np.broadcast_to(np.asarray(rates, dtype=float), y.shape)
    lo = poisson_cdf(y - 1, rates)
    hi = poisson_cdf(y, rates)
    if u is None:
        u = RngStream(seed, _RESIDUAL_STREAM).generator().random(y.shape)
    p = lo + np.asarray(u) * (hi - lo)
    p = np.clip(p, 1e-300, 1.0 - np.finfo(float).epsneg)
    return np.asarray(normal_quantile(p))


def residual_series_by_user(observations: Observations, residuals: np.ndarray) -> dict[str, np.ndarray]:
    """Residuals grouped per user in time order (ties broken by method)."""
    idx: dict[str, list[int]] = defaultdict(list)
    for i, user in enumerate(observations.user):
        idx[user].append(i)
    out = {}
    for user in sorted(idx):
        order = sorted(idx[user], key=lambda i: (observations.bucket[i], observations.m[i]))
        out[user] = residuals[order]
    return out


def _moments(x: np.ndarray):
    c = x - x.mean()
    m2 = float(c @ c) / x.size
    return c, m2


def jarque_bera(series) -> tuple[float, float]:
    x = np.asarray(series, dtype=float)
    if x.size < 4:
        raise ValueError("Jarque-Bera needs at least 4 values")
    c, m2 = _moments(x)
    if m2 <= 1e-300 * max(1.0, float(np.abs(x).max()) ** 2):
        return 0.0, 1.0
    skew = float((c**3).mean()) / m2**1.5
    kurt = float((c**4).mean()) / m2**2
    jb = x.size / 6.0 * (skew**2 + (kurt - 3.0) ** 2 / 4.0)
    return jb, float(stats.chi2.sf(jb, 2))


def ljung_box(series, lags: int = 10) -> tuple[float, float]:
    x = np.asarray(series, dtype=float)
    n = x.size
    if lags < 1 or lags >= n:
        raise ValueError(f"Ljung-Box needs 1 <= lags < n (lags={lags}, n={n})")
    c, m2 = _moments(x)
    denom = float(c @ c)
    if denom <= 0:
        return 0.0, 1.0
    acf = np.array([float(c[k:] @ c[:-k]) / denom for k in range(1, lags + 1)])
    q = n * (n + 2) * float(np.sum(acf**2 / (n - np.arange(1, lags + 1))))
    return q, float(stats.chi2.sf(q, lags))


@dataclass
class ResidualDiagnostics:
    per_user: dict[str, dict] = field(repr=False)
    jb_rejection_rate: float
    lb_rejection_rate: float
    n_users: int


def residual_diagnostics(series_by_user: Mapping[str, Sequence[float]], level: float = 0.05, lags: int = 10, min_length: int = 20) -> ResidualDiagnostics:
    """Per-user Jarque-Bera and Ljung-Box tests with summary rejection rates."""
    per_user = {}
    for user, series in series_by_user.items():
        series = np.asarray(series, dtype=float)
        if series.size < max(min_length, lags + 1):
            continue
        jb, jb_p = jarque_bera(series)
        lb, lb_p = ljung_box(series, lags)
        per_user[user] = {"residuals": series, "jb": jb, "jb_p": jb_p, "lb": lb, "lb_p": lb_p}
    n = len(per_user)
    jb_rate = sum(v["jb_p"] < level for v in per_user.values()) / n if n else float("nan")
    lb_rate = sum(v["lb_p"] < level for v in per_user.values()) / n if n else float("nan")
    return ResidualDiagnostics(per_user, jb_rate, lb_rate, n)


def labeled_metrics(flagged: Iterable, truth: Iterable) -> tuple[float | None, float | None]:
    """(precision, recall); either is None when its denominator is empty."""
    flagged, truth = set(flagged), set(truth)
    hits = len(flagged & truth)
    precision = hits / len(flagged) if flagged else None
    recall = hits / len(truth) if truth else None
    return precision, recall
