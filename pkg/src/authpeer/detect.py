"""Posterior predictive thresholds and upper-tail anomaly flags."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Mapping, TextIO

import numpy as np

from .distributions import RngStream
from .inference import PosteriorSamples
from .ingest import format_timestamp
from .models import ModelSpec, Observations, cell_positions

ALERTS_HEADER = ["user", "bucket", "method", "group", "observed", "hpdi_upper", "flagged", "model", "grouping"]
METHOD_NAMES = {1: "kerberos", 2: "ntlm"}
MAX_LOG_RATE = 40.0
_PREDICTIVE_STREAM = 300


@dataclass(frozen=True)
class HpdiInterval:
    lower: float
    upper: float
    alpha: float
    mass: float


def _window(n: int, alpha: float) -> int:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    # guard against 0.99 * 100 = 98.99999...
    return min(n, max(1, math.ceil((1.0 - alpha) * n - 1e-9)))


def hpdi(draws, alpha: float) -> HpdiInterval:
    """Shortest window of the sorted draws holding ceil((1 - alpha) n) of them; ties go to the lowest."""
    x = np.asarray(draws, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("hpdi needs at least one draw")
    (lo,), (hi,) = hpdi_columns(x[:, None], alpha)
    mass = float(np.count_nonzero((x >= lo) & (x <= hi))) / x.size
    return HpdiInterval(_num(lo), _num(hi), alpha, mass)


def hpdi_columns(draws: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise :func:`hpdi` bounds for a (n_draws, n_cells) matrix."""
    x = np.sort(np.asarray(draws, dtype=float), axis=0)
    n = x.shape[0]
    w = _window(n, alpha)
    widths = x[w - 1 :] - x[: n - w + 1]
    i = np.argmin(widths, axis=0)
    cols = np.arange(x.shape[1])
    return x[i, cols], x[i + w - 1, cols]


def _num(v):
    v = float(v)
    return int(v) if v.is_integer() else v


def _cell_of(spec: ModelSpec, h: int, d: int, g: int, m: int) -> tuple[int, int]:
    obs = Observations.from_arrays([1], [h], [d], [g], [m])
    rate, method = cell_positions(spec, obs)
    return int(rate[0]), int(method[0])


def predictive_draws(samples: PosteriorSamples, cells: np.ndarray, n_draws: int, seed: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """(n_draws, n_cells) Poisson counts, one per posterior draw (cycled if n_draws > S)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    rows = np.arange(n_draws) % samples.S
    theta = samples.draws[rows]
    log_rate = theta[:, cells[:, 0]]
    has_m = cells[:, 1] >= 0
    if has_m.any():
        log_rate[:, has_m] += theta[:, cells[has_m, 1]]
    rng = RngStream(seed, _PREDICTIVE_STREAM).generator() if rng is None else rng
    return rng.poisson(np.exp(np.minimum(log_rate, MAX_LOG_RATE)))


def posterior_predictive(samples: PosteriorSamples, spec: ModelSpec, cell: tuple[int, int, int, int], n_draws: int = 4000, seed: int = 0) -> np.ndarray:
    """Predictive counts for the cell of an observation at (hour, day, group, method)."""
    try:
        pos = _cell_of(spec, *cell)
    except (IndexError, ValueError) as exc:
        raise ValueError(f"invalid cell {cell} for {spec.id}: {exc}") from None
    return predictive_draws(samples, np.array([pos]), n_draws, seed)[:, 0]


def cell_thresholds(
    samples: PosteriorSamples, cells: Iterable[tuple[int, int]], alpha: float = 0.01, n_draws: int = 4000, seed: int = 0, chunk: int = 512
) -> dict[tuple[int, int], HpdiInterval]:
    """HPDI of the posterior predictive for each model cell (log-rate position, method position)."""
    cells = sorted(set(cells))
    out: dict[tuple[int, int], HpdiInterval] = {}
    rng = RngStream(seed, _PREDICTIVE_STREAM).generator()
    for start in range(0, len(cells), chunk):
        block = np.array(cells[start : start + chunk], dtype=np.int64)
        draws = predictive_draws(samples, block, n_draws, rng=rng)
        lo, hi = hpdi_columns(draws, alpha)
        inside = ((draws >= lo) & (draws <= hi)).mean(axis=0)
        for (r, m), a, b, mass in zip(block.tolist(), lo, hi, inside):
            out[(r, m)] = HpdiInterval(_num(a), _num(b), alpha, float(mass))
    return out


@dataclass(frozen=True)
class AlertRow:
    user: str
    bucket: object
    method: str
    group: int
    observed: int
    hpdi_upper: float
    flagged: bool
    model: str
    grouping: str

    @property
    def key(self) -> tuple[str, str, str]:
        bucket = format_timestamp(self.bucket) if isinstance(self.bucket, datetime) else str(self.bucket)
        return (self.user, bucket, self.method)


@dataclass
class AnomalyReport:
    rows: list[AlertRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def flagged_keys(self) -> set[tuple[str, str, str]]:
        return {r.key for r in self.rows if r.flagged}

    def to_csv(self, fh: TextIO, header: bool = True) -> None:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(ALERTS_HEADER)
        for r in self.rows:
            user, bucket, method = r.key
            w.writerow([user, bucket, method, r.group, r.observed, r.hpdi_upper, int(r.flagged), r.model, r.grouping])


def flag_anomalies(
    test: Observations, thresholds: Mapping[tuple[int, int], HpdiInterval], spec: ModelSpec, grouping: str = ""
) -> AnomalyReport:
    """Flag test rows whose count strictly exceeds the HPDI upper limit of their cell."""
    rate, method = cell_positions(spec, test)
    rows = []
    for i in range(len(test)):
        cell = (int(rate[i]), int(method[i]))
        if cell not in thresholds:
            raise KeyError(f"no threshold for cell {cell} (h={test.h[i]}, d={test.d[i]}, g={test.g[i]}, m={test.m[i]})")
        upper = thresholds[cell].upper
        y = int(test.y[i])
        rows.append(
            AlertRow(
                user=test.user[i] if test.user else str(i),
                bucket=test.bucket[i] if test.bucket else "",
                method=METHOD_NAMES.get(int(test.m[i]), str(test.m[i])),
                group=int(test.g[i]),
                observed=y,
                hpdi_upper=upper,
                flagged=y > upper,
                model=spec.id,
                grouping=grouping,
            )
        )
    rows.sort(key=lambda r: r.key)
    return AnomalyReport(rows)


def detect(
    samples: PosteriorSamples, test: Observations, grouping: str = "", alpha: float = 0.01, n_draws: int = 4000, seed: int = 0
) -> AnomalyReport:
    spec = samples.spec
    rate, method = cell_positions(spec, test)
    thresholds = cell_thresholds(samples, zip(rate.tolist(), method.tolist()), alpha=alpha, n_draws=n_draws, seed=seed)
    return flag_anomalies(test, thresholds, spec, grouping)


def alert_rate(report: AnomalyReport, exclude: Iterable[tuple[str, str, str]] = ()) -> float:
    """Fraction of flagged rows, optionally ignoring rows whose key is in ``exclude``."""
    exclude = set(exclude)
    rows = [r for r in report.rows if r.key not in exclude] if exclude else report.rows
    if not rows:
        raise ValueError("alert rate of an empty report is undefined")
    return sum(r.flagged for r in rows) / len(rows)
