"""Peer-group formation: HR records, AR-residual GMM, SVD + k-means, SVD + GMM, spectral bi-clustering."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
from scipy.special import comb, logsumexp

from .distributions import RngStream
from .graph import AdjacencyMatrix, bicluster_normalize, truncated_svd

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
DEFAULT_K_RANGE = range(1, 17)
TIE_RTOL = 1e-6
UNKNOWN_DIVISION = "<unknown>"


class GroupingMethod(str, enum.Enum):
    HR = "hr"
    TS = "ts"
    KMEANS = "kmeans"
    GMM = "gmm"
    BICLUSTER = "bicluster"


@dataclass(frozen=True)
class GroupAssignment:
    method: GroupingMethod
    mapping: dict[str, int]
    k: int

    def __post_init__(self):
        if self.k < 1 or set(self.mapping.values()) != set(range(self.k)):
            raise ValueError("group ids must be exactly 0..k-1 with k >= 1")

    @classmethod
    def from_labels(cls, method: GroupingMethod, users: Sequence[str], labels: Sequence) -> "GroupAssignment":
        """Relabel to contiguous ids, numbered by first appearance in sorted user order."""
        pairs = sorted(zip(users, labels), key=lambda p: p[0])
        relabel: dict = {}
        mapping = {}
        for user, lab in pairs:
            mapping[user] = relabel.setdefault(lab, len(relabel))
        return cls(GroupingMethod(method), mapping, len(relabel))

    def labels(self, users: Sequence[str]) -> np.ndarray:
        return np.array([self.mapping[u] for u in users])

    def to_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "group_id"])
        for user in sorted(self.mapping):
            w.writerow([user, self.mapping[user]])

    @classmethod
    def from_csv(cls, fh: TextIO, method: GroupingMethod) -> "GroupAssignment":
        rows = list(csv.DictReader(fh))
        return cls.from_labels(method, [r["user"] for r in rows], [int(r["group_id"]) for r in rows])


@dataclass
class ClusterModel:
    centroids: np.ndarray
    variances: np.ndarray | None = None
    weights: np.ndarray | None = None
    score_trace: dict[int, float] = field(default_factory=dict)
    loglik_trace: list[float] = field(default_factory=list)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss: float
    restart_wcss: list[float]


# ---------------------------------------------------------------------------
# k-means


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    labels = None
    k = centers.shape[0]
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # refill an empty cluster with the point farthest from its centroid
                far = d2[np.arange(len(x)), labels].argmax()
                centers[j] = x[far]
                labels[far] = j
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(axis=1)
    return labels, centers, float(d2[np.arange(len(x)), labels].sum())


def kmeans(points, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from k-means++ starts; the restart with the lowest WCSS wins."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {x.shape[0]}]")
    best = None
    restart_wcss = []
    for r in range(n_init):
        rng = RngStream(seed, r).generator()
        labels, centers, wcss = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        restart_wcss.append(wcss)
        if best is None or wcss < best.wcss:
            best = KMeansResult(labels, centers, wcss, restart_wcss)
    return best


def select_k_elbow(wcss_curve: Mapping[int, float]) -> int:
    """Interior k with the largest second difference of the WCSS curve (ties: smallest k)."""
    ks = sorted(wcss_curve)
    if len(ks) < 4:
        raise ValueError("elbow selection needs a WCSS curve over at least 4 values of k")
    if ks != list(range(ks[0], ks[-1] + 1)):
        raise ValueError("WCSS curve must be defined on a contiguous range of k")
    best_k, best_val = None, -math.inf
    for k in ks[1:-1]:
        val = wcss_curve[k - 1] - 2.0 * wcss_curve[k] + wcss_curve[k + 1]
        if best_k is None or val > best_val + 1e-12 * max(1.0, abs(best_val)):
            best_k, best_val = k, val
    return best_k


def kmeans_elbow(points, k_range: Iterable[int] = DEFAULT_K_RANGE, seed: int = 0) -> tuple[KMeansResult, ClusterModel]:
    x = np.asarray(points, dtype=float)
    ks = [k for k in k_range if k <= x.shape[0]]
    fits = {k: kmeans(x, k, seed=seed) for k in ks}
    curve = {k: f.wcss for k, f in fits.items()}
    k = select_k_elbow(curve) if len(curve) >= 4 else max(curve)
    return fits[k], ClusterModel(centroids=fits[k].centroids, score_trace=curve)


# ---------------------------------------------------------------------------
# Gaussian mixture with diagonal covariances


class DegenerateMixture(RuntimeError):
    pass


@dataclass
class GMMFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    loglik: float
    loglik_trace: list[float]
    responsibilities: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.responsibilities.argmax(axis=1)

    def bic(self, n: int) -> float:
        k, d = self.means.shape
        n_params = k * 2 * d + (k - 1)
        return -2.0 * self.loglik + n_params * math.log(n)


def _component_logpdf(x, means, variances):
    diff = x[:, None, :] - means[None, :, :]
    return -0.5 * ((diff**2 / variances[None]).sum(axis=2) + np.log(variances).sum(axis=1)[None] + x.shape[1] * math.log(2 * math.pi))


def _em(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> GMMFit:
    n, d = x.shape
    means = _kmeans_pp(x, k, rng)
    variances = np.tile(np.maximum(x.var(axis=0), VAR_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)
    trace: list[float] = []
    for _ in range(max_iter):
        log_joint = _component_logpdf(x, means, variances) + np.log(weights)[None]
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(log_norm.sum())
        if not math.isfinite(ll):
            raise DegenerateMixture("non-finite log-likelihood")
        trace.append(ll)
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        if nk.min() < 1.0 and k > 1:
            raise DegenerateMixture(f"component mass collapsed to {nk.min():.3g}")
        if len(trace) > 1 and trace[-1] - trace[-2] <= tol * (1.0 + abs(trace[-1])):
            break
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        variances = np.maximum((resp.T @ x**2) / nk[:, None] - means**2, VAR_FLOOR)
    return GMMFit(means, variances, weights, trace[-1], trace, resp)


def gmm_fit(points, k: int, seed: int = 0, n_init: int = 3, max_iter: int = 500, tol: float = 1e-10, max_restarts: int = 5) -> GMMFit:
    """EM for a diagonal-covariance mixture with a fixed number of components."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if k > x.shape[0]:
        raise ValueError(f"k={k} exceeds the number of points {x.shape[0]}")
    best = None
    failures = 0
    attempt = 0
    while attempt < n_init:
        rng = RngStream(seed, 1000 * k + attempt + failures * 97).generator()
        try:
            fit = _em(x, k, rng, max_iter, tol)
        except DegenerateMixture as exc:
            failures += 1
            if failures > max_restarts:
                raise DegenerateMixture(f"k={k}: {exc} after {max_restarts} restarts") from None
            continue
        attempt += 1
        if best is None or fit.loglik > best.loglik:
            best = fit
    return best


def gmm_em(points, k_range: Iterable[int] = DEFAULT_K_RANGE, seed: int = 0) -> tuple[GMMFit, ClusterModel]:
    """Fit mixtures over ``k_range`` and keep the one with minimum BIC."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    ks = [k for k in k_range if k < x.shape[0]]
    if not ks:
        raise ValueError("no admissible k: need more points than components")
    fits, bics = {}, {}
    for k in ks:
        try:
            fits[k] = gmm_fit(x, k, seed=seed)
        except DegenerateMixture as exc:
            logger.warning("skipping k=%d: %s", k, exc)
            continue
        bics[k] = fits[k].bic(x.shape[0])
    if not bics:
        raise DegenerateMixture("every k in the range produced a degenerate mixture")
    best_k = min(bics, key=lambda k: (bics[k], k))
    best = fits[best_k]
    return best, ClusterModel(
        centroids=best.means, variances=best.variances, weights=best.weights, score_trace=bics, loglik_trace=best.loglik_trace
    )


# ---------------------------------------------------------------------------
# Spectral bi-clustering


def bicluster_coords(adj: AdjacencyMatrix, n_vectors: int, seed: int = 0) -> np.ndarray:
    """Row-scaled left singular vectors 2..n_vectors+1 of the degree-normalized matrix.

    A cut through a group of tied singular values would depend on the
    arbitrary basis the SVD returns for that subspace (disconnected blocks
    all have singular value 1), so the selection is widened to the whole tie.
    """
    an = bicluster_normalize(adj)
    full = min(an.shape)
    want = min(n_vectors + 1, full)
    rank = min(want + 4, full)
    while True:
        svd = truncated_svd(an, rank, seed=seed)
        sv = svd.singular_values
        last = want
        while last < rank and np.isclose(sv[last], sv[want - 1], rtol=TIE_RTOL, atol=0.0):
            last += 1
        if last < rank or rank == full:
            break
        rank = min(2 * rank, full)
    z = svd.coords[:, 1:last] / np.sqrt(adj.row_sums)[:, None]
    if z.shape[1] == 0:
        z = np.zeros((an.shape[0], 1))
    return z


def _bicluster_dim(k: int) -> int:
    return math.ceil(math.log2(k))


def bicluster(adj: AdjacencyMatrix, k: int, seed: int = 0) -> np.ndarray:
    """User labels from spectral co-clustering on ceil(log2 k) non-leading vectors."""
    if k == 1:
        return np.zeros(adj.shape[0], dtype=int)
    z = bicluster_coords(adj, _bicluster_dim(k), seed=seed)
    return kmeans(z, k, seed=seed).labels


def bicluster_select_k(adj: AdjacencyMatrix, k_range: Iterable[int] = DEFAULT_K_RANGE, seed: int = 0) -> int:
    """Elbow over k-means WCSS in a fixed bi-cluster embedding sized for the largest k."""
    ks = [k for k in k_range if k <= adj.shape[0]]
    z = bicluster_coords(adj, _bicluster_dim(max(ks)), seed=seed)
    curve = {k: kmeans(z, k, seed=seed).wcss for k in ks}
    return select_k_elbow(curve) if len(curve) >= 4 else max(curve)


# ---------------------------------------------------------------------------
# AR residual features for the time-series grouping

AR_ORDERS = (0, 1, 2, 3)
DIFF_ORDERS = (0, 1)
MIN_SERIES = 10


@dataclass
class ARFit:
    p: int
    d: int
    aic: float
    residuals: np.ndarray


def fit_ar_aic(series) -> ARFit:
    """Conditional-least-squares AR(p) on the d-th difference, minimum AIC.

    Every candidate is scored on the same target points so the conditional
    likelihoods are comparable across p and d.
    """
    y = np.asarray(series, dtype=float)
    if y.size < MIN_SERIES:
        raise ValueError(f"series of length {y.size} is shorter than {MIN_SERIES}")
    start = max(AR_ORDERS) + max(DIFF_ORDERS)
    n_eff = y.size - start
    best = None
    for d in DIFF_ORDERS:
        z = np.diff(y, n=d) if d else y
        offset = start - d
        target = z[offset:]
        for p in AR_ORDERS:
            cols = [np.ones(n_eff)] + [z[offset - j : z.size - j] for j in range(1, p + 1)]
            design = np.column_stack(cols)
            coef, *_ = np.linalg.lstsq(design, target, rcond=None)
            resid = target - design @ coef
            sigma2 = max(float(resid @ resid) / n_eff, 1e-12)
            aic = n_eff * math.log(sigma2) + 2 * (p + 2)
            if best is None or aic < best.aic - 1e-9:
                best = ARFit(p, d, aic, resid)
    return best


def residual_features(resid) -> np.ndarray:
    """(mean, sd, skewness, excess kurtosis, lag-1 autocorrelation); zero-variance moments are 0."""
    r = np.asarray(resid, dtype=float)
    mean = r.mean()
    c = r - mean
    m2 = float(c @ c) / r.size
    if m2 <= 1e-24:
        return np.array([mean, 0.0, 0.0, 0.0, 0.0])
    skew = float((c**3).mean()) / m2**1.5
    kurt = float((c**4).mean()) / m2**2 - 3.0
    acf1 = float(c[1:] @ c[:-1]) / (r.size * m2)
    return np.array([mean, math.sqrt(m2), skew, kurt, acf1])


def ts_features(user_series: Mapping[str, Sequence[float]]) -> tuple[list[str], np.ndarray]:
    """Residual feature rows for users whose series are long enough (sorted by user)."""
    users, rows = [], []
    for user in sorted(user_series):
        series = user_series[user]
        if len(series) < MIN_SERIES:
            logger.warning("user %s has %d observations; dropped from TS grouping", user, len(series))
            continue
        users.append(user)
        rows.append(residual_features(fit_ar_aic(series).residuals))
    return users, np.array(rows).reshape(len(rows), 5)


def standardize(features) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    sd = f.std(axis=0)
    safe = np.where(sd > 1e-12, sd, 1.0)
    return np.where(sd > 1e-12, (f - f.mean(axis=0)) / safe, 0.0)


def cluster_ts(features, k_range: Iterable[int] = DEFAULT_K_RANGE, seed: int = 0) -> tuple[GMMFit, ClusterModel]:
    return gmm_em(standardize(features), k_range, seed=seed)


# ---------------------------------------------------------------------------
# HR records and partition agreement


def hr_grouping(hr_table: Mapping[str, str], users: Iterable[str]) -> GroupAssignment:
    users = sorted(users)
    divisions = [hr_table.get(u, UNKNOWN_DIVISION) for u in users]
    order = {div: i for i, div in enumerate(sorted(set(divisions)))}
    return GroupAssignment.from_labels(GroupingMethod.HR, users, [order[d] for d in divisions])


def read_hr_csv(fh: TextIO) -> dict[str, str]:
    return {r["user"]: r["division"] for r in csv.DictReader(fh)}


def adjusted_rand_index(a: GroupAssignment | Mapping[str, int], b: GroupAssignment | Mapping[str, int]) -> float:
    ma = a.mapping if isinstance(a, GroupAssignment) else dict(a)
    mb = b.mapping if isinstance(b, GroupAssignment) else dict(b)
    if set(ma) != set(mb):
        raise ValueError("partitions cover different user sets")
    users = sorted(ma)
    la = np.unique([ma[u] for u in users], return_inverse=True)[1]
    lb = np.unique([mb[u] for u in users], return_inverse=True)[1]
    table = np.zeros((la.max() + 1, lb.max() + 1))
    np.add.at(table, (la, lb), 1)
    n = len(users)
    sum_cells = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # only reachable when both partitions are all-singletons or both are one block
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))
