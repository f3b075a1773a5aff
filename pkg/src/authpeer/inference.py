"""Mean-field Gaussian SVI, its oracles (quadrature, random-walk Metropolis) and the R-hat gate."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .distributions import RngStream
from .models import N_METHODS, CellLikelihood, ModelSpec, Observations, log_joint_and_grad, log_prior_and_grad

logger = logging.getLogger(__name__)

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8
INIT_LOG_SD = math.log(0.5)
R_HAT_GATE = 1.01
ARTIFACT_VERSION = 1

# Noise for each latent block comes from its own stream, so models sharing a
# block (M4/M5/M6 log-rates, M5/M6 method effects) see common random numbers.
_SVI_STREAM = 10
_DRAW_STREAM = 100


class NonFiniteELBO(FloatingPointError):
    pass


@dataclass
class VariationalParams:
    spec: ModelSpec
    mean: np.ndarray
    log_sd: np.ndarray
    seed: int | None = None

    @property
    def sd(self) -> np.ndarray:
        return np.exp(self.log_sd)


@dataclass
class FitReport:
    elbo: float
    steps: int
    lr: float
    elbo_trace: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    r_hat: np.ndarray | None = field(repr=False, default=None)
    converged: bool | None = None

    @property
    def max_r_hat(self) -> float | None:
        return None if self.r_hat is None or self.r_hat.size == 0 else float(np.max(self.r_hat))


@dataclass
class PosteriorSamples:
    spec: ModelSpec
    draws: np.ndarray
    seed: int | None = None
    acceptance: float | None = None

    @property
    def S(self) -> int:
        return self.draws.shape[0]


def _block_noise(gens: Sequence[np.random.Generator], blocks: Sequence[slice], n: int, dim: int, antithetic: bool = False) -> np.ndarray:
    """Standard-normal noise per latent block; ``antithetic`` pairs each row with its negation."""
    half = n // 2 if antithetic else 0
    eps = np.empty((n, dim))
    for gen, sl in zip(gens, blocks):
        width = sl.stop - sl.start
        if width:
            eps[half:, sl] = gen.standard_normal((n - half, width))
    if half:
        eps[:half] = -eps[half : 2 * half]
    return eps


def _blocks(spec: ModelSpec) -> list[slice]:
    idx = spec.index
    return [idx.rate_slice, idx.method_slice, idx.hyper_slice]


def _block_gens(seed: int, base: int, n_blocks: int = 3) -> list[np.random.Generator]:
    return [RngStream(seed, base + b).generator() for b in range(n_blocks)]


def elbo_and_grad(spec: ModelSpec, lik: CellLikelihood, mean: np.ndarray, log_sd: np.ndarray, eps: np.ndarray):
    """Reparameterized ELBO estimate and its gradient at fixed noise ``eps`` (shape mc x dim)."""
    sd = np.exp(log_sd)
    theta = mean[None, :] + sd[None, :] * eps
    val, grad = log_joint_and_grad(spec, theta, lik)
    entropy = float(log_sd.sum()) + 0.5 * mean.size * (1.0 + math.log(2 * math.pi))
    g_mean = grad.mean(axis=0)
    g_log_sd = (grad * eps).mean(axis=0) * sd + 1.0
    return float(val.mean()) + entropy, g_mean, g_log_sd


def recenter_ridge(spec: ModelSpec, mean: np.ndarray, tol: float = 1e-12, max_iter: int = 1000) -> np.ndarray:
    """Move variational means to the ELBO optimum along the likelihood-flat directions.

    Within a group, lowering every log-rate by ``c`` and raising both method
    effects by ``c`` leaves all Poisson means unchanged, so only the Normal
    priors see ``c``. Their expectation is quadratic in the means, and the
    optimal shift (jointly with the hyper-means for the hierarchical model)
    is found exactly by coordinate ascent.
    """
    if not spec.uses_method:
        return mean
    idx = spec.index
    k = spec.k
    out = np.array(mean, dtype=float)
    rate = out[idx.rate_slice].reshape(k, -1)  # one row per group; views into ``out``
    psi = out[idx.method_slice].reshape(N_METHODS, k)
    mu = out[idx.hyper_slice] if spec.hierarchical_method else np.zeros(N_METHODS)
    n_rate = rate.shape[1]
    for _ in range(max_iter):
        c = (rate.sum(axis=1) - (psi - mu[:, None]).sum(axis=0)) / (n_rate + N_METHODS)
        rate -= c[:, None]
        psi += c
        shift = np.abs(c).max()
        if spec.hierarchical_method:
            new_mu = psi.sum(axis=1) / (k + 1)
            shift = max(shift, np.abs(new_mu - mu).max())
            mu[:] = new_mu
        else:
            break
        if shift < tol:
            break
    return out


def fit_svi(
    spec: ModelSpec,
    observations: Observations | CellLikelihood | None,
    steps: int = 5000,
    lr: float = 0.01,
    mc_samples: int = 8,
    seed: int = 0,
    average_fraction: float = 0.2,
    smooth_window: int = 100,
    antithetic: bool = True,
    recenter: bool = True,
) -> tuple[VariationalParams, FitReport]:
    """Maximize the ELBO with Adam at a fixed learning rate.

    With ``antithetic`` the ``mc_samples`` noise rows come in (eps, -eps)
    pairs, which cancels the odd-order part of the gradient noise. With
    ``recenter`` the final means are moved along the directions the
    likelihood cannot see (see :func:`recenter_ridge`).

    The returned variational parameters are the average of the Adam iterates
    over the final ``average_fraction`` of the steps, which removes the
    constant-step-size jitter without changing the optimum.
    """
    lik = observations if isinstance(observations, CellLikelihood) else CellLikelihood(spec, observations)
    if lik.spec != spec:
        raise ValueError("likelihood was built for a different model")
    dim = spec.index.size
    mean = np.zeros(dim)
    log_sd = np.full(dim, INIT_LOG_SD)
    m1 = np.zeros((2, dim))
    m2 = np.zeros((2, dim))
    blocks = _blocks(spec)
    gens = _block_gens(seed, _SVI_STREAM)
    n_avg = int(round(steps * average_fraction))
    avg_start = steps - n_avg
    acc_mean = np.zeros(dim)
    acc_log_sd = np.zeros(dim)
    trace = np.empty(steps)
    for t in range(1, steps + 1):
        eps = _block_noise(gens, blocks, mc_samples, dim, antithetic)
        elbo, g_mean, g_log_sd = elbo_and_grad(spec, lik, mean, log_sd, eps)
        if not math.isfinite(elbo) or not np.all(np.isfinite(g_mean)) or not np.all(np.isfinite(g_log_sd)):
            raise NonFiniteELBO(f"non-finite ELBO at step {t}")
        trace[t - 1] = elbo
        g = np.stack([g_mean, g_log_sd])
        m1 = ADAM_B1 * m1 + (1 - ADAM_B1) * g
        m2 = ADAM_B2 * m2 + (1 - ADAM_B2) * g * g
        step = lr * (m1 / (1 - ADAM_B1**t)) / (np.sqrt(m2 / (1 - ADAM_B2**t)) + ADAM_EPS)
        mean = mean + step[0]
        log_sd = log_sd + step[1]
        if t > avg_start:
            acc_mean += mean
            acc_log_sd += log_sd
    if n_avg:
        mean, log_sd = acc_mean / n_avg, acc_log_sd / n_avg
    if recenter:
        mean = recenter_ridge(spec, mean)
    vp = VariationalParams(spec, mean, log_sd, seed=seed)
    final = estimate_elbo(vp, lik, n_samples=256, seed=seed) if steps else float("nan")
    return vp, FitReport(elbo=final, steps=steps, lr=lr, elbo_trace=smooth_trace(trace, smooth_window))


def estimate_elbo(vp: VariationalParams, lik: CellLikelihood, n_samples: int = 256, seed: int = 0) -> float:
    eps = _block_noise(_block_gens(seed, _DRAW_STREAM + 50), _blocks(vp.spec), n_samples, vp.mean.size)
    return elbo_and_grad(vp.spec, lik, vp.mean, vp.log_sd, eps)[0]


def smooth_trace(trace: np.ndarray, window: int) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    n = trace.size // window
    if n == 0:
        return trace.copy()
    return trace[: n * window].reshape(n, window).mean(axis=1)


def sample_posterior(vp: VariationalParams, S: int, seed: int = 0) -> PosteriorSamples:
    """``S`` draws from the mean-field Gaussian; a log-sd of -inf yields a point mass."""
    if S < 1:
        raise ValueError("S must be >= 1")
    eps = _block_noise(_block_gens(seed, _DRAW_STREAM), _blocks(vp.spec), S, vp.mean.size)
    sd = np.exp(vp.log_sd)
    return PosteriorSamples(vp.spec, vp.mean[None, :] + sd[None, :] * eps, seed=seed)


# ---------------------------------------------------------------------------
# Oracles


@dataclass(frozen=True)
class QuadratureResult:
    mean_log: float
    sd_log: float
    mean_rate: float
    sd_rate: float
    nodes: int


def _quad_moments(grid: np.ndarray, logpost: np.ndarray):
    w = np.full(grid.size, grid[1] - grid[0])
    w[[0, -1]] *= 0.5
    logw = logpost + np.log(w)
    log_z = logsumexp(logw)
    p = np.exp(logw - log_z)
    m = float(p @ grid)
    v = float(p @ (grid - m) ** 2)
    lam = np.exp(grid)
    mr = float(p @ lam)
    vr = float(p @ (lam - mr) ** 2)
    return np.array([m, math.sqrt(v), mr, math.sqrt(vr)])


def quadrature_oracle_1d(
    y_list: Sequence[int],
    prior_mean: float = 0.0,
    prior_sd: float = 5.0,
    lo: float = -60.0,
    hi: float = 20.0,
    nodes: int = 10_001,
    tol: float = 1e-6,
    max_nodes: int = 2**22,
) -> QuadratureResult:
    """Posterior moments of a single Poisson log-rate with a Normal prior by trapezoid quadrature.

    A first pass locates the region where the log posterior is within 60 nats
    of its maximum; the grid is then restricted to it and doubled until the
    moments change by less than ``tol``.
    """
    y = np.asarray(list(y_list), dtype=float)
    s, n = float(y.sum()), float(y.size)

    def logpost(x):
        return s * x - n * np.exp(x) - 0.5 * ((x - prior_mean) / prior_sd) ** 2

    coarse = np.linspace(lo, hi, nodes)
    lp = logpost(coarse)
    keep = np.flatnonzero(lp > lp.max() - 60.0)
    step = coarse[1] - coarse[0]
    a = max(lo, coarse[keep[0]] - step)
    b = min(hi, coarse[keep[-1]] + step)
    count = nodes
    grid = np.linspace(a, b, count)
    prev = _quad_moments(grid, logpost(grid))
    while count < max_nodes:
        count = 2 * count - 1
        grid = np.linspace(a, b, count)
        cur = _quad_moments(grid, logpost(grid))
        if np.all(np.abs(cur - prev) <= tol * np.maximum(1.0, np.abs(cur))):
            return QuadratureResult(*cur.tolist(), nodes=count)
        prev = cur
    raise RuntimeError(f"quadrature did not stabilise within {max_nodes} nodes")


def mh_sample(
    spec: ModelSpec,
    observations: Observations | CellLikelihood | None,
    iterations: int = 20_000,
    seed: int = 0,
    burn_in: int | None = None,
    thin: int = 1,
) -> PosteriorSamples:
    """Gaussian random-walk Metropolis on the unconstrained latent vector.

    During burn-in the proposal is a diagonal Gaussian whose per-coordinate
    scales track the running posterior spread and whose global factor is
    tuned towards an acceptance rate of 0.3; it is frozen afterwards.
    """
    lik = observations if isinstance(observations, CellLikelihood) else CellLikelihood(spec, observations)
    dim = spec.index.size
    if dim > 500:
        raise ValueError(f"Metropolis oracle limited to 500 latents, model has {dim}")
    burn_in = iterations if burn_in is None else burn_in
    rng = RngStream(seed, 7).generator()

    def target(x):
        return lik.loglik(x) + log_prior_and_grad(spec, x)[0]

    x = _laplace_start(spec, lik)
    scale = np.full(dim, 0.1)
    log_global = math.log(2.38 / math.sqrt(dim))
    lp = target(x)
    run_mean, run_sq, run_n = x.copy(), np.zeros(dim), 1
    accepted = 0
    kept = []
    window_acc = 0
    for it in range(burn_in + iterations):
        prop = x + math.exp(log_global) * scale * rng.standard_normal(dim)
        lp_prop = target(prop)
        if math.log(rng.random()) < lp_prop - lp:
            x, lp = prop, lp_prop
            if it >= burn_in:
                accepted += 1
            else:
                window_acc += 1
        if it < burn_in:
            run_n += 1
            delta = x - run_mean
            run_mean += delta / run_n
            run_sq += delta * (x - run_mean)
            if (it + 1) % 100 == 0:
                rate = window_acc / 100.0
                log_global += (rate - 0.3) * min(1.0, 10.0 / math.sqrt((it + 1) / 100.0))
                window_acc = 0
                if run_n > 500:
                    scale = np.sqrt(np.maximum(run_sq / (run_n - 1), 1e-10))
        elif (it - burn_in) % thin == 0:
            kept.append(x.copy())
    acceptance = accepted / max(iterations, 1)
    if not 0.05 <= acceptance <= 0.7:
        raise RuntimeError(f"Metropolis acceptance {acceptance:.3f} outside [0.05, 0.7] after adaptation")
    return PosteriorSamples(spec, np.array(kept), seed=seed, acceptance=acceptance)


def _laplace_start(spec: ModelSpec, lik: CellLikelihood) -> np.ndarray:
    # start each observed log-rate at its empirical log-mean so burn-in is short
    x = np.zeros(spec.index.size)
    if lik.n.size:
        tot_y = np.bincount(lik.rate_pos, weights=lik.sum_y, minlength=spec.index.n_rate)
        tot_n = np.bincount(lik.rate_pos, weights=lik.n, minlength=spec.index.n_rate)
        seen = tot_n > 0
        x[: spec.index.n_rate][seen] = np.log(np.maximum(tot_y[seen], 0.5) / tot_n[seen])
    return x


# ---------------------------------------------------------------------------
# Convergence


def r_hat(chains) -> np.ndarray | float:
    """Split-R-hat. ``chains`` has shape (n_chains, n_draws) or (n_chains, n_draws, n_params)."""
    arr = np.asarray(chains, dtype=float)
    scalar = arr.ndim == 2
    if scalar:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise ValueError("need at least two chains of equal length")
    if arr.shape[1] < 4:
        raise ValueError("each chain needs at least 4 draws")
    half = arr.shape[1] // 2
    split = np.concatenate([arr[:, :half], arr[:, arr.shape[1] - half :]], axis=0)
    n = split.shape[1]
    chain_means = split.mean(axis=1)
    w = split.var(axis=1, ddof=1).mean(axis=0)
    b = n * chain_means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(var_plus / w)
    out = np.where(var_plus <= 0, 1.0, out)
    out = np.where((w <= 0) & (var_plus > 0), np.inf, out)
    return float(out[0]) if scalar else out


def r_hat_ragged(chains: Sequence[Sequence[float]]) -> float:
    lengths = {len(c) for c in chains}
    if len(lengths) != 1:
        raise ValueError(f"chains have mismatched lengths {sorted(lengths)}")
    return r_hat(np.asarray(chains, dtype=float))


def convergence_gate(fits: Sequence[VariationalParams], S: int = 1000, seed: int = 0, threshold: float = R_HAT_GATE) -> FitReport:
    """Split-R-hat per latent across independently seeded fits.

    Each fit contributes one "chain" of ``S`` draws from its variational
    distribution. All fits reuse the same standard-normal noise, so the
    statistic measures disagreement between the fits rather than sampling
    noise.
    """
    if len(fits) < 2:
        raise ValueError("convergence gate needs at least two fits")
    spec = fits[0].spec
    if any(f.spec != spec for f in fits):
        raise ValueError("fits must share the same model")
    chains = np.stack([sample_posterior(f, S, seed=seed).draws for f in fits])
    rh = r_hat(chains)
    mx = float(np.max(rh)) if rh.size else 1.0
    return FitReport(elbo=float("nan"), steps=0, lr=0.0, r_hat=rh, converged=bool(mx < threshold))


# ---------------------------------------------------------------------------
# Fitted-model artifact


def fits_to_json(fits: Sequence[VariationalParams], reports: Sequence[FitReport], grouping: str, steps: int, lr: float, gate: FitReport | None = None) -> str:
    spec = fits[0].spec
    names = spec.index.names
    doc = {
        "version": ARTIFACT_VERSION,
        "model": spec.id,
        "grouping": grouping,
        "k": spec.k,
        "seeds": [f.seed for f in fits],
        "steps": steps,
        "lr": lr,
        "max_r_hat": None if gate is None else gate.max_r_hat,
        "converged": None if gate is None else gate.converged,
        "fits": [
            {
                "seed": f.seed,
                "elbo": r.elbo,
                "latents": [{"name": n, "mean": float(mu), "log_sd": float(ls)} for n, mu, ls in zip(names, f.mean, f.log_sd)],
            }
            for f, r in zip(fits, reports)
        ],
    }
    return json.dumps(doc, indent=1)


def fits_from_json(text: str) -> tuple[dict, list[VariationalParams]]:
    doc = json.loads(text)
    if doc.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"unsupported artifact version {doc.get('version')}")
    spec = ModelSpec(doc["model"], doc["k"])
    names = spec.index.names
    fits = []
    for f in doc["fits"]:
        if [rec["name"] for rec in f["latents"]] != names:
            raise ValueError("latent layout in artifact does not match the model")
        fits.append(
            VariationalParams(
                spec,
                np.array([rec["mean"] for rec in f["latents"]]),
                np.array([rec["log_sd"] for rec in f["latents"]]),
                seed=f["seed"],
            )
        )
    header = {k: v for k, v in doc.items() if k != "fits"}
    return header, fits
