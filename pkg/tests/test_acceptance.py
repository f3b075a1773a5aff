"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
under "acceptance criteria". The scenario runs are shared module fixtures.
"""

import io
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from authpeer import clustering as cl
from authpeer import pipeline as pl
from authpeer.detect import hpdi, posterior_predictive
from authpeer.evaluate import (
    jarque_bera,
    posterior_mean_rates,
    quantile_residuals,
    residual_diagnostics,
    residual_series_by_user,
    waic,
)
from authpeer.graph import AdjacencyMatrix, bicluster_normalize
from authpeer.inference import PosteriorSamples, convergence_gate, fit_svi, mh_sample, quadrature_oracle_1d, sample_posterior
from authpeer.ingest import aggregate_hourly, filter_events, parse_events, split_and_prune
from authpeer.models import ModelSpec, Observations, cell_positions
from authpeer.synth import ScenarioConfig, generate_scenario

pytestmark = pytest.mark.slow

MODELS = ["M1", "M2", "M3", "M4", "M5", "M6"]


# ---------------------------------------------------------------------------
# shared scenario runs


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    cfg = pl.PipelineConfig(out=out, seed=0)
    pl.step_simulate(cfg)
    truth = json.loads((out / "truth.json").read_text())
    true_hr = out / "true_groups.csv"
    true_hr.write_text("user,division\n" + "".join(f"{u},G{g}\n" for u, g in sorted(truth["groups"].items())))
    return out


def _run(out: Path, sim: Path, hr: Path, groupings) -> tuple[int, float]:
    cfg = pl.PipelineConfig(out=out, events=sim / "events.jsonl", hr=hr, truth=sim / "truth.json", groupings=list(groupings))
    t0 = time.perf_counter()
    rc = pl.run_pipeline(cfg)
    return rc, time.perf_counter() - t0


@pytest.fixture(scope="module")
def true_group_run(tmp_path_factory, simulated):
    out = tmp_path_factory.mktemp("truth") / "out"
    rc, seconds = _run(out, simulated, simulated / "true_groups.csv", ["hr", "gmm"])
    return out, rc, seconds


@pytest.fixture(scope="module")
def production_run(tmp_path_factory, simulated):
    out = tmp_path_factory.mktemp("prod") / "out"
    rc, seconds = _run(out, simulated, simulated / "hr.csv", pl.GROUPINGS)
    return out, rc, seconds


def _metrics(out: Path) -> dict[tuple[str, str], dict]:
    return {(r["model"], r["grouping"]): r for r in json.loads((out / "metrics.json").read_text())}


# ---------------------------------------------------------------------------
# 1. oracle equivalence


def _oracle_fixture(i: int):
    """Model id, spec, observations and the populated cells of fixture ``i``."""
    rng = np.random.default_rng(1000 + i)
    mid = MODELS[i % 4]
    k = {"M3": 3, "M4": 2}.get(mid, 1)
    spec = ModelSpec(mid, k)
    if mid == "M1":
        cells = [(0, 1, 0)]
    elif mid == "M3":
        cells = [(0, 1, g) for g in range(k)]
    else:
        picks = rng.choice(24 * 7 * k, size=3, replace=False)
        cells = [(int(p % 24), int(p // 24 % 7) + 1, int(p // 168)) for p in picks]
    parts = []
    for h, d, g in cells:
        n = int(rng.integers(50, 81))
        y = rng.poisson(rng.uniform(0.3, 20.0), n)
        parts.append(Observations.from_arrays(y, [h] * n, [d] * n, [g] * n, [1] * n))
    obs = parts[0]
    for p in parts[1:]:
        obs = obs.concat(p)
    return spec, obs


def test_c01_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    worst_quad, worst_mh, n_cells = 0.0, 0.0, 0
    prior = quadrature_oracle_1d([])
    for i in range(20):
        spec, obs = _oracle_fixture(i)
        vp, _ = fit_svi(spec, obs, seed=i)
        rate, _ = cell_positions(spec, obs)
        populated = set(rate.tolist())
        m1 = ModelSpec("M1", 1)
        for pos in range(spec.index.n_rate):
            n_cells += 1
            if pos not in populated:
                # no data: the cell's posterior is its prior
                worst_quad = max(worst_quad, abs(vp.mean[pos] - prior.mean_log))
                continue
            cell_obs = obs.subset(np.flatnonzero(rate == pos))
            q = quadrature_oracle_1d(cell_obs.y.tolist())
            mh = mh_sample(m1, cell_obs, iterations=5000, seed=i).draws[:, 0].mean()
            worst_quad = max(worst_quad, abs(vp.mean[pos] - q.mean_log))
            worst_mh = max(worst_mh, abs(mh - q.mean_log), abs(mh - vp.mean[pos]))
    seconds = time.perf_counter() - t0
    ok = worst_quad <= 0.05 and worst_mh <= 0.1 and seconds <= 120
    acceptance(1, ok, f"max |SVI - quadrature| = {worst_quad:.4f} over {n_cells} cells (<= 0.05); max MH gap = {worst_mh:.4f} (<= 0.1); {seconds:.0f} s (<= 120)")
    assert ok


# ---------------------------------------------------------------------------
# 2. HPDI


def exhaustive_hpdi(draws, alpha: float) -> tuple[float, float]:
    """Every (lower, upper) pair of draws holding enough mass; narrowest, then lowest."""
    x = np.sort(np.asarray(draws, dtype=float))
    n = x.size
    need = math.ceil((1 - Fraction(str(alpha))) * n)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    width = np.where(j - i + 1 >= need, x[j] - x[i], np.inf)
    best = width.min()
    lower = x[i[width == best]].min()
    return lower, lower + best


def test_c02_hpdi(acceptance):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 1001))
        if rng.random() < 0.5:
            draws = rng.poisson(rng.uniform(0.2, 30.0), n)
        else:
            draws = np.round(rng.gamma(2.0, 3.0, n), 2)
        alpha = float(rng.choice([0.01, 0.05, 0.1, 0.2, 0.5]))
        iv = hpdi(draws, alpha)
        lo, hi = exhaustive_hpdi(draws, alpha)
        mismatches += (iv.lower, iv.upper) != (lo, hi) and not (math.isclose(iv.lower, lo) and math.isclose(iv.upper, hi))
    spec = ModelSpec("M1", 1)
    point = PosteriorSamples(spec, np.full((4000, 1), math.log(5.0)))
    upper = hpdi(posterior_predictive(point, spec, (0, 1, 0, 1), n_draws=4000, seed=2), 0.01).upper
    above = float(np.mean(rng.poisson(5.0, 10_000) > upper))
    ok = mismatches == 0 and above <= 0.02
    acceptance(2, ok, f"{mismatches} mismatches vs exhaustive search in 100 fixtures; Poisson(5) exceedance {above:.4f} above {upper} (<= 0.02)")
    assert ok


# ---------------------------------------------------------------------------
# 3-5. true-group scenario run


def test_c03_alert_rate_ordering(acceptance, true_group_run):
    out, rc, seconds = true_group_run
    rates = json.loads((out / "rates.json").read_text())["rates"]
    r = {m: rates[m]["hr"] for m in MODELS}
    metrics = _metrics(out)
    quiet = {m: metrics[(m, "hr")]["alert_rate_no_attack"] for m in ("M4", "M5", "M6")}
    ok = r["M2"] < r["M1"] and r["M4"] <= r["M2"] and all(0.002 <= v <= 0.02 for v in quiet.values()) and seconds <= 600
    detail = ", ".join(f"{m} {r[m]:.4f}" for m in MODELS)
    acceptance(3, ok, f"alert rates {detail}; no-attack M4-M6 {', '.join(f'{v:.4f}' for v in quiet.values())} in [0.002, 0.02]; run {seconds:.0f} s (<= 600)")
    assert ok


def test_c04_waic_ordering(acceptance, true_group_run):
    out, _, _ = true_group_run
    elpd = {m: _metrics(out)[(m, "gmm")]["elpd_waic"] for m in MODELS}
    chain = ["M6", "M5", "M4", "M2", "M1"]
    ordered = all(elpd[a] >= elpd[b] for a, b in zip(chain, chain[1:]))
    spec = ModelSpec("M1", 1)
    fixture = waic(PosteriorSamples(spec, np.log([[1.0], [2.0]])), spec, Observations.from_arrays([0], [0], [1], [0], [1])).elpd_waic
    # closed form is -1.8798855; the printed constant -1.87988 is its truncation
    expected = math.log((math.exp(-1) + math.exp(-2)) / 2) - 0.5
    ok = ordered and abs(fixture - expected) <= 1e-9 and abs(fixture - (-1.87988)) < 1e-5
    acceptance(4, ok, "gmm elpd " + " >= ".join(f"{m} {elpd[m]:.3f}" for m in chain) + f"; fixture {fixture:.7f} vs closed form {expected:.7f} (1e-9)")
    assert ok


def test_c05_detection_power(acceptance, true_group_run):
    out, _, _ = true_group_run
    metrics = _metrics(out)
    vals = {m: (metrics[(m, "hr")]["recall"], metrics[(m, "hr")]["precision"]) for m in ("M4", "M5", "M6")}
    ok = all(r is not None and p is not None and r >= 0.9 and p >= 0.3 for r, p in vals.values())
    acceptance(5, ok, "; ".join(f"{m} recall {r:.3f} precision {p:.3f}" for m, (r, p) in vals.items()) + " (>= 0.9, >= 0.3)")
    assert ok


# ---------------------------------------------------------------------------
# 6. clustering recovery


def test_c06_clustering_recovery(acceptance, tmp_path):
    sc = tmp_path / "scenario.json"
    sc.write_text(ScenarioConfig(n_groups=4, users_per_group=25, seed=6).to_json())
    cfg = pl.PipelineConfig(out=tmp_path / "out", scenario=sc, groupings=["kmeans", "gmm", "bicluster"])
    cfg.out.mkdir()
    pl.step_simulate(cfg)
    pl.step_ingest(cfg)
    groups = pl.step_cluster(cfg)
    truth = json.loads((cfg.out / "truth.json").read_text())["groups"]
    scores = {m: cl.adjusted_rand_index(g, {u: truth[u] for u in g.mapping}) for m, g in groups.items()}
    single = bicluster_normalize(AdjacencyMatrix.from_edge_counts({("u", "t"): 4}))
    ok = all(v >= 0.9 for v in scores.values()) and single.tolist() == [[1.0]]
    acceptance(6, ok, ", ".join(f"{m} ARI {v:.3f} (k={groups[m].k})" for m, v in scores.items()) + f" (>= 0.9); [[4]] -> {single.tolist()}")
    assert ok


# ---------------------------------------------------------------------------
# 7. convergence gate


def test_c07_convergence_gate(acceptance, production_run):
    out, rc, _ = production_run
    metrics = _metrics(out)
    worst = max(r["max_r_hat"] for r in metrics.values())
    failing = sorted(f"{m}/{g}" for (m, g), r in metrics.items() if not r["converged"])
    ys = np.random.default_rng(7).poisson(3.0, 200)
    obs = Observations.from_arrays(ys, np.zeros(200), np.ones(200), np.zeros(200), np.ones(200))
    spec = ModelSpec("M1", 1)
    frozen, _ = fit_svi(spec, obs, steps=0, seed=0)
    fitted, _ = fit_svi(spec, obs, seed=1)
    gate = convergence_gate([frozen, fitted], S=4000)
    ok = rc == 0 and not failing and worst < 1.01 and not gate.converged
    acceptance(7, ok, f"{len(metrics)} production fits, max R-hat {worst:.4f} (< 1.01), failing {failing or 'none'}; frozen fixture R-hat {gate.max_r_hat:.2f} fails the gate")
    assert ok


# ---------------------------------------------------------------------------
# 8. residual diagnostics


def test_c08_diagnostics_calibration(acceptance):
    rng = np.random.default_rng(8)
    n_users, n_hours = 300, 336
    t = np.arange(n_hours)
    h, d = t % 24, (t // 24) % 7 + 1
    profile = np.exp(rng.normal(0.5, 0.8, (24, 8)))
    y = np.concatenate([rng.poisson(profile[h, d]) for _ in range(n_users)])
    obs = Observations.from_arrays(
        y, np.tile(h, n_users), np.tile(d, n_users), np.zeros(y.size), np.ones(y.size),
        user=[f"u{u:03d}" for u in range(n_users) for _ in t], bucket=list(t) * n_users,
    )
    spec = ModelSpec("M2", 1)
    vp, _ = fit_svi(spec, obs, seed=0)
    rates = posterior_mean_rates(sample_posterior(vp, 4000, seed=0), spec, obs)
    diag = residual_diagnostics(residual_series_by_user(obs, quantile_residuals(obs.y, rates, seed=0)))
    jb_fixture = jarque_bera([-1, 1, -1, 1])[0]
    ds_fixture = float(quantile_residuals([0], 1.0, u=np.array([0.5]))[0])
    ok = (
        0.02 <= diag.jb_rejection_rate <= 0.10
        and 0.02 <= diag.lb_rejection_rate <= 0.10
        and round(jb_fixture, 3) == 0.667
        and round(ds_fixture, 3) == -0.900
    )
    acceptance(8, ok, f"JB rejection {diag.jb_rejection_rate:.3f}, LB rejection {diag.lb_rejection_rate:.3f} over {diag.n_users} users (in [0.02, 0.10]); JB fixture {jb_fixture:.4f}; residual fixture {ds_fixture:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. ingest rules

FILTER_EVENTS = [
    ("2024-01-01T09:05:00Z", "alice", "srv1", "Kerberos", "success"),
    ("2024-01-01T09:10:00Z", "alice", "srv1", "kerberos", "success"),
    ("2024-01-01T09:15:00Z", "alice", "srv2", "kerberos", "success"),
    ("2024-01-01T09:20:00Z", "alice", "srv3", "NTLM", "success"),
    ("2024-01-01T09:25:00Z", "alice", "srv4", "kerberos", "failure"),
    ("2024-01-01T09:30:00Z", "alice", "srv5", "Negotiate", "success"),
    ("2024-01-01T09:35:00Z", "WKS01$", "srv1", "kerberos", "success"),
    ("2024-01-01T09:40:00Z", "ADMINISTRATOR", "srv1", "ntlm", "success"),
    ("2024-01-01T09:45:00Z", "administrator", "srv1", "ntlm", "success"),
    ("2024-01-01T09:50:00Z", "SYSTEM", "srv1", "kerberos", "success"),
    ("2024-01-01T10:00:00Z", "bob", "srv1", "ntlm", "success"),
]
EXPECTED_ROWS = [("alice", 9, "kerberos", 2), ("alice", 9, "ntlm", 1), ("bob", 10, "ntlm", 1)]


def _jsonl(events) -> io.StringIO:
    keys = ("ts", "user", "target", "method", "outcome")
    return io.StringIO("".join(json.dumps(dict(zip(keys, e))) + "\n" for e in events))


def test_c09_ingest_rules(acceptance):
    rows = aggregate_hourly(filter_events(parse_events(_jsonl(FILTER_EVENTS)).events))
    got = [(r.user, r.hour, r.method.value, r.count) for r in rows]
    # 27 days: "busy" active every day, "sparse" on 9 training days, "late" only in the test window
    events = []
    for day in range(27):
        stamp = f"2024-01-{day + 1:02d}T12:00:00Z"
        events.append((stamp, "busy", "srv", "kerberos", "success"))
        if day < 9:
            events.append((stamp, "sparse", "srv", "kerberos", "success"))
        if day >= 20:
            events.append((stamp, "late", "srv", "ntlm", "success"))
    counts = aggregate_hourly(filter_events(parse_events(_jsonl(events)).events))
    data = split_and_prune(counts, train_days=20, test_days=7, min_train_obs=10)
    split_ok = (
        data.users == {"busy"}
        and len(data.train) == 20
        and len(data.test) == 7
        and max(r.bucket for r in data.train).day == 20
        and min(r.bucket for r in data.test).day == 21
    )
    ok = got == EXPECTED_ROWS and split_ok
    acceptance(9, ok, f"filter fixture kept {got}; 27-day split train {len(data.train)} / test {len(data.test)} rows, retained users {sorted(data.users)}")
    assert ok


# ---------------------------------------------------------------------------
# 10. determinism


def test_c10_determinism(acceptance, true_group_run, simulated, tmp_path):
    first, _, _ = true_group_run
    again = tmp_path / "again"
    _run(again, simulated, simulated / "true_groups.csv", ["hr", "gmm"])
    names = ["metrics.json", "alerts.csv", "waic.json", "rates.json", "report.md"]
    same = {n: (first / n).read_bytes() == (again / n).read_bytes() for n in names}
    scenario_same = generate_scenario(ScenarioConfig(seed=0)).events() == generate_scenario(ScenarioConfig(seed=0)).events()
    ok = all(same.values()) and scenario_same
    acceptance(10, ok, "byte-identical rerun: " + ", ".join(f"{n} {'yes' if v else 'NO'}" for n, v in same.items()) + f"; scenario regenerated identically: {scenario_same}")
    assert ok
