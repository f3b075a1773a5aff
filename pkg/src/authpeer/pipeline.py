"""File-based pipeline steps: simulate, ingest, cluster, fit, detect, evaluate, report.

Each step reads the previous step's files from the output directory and
writes its own, so ``run_pipeline`` is exactly the chain of individual steps.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


from . import clustering as cl
from .detect import AnomalyReport, alert_rate, detect
from .evaluate import labeled_metrics, posterior_mean_rates, quantile_residuals, residual_diagnostics, residual_series_by_user, waic
from .graph import AdjacencyMatrix, build_adjacency, user_embedding
from .inference import convergence_gate, fit_svi, fits_from_json, fits_to_json, sample_posterior
from .ingest import Dataset, filter_events, aggregate_hourly, parse_events, read_counts_csv, split_and_prune, write_counts_csv
from .models import MODEL_IDS, CellLikelihood, ModelSpec, build_observations
from .synth import GroundTruth, ScenarioConfig, generate_scenario

logger = logging.getLogger(__name__)

GROUPINGS = tuple(m.value for m in cl.GroupingMethod)
EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_INTERNAL = 0, 1, 2, 3


class PipelineInputError(Exception):
    """Missing or invalid input; maps to exit status 1."""


@dataclass
class PipelineConfig:
    out: Path
    events: Path | None = None
    hr: Path | None = None
    truth: Path | None = None
    scenario: Path | None = None
    simulate: bool = False
    event_format: str = "jsonl"
    train_days: int = 20
    test_days: int = 7
    min_train_obs: int = 10
    groupings: list[str] = field(default_factory=lambda: list(GROUPINGS))
    models: list[str] = field(default_factory=lambda: list(MODEL_IDS))
    steps: int = 5000
    lr: float = 0.01
    mc_samples: int = 8
    n_seeds: int = 2
    draws: int = 4000
    alpha: float = 0.01
    seed: int = 0
    jobs: int = 1
    force: bool = False
    k_max: int = 16

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise PipelineInputError("alpha must lie in (0, 1)")
        if self.n_seeds < 2:
            raise PipelineInputError("the convergence gate needs at least 2 seeds")
        bad = [g for g in self.groupings if g not in GROUPINGS]
        if bad:
            raise PipelineInputError(f"unknown grouping(s) {bad}")
        bad = [m for m in self.models if m not in MODEL_IDS]
        if bad:
            raise PipelineInputError(f"unknown model(s) {bad}")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_seeds)]


# ---------------------------------------------------------------------------
# file helpers


def atomic_write(path: Path, text: str, force: bool = True) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _require(path: Path) -> Path:
    if not Path(path).exists():
        raise PipelineInputError(f"missing input file {path}")
    return Path(path)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=False, allow_nan=True) + "\n"


def _round(x, digits: int = 10):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return round(float(x), digits)


# ---------------------------------------------------------------------------
# steps


def step_simulate(cfg: PipelineConfig) -> None:
    scenario_cfg = ScenarioConfig.from_json(_require(cfg.scenario).read_text()) if cfg.scenario else ScenarioConfig(seed=cfg.seed)
    scen = generate_scenario(scenario_cfg)
    buf = io.StringIO()
    scen.write_jsonl(buf)
    atomic_write(cfg.out / "events.jsonl", buf.getvalue(), cfg.force)
    atomic_write(cfg.out / "truth.json", scen.truth.to_json() + "\n", cfg.force)
    hr = io.StringIO()
    scen.write_hr_csv(hr)
    atomic_write(cfg.out / "hr.csv", hr.getvalue(), cfg.force)
    atomic_write(cfg.out / "scenario.json", scen.config.to_json() + "\n", cfg.force)
    cfg.events = cfg.events or cfg.out / "events.jsonl"
    cfg.hr = cfg.hr or cfg.out / "hr.csv"
    cfg.truth = cfg.truth or cfg.out / "truth.json"


def step_ingest(cfg: PipelineConfig) -> Dataset:
    events_path = _require(cfg.events or cfg.out / "events.jsonl")
    with open(events_path) as fh:
        parsed = parse_events(fh, cfg.event_format)
    events = filter_events(parsed.events)
    counts = aggregate_hourly(events)
    try:
        data = split_and_prune(counts, cfg.train_days, cfg.test_days, cfg.min_train_obs)
    except ValueError as exc:
        raise PipelineInputError(str(exc)) from None
    train_events = [e for e in events if e.timestamp < data.test_start and e.user in data.users]
    adj = build_adjacency(train_events)
    buf = io.StringIO()
    write_counts_csv(data.train, buf)
    atomic_write(cfg.out / "counts_train.csv", buf.getvalue(), cfg.force)
    buf = io.StringIO()
    write_counts_csv(data.test, buf)
    atomic_write(cfg.out / "counts_test.csv", buf.getvalue(), cfg.force)
    buf = io.StringIO()
    adj.to_csv(buf)
    atomic_write(cfg.out / "adjacency.csv", buf.getvalue(), cfg.force)
    summary = {
        "events_parsed": len(parsed.events),
        "malformed_lines": parsed.malformed,
        "events_retained": len(events),
        "users": len(data.users),
        "train_rows": len(data.train),
        "test_rows": len(data.test),
        "train_start": data.train_start.isoformat(),
        "test_start": data.test_start.isoformat(),
        "test_end": data.test_end.isoformat(),
    }
    atomic_write(cfg.out / "ingest.json", _dumps(summary), cfg.force)
    return data


def load_dataset(cfg: PipelineConfig) -> Dataset:
    with open(_require(cfg.out / "counts_train.csv")) as fh:
        train = read_counts_csv(fh)
    with open(_require(cfg.out / "counts_test.csv")) as fh:
        test = read_counts_csv(fh)
    return Dataset(train=train, test=test, users={r.user for r in train})


def user_series(rows) -> dict[str, list[int]]:
    """Per-user hourly totals across methods, in time order."""
    totals: dict[str, dict] = defaultdict(lambda: defaultdict(int))
    for r in rows:
        totals[r.user][r.bucket] += r.count
    return {u: [b[k] for k in sorted(b)] for u, b in totals.items()}


def make_grouping(method: str, data: Dataset, adj: AdjacencyMatrix, hr_table: dict | None, seed: int, k_max: int) -> cl.GroupAssignment:
    users = sorted(data.users)
    k_range = range(1, min(k_max, len(users) - 1) + 1)
    if method == "hr":
        if hr_table is None:
            logger.warning("no HR table supplied; every user falls into the unknown division")
        return cl.hr_grouping(hr_table or {}, users)
    if method == "ts":
        ts_users, feats = cl.ts_features({u: s for u, s in user_series(data.train).items() if u in data.users})
        fit, _ = cl.cluster_ts(feats, k_range, seed=seed)
        mapping = dict(zip(ts_users, fit.labels.tolist()))
        spare = fit.means.shape[0]
        # users too short for an AR fit share one extra group
        labels = [mapping.get(u, spare) for u in users]
        return cl.GroupAssignment.from_labels(cl.GroupingMethod.TS, users, labels)
    sub = adj.restrict_users(users)
    if sub.users != users:
        raise PipelineInputError("adjacency matrix does not cover every retained user")
    if method == "bicluster":
        k = cl.bicluster_select_k(sub, k_range, seed=seed)
        return cl.GroupAssignment.from_labels(cl.GroupingMethod.BICLUSTER, users, cl.bicluster(sub, k, seed=seed).tolist())
    emb = user_embedding(sub, seed=seed)
    if method == "kmeans":
        res, _ = cl.kmeans_elbow(emb.coords, k_range, seed=seed)
        return cl.GroupAssignment.from_labels(cl.GroupingMethod.KMEANS, users, res.labels.tolist())
    if method == "gmm":
        fit, _ = cl.gmm_em(emb.coords, k_range, seed=seed)
        return cl.GroupAssignment.from_labels(cl.GroupingMethod.GMM, users, fit.labels.tolist())
    raise PipelineInputError(f"unknown grouping {method!r}")


def step_cluster(cfg: PipelineConfig) -> dict[str, cl.GroupAssignment]:
    data = load_dataset(cfg)
    with open(_require(cfg.out / "adjacency.csv")) as fh:
        adj = AdjacencyMatrix.from_csv(fh)
    hr_table = None
    if cfg.hr is not None:
        with open(_require(cfg.hr)) as fh:
            hr_table = cl.read_hr_csv(fh)
    out = {}
    for method in cfg.groupings:
        ga = make_grouping(method, data, adj, hr_table, cfg.seed, cfg.k_max)
        buf = io.StringIO()
        ga.to_csv(buf)
        atomic_write(cfg.out / f"groups_{method}.csv", buf.getvalue(), cfg.force)
        logger.info("grouping %s: k=%d", method, ga.k)
        out[method] = ga
    return out


def load_grouping(cfg: PipelineConfig, method: str) -> cl.GroupAssignment:
    with open(_require(cfg.out / f"groups_{method}.csv")) as fh:
        return cl.GroupAssignment.from_csv(fh, cl.GroupingMethod(method))


def _fit_path(cfg: PipelineConfig, model: str, grouping: str) -> Path:
    return cfg.out / "fits" / f"{model}_{grouping}.json"


def _fit_one(args) -> tuple[str, str, str, bool]:
    cfg, model, grouping, k, train_rows_mapping = args
    rows, mapping = train_rows_mapping
    spec = ModelSpec(model, k)
    lik = CellLikelihood(spec, build_observations(rows, mapping))
    fits, reports = [], []
    for s in cfg.seeds:
        vp, rep = fit_svi(spec, lik, steps=cfg.steps, lr=cfg.lr, mc_samples=cfg.mc_samples, seed=s)
        fits.append(vp)
        reports.append(rep)
    gate = convergence_gate(fits, S=cfg.draws, seed=cfg.seed)
    text = fits_to_json(fits, reports, grouping, cfg.steps, cfg.lr, gate)
    return model, grouping, text, bool(gate.converged)


def step_fit(cfg: PipelineConfig) -> bool:
    """Fit every model x grouping; returns True when every fit passes the R-hat gate."""
    data = load_dataset(cfg)
    tasks = []
    cache_key = {}
    for grouping in cfg.groupings:
        ga = load_grouping(cfg, grouping)
        for model in cfg.models:
            spec = ModelSpec(model, ga.k)
            tasks.append((cfg, model, grouping, spec.k, (data.train, ga.mapping)))
            cache_key[(model, grouping)] = (model,) if not spec.uses_groups else (model, grouping)
    # models without groups give identical fits for every grouping
    unique, seen = [], {}
    for t in tasks:
        key = cache_key[(t[1], t[2])]
        if key not in seen:
            seen[key] = len(unique)
            unique.append(t)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_fit_one, unique))
    else:
        results = [_fit_one(t) for t in unique]
    all_ok = True
    for t in tasks:
        model, grouping = t[1], t[2]
        _, _, text, ok = results[seen[cache_key[(model, grouping)]]]
        if not ok:
            logger.warning("%s/%s failed the R-hat gate", model, grouping)
        all_ok &= ok
        doc = json.loads(text)
        doc["grouping"] = grouping
        atomic_write(_fit_path(cfg, model, grouping), json.dumps(doc, indent=1) + "\n", cfg.force)
    return all_ok


def load_fit(cfg: PipelineConfig, model: str, grouping: str):
    header, fits = fits_from_json(_require(_fit_path(cfg, model, grouping)).read_text())
    return header, fits


def step_detect(cfg: PipelineConfig) -> dict[str, dict[str, float]]:
    data = load_dataset(cfg)
    rates: dict[str, dict[str, float]] = {m: {} for m in cfg.models}
    chunks = []
    for grouping in cfg.groupings:
        ga = load_grouping(cfg, grouping)
        test_obs = build_observations(data.test, ga.mapping)
        for model in cfg.models:
            _, fits = load_fit(cfg, model, grouping)
            samples = sample_posterior(fits[0], cfg.draws, seed=cfg.seed)
            report = detect(samples, test_obs, grouping=grouping, alpha=cfg.alpha, n_draws=cfg.draws, seed=cfg.seed)
            rates[model][grouping] = _round(alert_rate(report))
            buf = io.StringIO()
            report.to_csv(buf, header=not chunks)
            chunks.append(buf.getvalue())
    atomic_write(cfg.out / "alerts.csv", "".join(chunks), cfg.force)
    atomic_write(cfg.out / "rates.json", _dumps({"alpha": cfg.alpha, "rates": rates}), cfg.force)
    return rates


def read_alerts(path: Path) -> dict[tuple[str, str], AnomalyReport]:
    import csv

    from .detect import AlertRow

    reports: dict[tuple[str, str], AnomalyReport] = defaultdict(AnomalyReport)
    with open(_require(path)) as fh:
        for r in csv.DictReader(fh):
            row = AlertRow(r["user"], r["bucket"], r["method"], int(r["group"]), int(r["observed"]), float(r["hpdi_upper"]), r["flagged"] == "1", r["model"], r["grouping"])
            reports[(row.model, row.grouping)].rows.append(row)
    return reports


def step_evaluate(cfg: PipelineConfig) -> list[dict]:
    data = load_dataset(cfg)
    reports = read_alerts(cfg.out / "alerts.csv")
    truth = None
    if cfg.truth is not None and Path(cfg.truth).exists():
        truth = GroundTruth.from_json(Path(cfg.truth).read_text())
    records = []
    waic_table: dict[str, dict[str, float]] = {m: {} for m in cfg.models}
    for grouping in cfg.groupings:
        ga = load_grouping(cfg, grouping)
        train_obs = build_observations(data.train, ga.mapping)
        for model in cfg.models:
            header, fits = load_fit(cfg, model, grouping)
            spec = fits[0].spec
            samples = sample_posterior(fits[0], cfg.draws, seed=cfg.seed)
            w = waic(samples, spec, train_obs)
            resid = quantile_residuals(train_obs.y, posterior_mean_rates(samples, spec, train_obs), seed=cfg.seed)
            diag = residual_diagnostics(residual_series_by_user(train_obs, resid))
            report = reports[(model, grouping)]
            rec = {
                "model": model,
                "grouping": grouping,
                "k": spec.k,
                "elpd_waic": _round(w.elpd_waic, 6),
                "lppd": _round(w.lppd, 6),
                "p_waic": _round(w.p_waic, 6),
                "jb_rejection_rate": _round(diag.jb_rejection_rate),
                "lb_rejection_rate": _round(diag.lb_rejection_rate),
                "alert_rate": _round(alert_rate(report)),
                "precision": None,
                "recall": None,
                "alert_rate_no_attack": None,
                "max_r_hat": _round(header.get("max_r_hat")),
                "converged": header.get("converged"),
            }
            if truth is not None:
                p, r = labeled_metrics(report.flagged_keys, truth.attacks)
                rec["precision"], rec["recall"] = _round(p), _round(r)
                rec["alert_rate_no_attack"] = _round(alert_rate(report, exclude=truth.attacks))
            waic_table[model][grouping] = rec["elpd_waic"]
            records.append(rec)
    atomic_write(cfg.out / "metrics.json", _dumps(records), cfg.force)
    atomic_write(cfg.out / "waic.json", _dumps(waic_table), cfg.force)
    return records


def _table(title: str, matrix: dict[str, dict], groupings: Sequence[str], fmt) -> str:
    lines = [f"## {title}", "", "| model | " + " | ".join(groupings) + " |", "|---" * (len(groupings) + 1) + "|"]
    for model, row in matrix.items():
        lines.append(f"| {model} | " + " | ".join(fmt(row.get(g)) for g in groupings) + " |")
    return "\n".join(lines) + "\n"


def step_report(cfg: PipelineConfig) -> str:
    records = json.loads(_require(cfg.out / "metrics.json").read_text())
    groupings = list(dict.fromkeys(r["grouping"] for r in records))
    rates, waics, ks = defaultdict(dict), defaultdict(dict), {}
    for r in records:
        rates[r["model"]][r["grouping"]] = r["alert_rate"]
        waics[r["model"]][r["grouping"]] = r["elpd_waic"]
        ks[r["grouping"]] = max(ks.get(r["grouping"], 1), r["k"])
    pct = lambda v: "-" if v is None else f"{100 * v:.2f}%"  # noqa: E731
    num = lambda v: "-" if v is None else f"{v:.1f}"  # noqa: E731
    text = _table("Alert rates on the test split", rates, groupings, pct)
    text += "| N groups | " + " | ".join(str(ks[g]) for g in groupings) + " |\n\n"
    text += _table("WAIC (elpd, higher is better) on the training split", waics, groupings, num)
    if any(r.get("recall") is not None for r in records):
        text += "\n" + _table(
            "Recall / precision against planted attacks",
            {m: {r["grouping"]: r for r in records if r["model"] == m} for m in rates},
            groupings,
            lambda r: "-" if r is None or r["recall"] is None else f"{r['recall']:.2f} / {'-' if r['precision'] is None else format(r['precision'], '.2f')}",
        )
    bad = [f"{r['model']}/{r['grouping']}" for r in records if r.get("converged") is False]
    text += f"\nR-hat gate failures: {', '.join(bad) if bad else 'none'}\n"
    atomic_write(cfg.out / "report.md", text, True)
    return text


def run_pipeline(cfg: PipelineConfig) -> int:
    """simulate? -> ingest -> cluster -> fit -> detect -> evaluate -> report; returns an exit status."""
    cfg.validate()
    cfg.out = Path(cfg.out)
    if cfg.out.exists() and any(cfg.out.iterdir()) and not cfg.force:
        raise FileExistsError(f"output directory {cfg.out} is not empty; pass --force to overwrite")
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cfg.simulate or (cfg.events is None and cfg.scenario is not None):
        step_simulate(cfg)
    elif cfg.events is None:
        raise PipelineInputError("no --events given and no simulation requested")
    converged = True
    for step in (step_ingest, step_cluster, step_fit, step_detect, step_evaluate, step_report):
        t0 = time.perf_counter()
        result = step(cfg)
        if step is step_fit:
            converged = result
        logger.info("%s finished in %.1f s", step.__name__, time.perf_counter() - t0)
    return EXIT_OK if converged else EXIT_CONVERGENCE
