"""Command line entry point: ``authpeer <command> [options]``.

Exit status: 0 success, 1 bad or missing input, 2 a fit failed the R-hat
gate, 3 internal error. Set ``AUTHPEER_LOG`` (e.g. ``DEBUG``) for logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline as pl
from .models import MODEL_IDS


def _csv_list(choices, upper: bool = False):
    def parse(text: str) -> list[str]:
        items = [t.strip().upper() if upper else t.strip().lower() for t in text.split(",") if t.strip()]
        if [t.lower() for t in items] == ["all"]:
            return list(choices)
        bad = [t for t in items if t not in choices]
        if bad:
            raise argparse.ArgumentTypeError(f"unknown value(s) {bad}; choose from {list(choices)} or 'all'")
        return items

    return parse


class _Parser(argparse.ArgumentParser):
    # usage errors are bad input; status 2 is reserved for the R-hat gate
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(pl.EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="working/output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--seed", type=int, default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--events", type=Path, help="authentication events (JSONL or CSV)")
    data.add_argument("--format", dest="event_format", choices=["jsonl", "csv"], default="jsonl")
    data.add_argument("--train-days", type=int, default=20)
    data.add_argument("--test-days", type=int, default=7)
    data.add_argument("--min-train-obs", type=int, default=10)

    group = argparse.ArgumentParser(add_help=False)
    group.add_argument("--grouping", dest="groupings", type=_csv_list(pl.GROUPINGS), default=list(pl.GROUPINGS), help="comma list or 'all'")
    group.add_argument("--hr", type=Path, help="HR table CSV (user,division)")
    group.add_argument("--k-max", type=int, default=16)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", dest="models", type=_csv_list(MODEL_IDS, upper=True), default=list(MODEL_IDS), help="comma list or 'all'")
    model.add_argument("--steps", type=int, default=5000)
    model.add_argument("--lr", type=float, default=0.01)
    model.add_argument("--seeds", dest="n_seeds", type=int, default=2, help="independent SVI runs per fit")
    model.add_argument("--draws", type=int, default=4000)
    model.add_argument("--jobs", type=int, default=1)

    det = argparse.ArgumentParser(add_help=False)
    det.add_argument("--alpha", type=float, default=0.01)
    det.add_argument("--truth", type=Path, help="ground-truth JSON from 'simulate'")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--scenario", type=Path, help="scenario configuration JSON")

    p = _Parser(prog="authpeer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common, sim], help="generate a synthetic scenario")
    sub.add_parser("ingest", parents=[common, data], help="parse, aggregate and split events")
    sub.add_parser("cluster", parents=[common, group], help="form peer groups")
    sub.add_parser("fit", parents=[common, group, model], help="fit models with the R-hat gate")
    sub.add_parser("detect", parents=[common, group, model, det], help="flag anomalous test hours")
    sub.add_parser("evaluate", parents=[common, group, model, det], help="WAIC, residual tests, labeled metrics")
    sub.add_parser("report", parents=[common], help="print the alert-rate and WAIC tables")
    run = sub.add_parser("run", parents=[common, data, group, model, det, sim], help="the whole pipeline")
    run.add_argument("--simulate", action="store_true", help="simulate a scenario into --out first")
    return p


def config_from_args(args: argparse.Namespace) -> pl.PipelineConfig:
    fields = pl.PipelineConfig.__dataclass_fields__
    kwargs = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    cfg = pl.PipelineConfig(**kwargs)
    # files written by 'simulate' are picked up implicitly
    for attr, name in (("hr", "hr.csv"), ("truth", "truth.json")):
        if getattr(cfg, attr) is None and (cfg.out / name).exists() and args.command != "run":
            setattr(cfg, attr, cfg.out / name)
    return cfg


def _dispatch(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    cfg.validate()
    cmd = args.command
    if cmd == "run":
        return pl.run_pipeline(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cmd == "simulate":
        pl.step_simulate(cfg)
    elif cmd == "ingest":
        pl.step_ingest(cfg)
    elif cmd == "cluster":
        pl.step_cluster(cfg)
    elif cmd == "fit":
        if not pl.step_fit(cfg):
            return pl.EXIT_CONVERGENCE
    elif cmd == "detect":
        pl.step_detect(cfg)
    elif cmd == "evaluate":
        pl.step_evaluate(cfg)
    elif cmd == "report":
        sys.stdout.write(pl.step_report(cfg))
    return pl.EXIT_OK


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("AUTHPEER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (pl.PipelineInputError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"authpeer: error: {exc}", file=sys.stderr)
        return pl.EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).exception("internal error")
        print(f"authpeer: internal error: {exc}", file=sys.stderr)
        return pl.EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
