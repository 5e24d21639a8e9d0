"""``pfpe run|sweep|analyze|baird`` command-line front end."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import AnalysisConfig, ApproximatorConfig, EnvironmentConfig, ExperimentConfig, build_problem
from .errors import ConfigError, Diverged
from .spectral import analyze, analyze_synthetic
from .td_engine import FITTED_ERROR_CONVENTION, TRACE_HEADER, RunConfig, StepSizeSchedule, run_pfpe

EXIT_OK = 0
EXIT_ALL_DIVERGED = 2
EXIT_CONFIG = 64
EXIT_IO = 74

SWEEP_HEADER = ("k", "alpha", "seed", "td_error_norm", "dist_to_fixed_point", "param_norm", "diverged", "steps",
                "condition_value", "predicted_stable", "agrees")

log = logging.getLogger("pfpe")


def _setup_logging():
    level = os.environ.get("PFPE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def atomic_write(path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    return ExperimentConfig.loads(text)


def _config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.dumps().encode()).hexdigest()[:12]


# workers (module level so they pickle)

def _run_seed(cfg_json: str, seed: int, run_overrides: dict | None = None):
    cfg = ExperimentConfig.loads(cfg_json)
    rc = replace(cfg.run, seed=seed, **(run_overrides or {}))
    prob = build_problem(cfg, seed)
    try:
        trace = run_pfpe(prob.mdp, prob.approx, prob.d, prob.mu, prob.pi, rc, prob.omega0)
    except Diverged as exc:
        trace = exc.trace
    return trace


def _map(fn, args_list, jobs: int):
    if jobs <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


# commands

def run_traces(cfg: ExperimentConfig, jobs: int = 1):
    text = cfg.dumps()
    return _map(_run_seed, [(text, s) for s in cfg.seeds], jobs)


def trace_rows(traces, cfg: ExperimentConfig):
    digest = _config_digest(cfg)
    for trace in traces:
        yield from trace.rows(run_id=f"{digest}-s{trace.seed}")


def _sidecar(cfg: ExperimentConfig, extra=None) -> str:
    doc = {"config": cfg.to_json(), "version": f"pfpe-{__version__}+cfg.{_config_digest(cfg)}",
           "fitted_error_convention": FITTED_ERROR_CONVENTION}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)


def cmd_run(cfg: ExperimentConfig, out, jobs: int = 1) -> int:
    traces = run_traces(cfg, jobs)
    atomic_write(out, _csv_text(TRACE_HEADER, trace_rows(traces, cfg)))
    n_div = sum(t.diverged for t in traces)
    atomic_write(str(out) + ".json", _sidecar(cfg, {"diverged_seeds": [t.seed for t in traces if t.diverged]}))
    log.info("wrote %s (%d seeds, %d diverged)", out, len(traces), n_div)
    return EXIT_ALL_DIVERGED if n_div == len(traces) else EXIT_OK


def _predict(cfg: ExperimentConfig, k: int, alpha: float):
    prob = build_problem(cfg, cfg.seeds[0])
    an = cfg.analysis or AnalysisConfig()
    center = an.center if an.center is not None else prob.omega0
    rep = analyze(prob.mdp, prob.approx, prob.d, prob.mu, prob.pi, alpha, k, center=center, radius=an.radius,
                  n_region=an.samples, sigma_delta=0.0, importance_weighting=prob.importance_weighting,
                  gamma=cfg.run.gamma)
    return rep.condition_value, rep.predicted_stable


def sweep_rows(cfg: ExperimentConfig, jobs: int = 1):
    if cfg.sweep is None:
        raise ConfigError("config has no sweep section")
    text = cfg.dumps()
    cells, preds = [], {}
    for k in cfg.sweep.k:
        for alpha in cfg.sweep.alpha:
            preds[(k, alpha)] = _predict(cfg, k, alpha)
            n_updates = max(1, cfg.sweep.total_steps // k) if cfg.sweep.total_steps else cfg.run.n_target_updates
            for seed in cfg.seeds:
                cells.append((k, alpha, seed, n_updates))
    traces = _map(_run_seed, [(text, s, {"k": k, "n_target_updates": n, "schedule": _with_alpha(cfg.run, a)})
                              for k, a, s, n in cells], jobs)
    rows, agree = [], 0
    for (k, alpha, seed, _), tr in zip(cells, traces):
        cond, stable = preds[(k, alpha)]
        ok = stable == (not tr.diverged)
        agree += ok
        rows.append((k, alpha, seed, tr.td_error_norm[-1], tr.dist_to_fixed_point[-1], tr.param_norm[-1],
                     int(tr.diverged), tr.steps[-1], cond, int(stable), int(ok)))
    rate = agree / len(rows) if rows else float("nan")
    rows.append(("summary", "", "", "", "", "", "", "", "", "", rate))
    return rows


def _with_alpha(rc: RunConfig, alpha: float) -> StepSizeSchedule:
    return replace(rc.schedule, alpha=alpha)


def cmd_sweep(cfg: ExperimentConfig, out, jobs: int = 1) -> int:
    rows = sweep_rows(cfg, jobs)
    atomic_write(out, _csv_text(SWEEP_HEADER, rows))
    atomic_write(str(out) + ".json", _sidecar(cfg))
    cells = rows[:-1]
    return EXIT_ALL_DIVERGED if cells and all(r[6] for r in cells) else EXIT_OK


def analysis_report(cfg: ExperimentConfig):
    an = cfg.analysis or AnalysisConfig()
    alpha = cfg.run.schedule.alpha
    if an.synthetic is not None:
        s = an.synthetic
        return analyze_synthetic(float(s.get("alpha", alpha)), int(s.get("k", cfg.run.k)), float(s.get("lambda", 1.0)),
                                 float(s["j_td_norm"]), float(s["j_fpe_norm"]), an.sigma_delta)
    prob = build_problem(cfg, cfg.seeds[0])
    center = an.center if an.center is not None else prob.omega0
    return analyze(prob.mdp, prob.approx, prob.d, prob.mu, prob.pi, alpha, cfg.run.k, center=center,
                   radius=an.radius, n_region=an.samples, sigma_delta=an.sigma_delta,
                   importance_weighting=prob.importance_weighting, gamma=cfg.run.gamma, seed=cfg.seeds[0])


def curve_path(out) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".curve.csv")


def cmd_analyze(cfg: ExperimentConfig, out, jobs: int = 1) -> int:
    rep = analysis_report(cfg)
    k_max = (cfg.analysis or AnalysisConfig()).k_max
    atomic_write(out, rep.to_json(indent=2, sort_keys=True))
    atomic_write(curve_path(out), _csv_text(("k", "condition_value"), rep.condition_curve(k_max)))
    return EXIT_OK


def baird_config(k: int, alpha: float, gamma: float, steps: int, seeds) -> ExperimentConfig:
    rc = RunConfig(StepSizeSchedule.constant(alpha), k, max(1, steps // k), importance_weighting=True)
    return ExperimentConfig(EnvironmentConfig("baird", gamma), ApproximatorConfig("linear", "baird"), rc,
                            tuple(seeds))


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds list: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfpe", description="Partially fitted policy evaluation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "analyze"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--seeds", default=None, help="comma-separated seeds overriding the config")
    bp = sub.add_parser("baird", help="Baird counterexample preset")
    bp.add_argument("--k", type=int, default=500)
    bp.add_argument("--alpha", type=float, default=0.01)
    bp.add_argument("--gamma", type=float, default=0.99)
    bp.add_argument("--steps", type=int, default=100_000, help="total inner steps per seed")
    bp.add_argument("--out", required=True)
    bp.add_argument("--jobs", type=int, default=1)
    bp.add_argument("--seeds", default="0,1,2,3,4")
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "baird":
            cfg = baird_config(args.k, args.alpha, args.gamma, args.steps, _parse_seeds(args.seeds))
            return cmd_run(cfg, args.out, args.jobs)
        cfg = load_config(args.config)
        if args.seeds:
            cfg = cfg.with_seeds(_parse_seeds(args.seeds))
        handler = {"run": cmd_run, "sweep": cmd_sweep, "analyze": cmd_analyze}[args.command]
        return handler(cfg, args.out, args.jobs)
    except ConfigError as exc:
        print(f"pfpe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"pfpe: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
