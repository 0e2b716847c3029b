"""Command-line interface: ``dro-opf {validate,solve,sweep,eval,mpc,synth}``.

Exit codes: 0 success, 2 invalid input (case, dataset, flags), 3 solve failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assembler import RiskConfig
from .dro import ForecastDataset, SupportPolytope
from .estimators import DroOpfEstimator, GaussianOpfEstimator
from .evaluation import (
    SWEEP_COLUMNS,
    SyntheticErrorConfig,
    out_of_sample_eval,
    split_dataset,
    subsample,
    synth_errors,
    tradeoff_sweep,
)
from .io import (
    RunManifest,
    load_case,
    load_dataset,
    policy_from_dict,
    policy_to_dict,
    save_dataset,
    shipped_case_path,
    support_from_case_file,
    write_json,
    write_records_csv,
)
from .mpc import MpcConfig, PersistenceForecast, ProfileForecast, mpc_run
from .network import NetworkCase, validate_case
from .qp import QpSolveError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_SOLVE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def parse_grid(text: str) -> list[float]:
    """``"0,0.04,0.08"`` or a log grid ``"log:lo:hi:count"``."""
    text = text.strip()
    if text.startswith("log:"):
        try:
            _, lo, hi, count = text.split(":")
            return np.geomspace(float(lo), float(hi), int(count)).tolist()
        except ValueError as exc:
            raise ValueError(f"bad log grid {text!r}, expected log:lo:hi:count") from exc
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"bad grid {text!r}: {exc}") from exc
    if not vals:
        raise ValueError("empty grid")
    return vals


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--case", type=Path, default=None, help="case JSON (default: shipped case118.json)")
    if data:
        p.add_argument("--data", type=Path, help="CSV of forecast-error samples")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--ground-norm", choices=["1", "inf"], default="1")
    p.add_argument("--monitored-lines", help="comma-separated line names such as 8-9; overrides the case")
    p.add_argument("--same-step-recourse", action="store_true", default=None,
                   help="let inputs react to the current step's error")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)


def _train_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-size", type=int)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--eval-data", type=Path, help="separate evaluation CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dro-opf", description="Data-driven distributionally robust stochastic OPF")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check a case (and optionally a dataset)")
    _common(p)

    p = sub.add_parser("solve", help="solve one DRO OPF instance")
    _common(p)
    _train_eval(p)
    p.add_argument("--gaussian", action="store_true", help="solve the Gaussian baseline instead")
    p.add_argument("--n-synthetic", type=int, default=1000)

    p = sub.add_parser("sweep", help="cost/risk tradeoff over rho and epsilon grids")
    _common(p)
    _train_eval(p)
    p.add_argument("--rho-grid", required=True)
    p.add_argument("--eps-grid", default="0")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--gaussian", action="store_true", help="add Gaussian baseline rows")
    p.add_argument("--n-synthetic", type=int, default=1000)
    p.add_argument("--n-jobs", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a saved solution on held-out samples")
    _common(p)
    p.add_argument("--solution", type=Path, required=True)

    p = sub.add_parser("mpc", help="closed-loop rolling-horizon run")
    _common(p, data=False)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--mode", choices=["receding", "shrinking"], default="receding")
    p.add_argument("--forecast", choices=["profile", "persistence"], default="profile")
    p.add_argument("--disturbances", type=Path, help="CSV with one realized error row per step")
    p.add_argument("--training", type=Path, help="CSV of window error samples (n_xi*horizon columns)")

    p = sub.add_parser("synth", help="write synthetic leptokurtic forecast errors")
    p.add_argument("--sigma", type=float, default=300.0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--weight", type=float, default=0.4)
    p.add_argument("--scale-ratio", type=float, default=6.0)
    p.add_argument("--time-correlation", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _load_case(args) -> tuple[NetworkCase, Path]:
    path = args.case or shipped_case_path()
    case = load_case(path)
    changes = {}
    if args.monitored_lines:
        changes["monitored_lines"] = tuple(s.strip() for s in args.monitored_lines.split(",") if s.strip())
    if args.same_step_recourse:
        changes["same_step_recourse"] = True
    return (dataclasses.replace(case, **changes) if changes else case), path


def _risk(args) -> RiskConfig:
    return RiskConfig(alpha=args.alpha, rho=args.rho, epsilon=args.epsilon, ground_norm=args.ground_norm)


def _manifest(args, case_path, data_path=None, **settings) -> dict:
    risk = dataclasses.asdict(_risk(args)) if hasattr(args, "rho") else {}
    return RunManifest.for_inputs(
        case_path, data_path, risk=risk, seeds={"seed": args.seed}, settings=settings
    ).as_dict()


def _train_and_eval(args, data: ForecastDataset) -> tuple[ForecastDataset, ForecastDataset | None]:
    """Split off the evaluation set first, then draw the training subsample from the rest."""
    if args.eval_data is not None:
        eval_set = load_dataset(args.eval_data, expected_dim=data.dim)
        pool = data
    elif args.eval_size:
        pool, eval_set = split_dataset(data, args.eval_size, seed=args.seed)
    else:
        pool, eval_set = data, None
    if args.train_size is not None and args.train_size > pool.n_samples:
        raise ValueError(f"--train-size {args.train_size} exceeds the {pool.n_samples} available samples")
    return pool, eval_set


def _emit(args, doc: dict) -> None:
    if args.out:
        write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def _support(args, case_path: Path, dim: int) -> SupportPolytope | None:
    sup = support_from_case_file(case_path, dim)
    return None if sup.H.shape[0] == 0 else sup


def cmd_validate(args) -> int:
    case, path = _load_case(args)
    model = validate_case(case)
    doc = {
        "case": case.name,
        "buses": len(case.buses),
        "lines": len(case.lines),
        "devices": len(case.devices),
        "injections": len(case.injections),
        "horizon": case.T,
        "n_xi": case.N_xi,
        "monitored": model.monitored_labels(),
    }
    if args.data:
        data = load_dataset(args.data, expected_dim=model.xi_dim)
        doc["samples"] = data.n_samples
    _emit(args, doc)
    return EXIT_OK


def _require_data(args) -> Path:
    if args.data is None:
        raise ValueError("--data is required")
    return args.data


def cmd_solve(args) -> int:
    case, case_path = _load_case(args)
    model = validate_case(case)
    data = load_dataset(_require_data(args), expected_dim=model.xi_dim)
    pool, eval_set = _train_and_eval(args, data)
    train = subsample(pool, args.train_size, np.random.default_rng(args.seed))
    if args.gaussian:
        est = GaussianOpfEstimator(model=model, alpha=args.alpha, rho=args.rho, ground_norm=args.ground_norm,
                                   n_synthetic=args.n_synthetic, random_state=args.seed)
    else:
        est = DroOpfEstimator(model=model, alpha=args.alpha, rho=args.rho, epsilon=args.epsilon,
                              ground_norm=args.ground_norm, support=_support(args, case_path, model.xi_dim))
    est.fit(train.samples)
    doc = {
        "manifest": _manifest(args, case_path, args.data, train_size=train.n_samples, gaussian=args.gaussian),
        "status": est.solution_.status.status,
        "objective": est.objective_,
        "cost_term": est.cost_term_,
        "dro_term": est.dro_term_,
        "risk_rows": est.row_labels,
        "tau": est.solution_.tau,
        "predicted_cvar": est.predicted_cvar_,
        "kkt": est.solution_.kkt.as_dict(),
        "policy": policy_to_dict(est.policy_, [d.id for d in case.devices], case.T, case.N_xi),
    }
    if eval_set is not None:
        doc["evaluation"] = out_of_sample_eval(model, est.policy_, eval_set, args.alpha, seed=args.seed).as_dict()
    _emit(args, doc)
    return EXIT_OK


def cmd_sweep(args) -> int:
    case, case_path = _load_case(args)
    model = validate_case(case)
    data = load_dataset(_require_data(args), expected_dim=model.xi_dim)
    pool, eval_set = _train_and_eval(args, data)
    rho_grid, eps_grid = parse_grid(args.rho_grid), parse_grid(args.eps_grid)
    out_csv = args.out or Path("sweep.csv")
    records = []
    failed = 0
    try:
        for trial in range(args.trials):
            recs = tradeoff_sweep(
                model, pool, args.alpha, rho_grid, eps_grid, eval_set, train_size=args.train_size,
                trial=trial, seed=args.seed, include_gaussian=args.gaussian, n_synthetic=args.n_synthetic,
                ground_norm=args.ground_norm, n_jobs=args.n_jobs,
            )
            records.extend(recs)
            failed += sum(r.status == "failed" for r in recs)
            write_records_csv(out_csv, [r.as_dict() for r in records], SWEEP_COLUMNS)
    finally:
        write_records_csv(out_csv, [r.as_dict() for r in records], SWEEP_COLUMNS)
        summary = {
            "manifest": _manifest(args, case_path, args.data, rho_grid=rho_grid, eps_grid=eps_grid,
                                  trials=args.trials, train_size=args.train_size, gaussian=args.gaussian),
            "points": len(records),
            "failed": failed,
            "columns": SWEEP_COLUMNS,
        }
        write_json(out_csv.with_suffix(".json"), summary)
    logger.info("wrote %d sweep records to %s", len(records), out_csv)
    return EXIT_SOLVE if failed else EXIT_OK


def cmd_eval(args) -> int:
    case, case_path = _load_case(args)
    model = validate_case(case)
    data = load_dataset(_require_data(args), expected_dim=model.xi_dim)
    doc = json.loads(args.solution.read_text())
    _, policy = policy_from_dict(doc.get("policy", doc), same_step_recourse=case.same_step_recourse)
    report = out_of_sample_eval(model, policy, data, args.alpha, seed=args.seed)
    _emit(args, {"manifest": _manifest(args, case_path, args.data, solution=str(args.solution)),
                 "evaluation": report.as_dict()})
    return EXIT_OK


def cmd_mpc(args) -> int:
    case, case_path = _load_case(args)
    dist = None
    if args.disturbances:
        dist = load_dataset(args.disturbances, expected_dim=case.N_xi).samples[: args.steps]
        if dist.shape[0] < args.steps:
            raise ValueError(f"--disturbances has {dist.shape[0]} rows, need {args.steps}")
    training = None
    if args.training:
        training = load_dataset(args.training, expected_dim=case.N_xi * args.horizon).samples
    forecast = PersistenceForecast(case) if args.forecast == "persistence" else ProfileForecast(case)
    cfg = MpcConfig(case, args.horizon, args.steps, dist, training, _risk(args), forecast, args.mode)
    trace = mpc_run(cfg)
    out = args.out or Path("mpc.csv")
    trace.write_csv(out)
    summary = trace.summary()
    summary["manifest"] = _manifest(args, case_path, args.disturbances, horizon=args.horizon, steps=args.steps,
                                    mode=args.mode, forecast=args.forecast)
    write_json(out.with_suffix(".json"), summary)
    if not trace.completed:
        logger.error("MPC run stopped: %s", trace.error)
        return EXIT_SOLVE
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SyntheticErrorConfig(sigma=args.sigma, dim=args.dim, weight=args.weight, scale_ratio=args.scale_ratio,
                               time_correlation=args.time_correlation, seed=args.seed)
    save_dataset(synth_errors(cfg, args.count), args.out)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "mpc": cmd_mpc,
    "synth": cmd_synth,
}


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"dro-opf: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except QpSolveError as exc:
        print(f"dro-opf: solve failed: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except (ValueError, OSError) as exc:
        print(f"dro-opf: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
