"""Command line interface.

Subcommands: simulate, fit, select, forecast, study.  Configuration is an
INI file with [model], [fit], [select], [study], and [forecast] sections;
unknown keys or sections are errors.  Exit codes: 0 ok, 1 usage or config
error, 2 data error, 3 numerical failure.  HTAR_THREADS caps study
parallelism.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys

import numpy as np

from htar.als import FitConfig, fit_als
from htar.experiments import StudySpec, run_misspec_study, run_scaling_study
from htar.forecast import rolling_forecast
from htar.io import ParseError, load_model, read_series, save_model, write_series
from htar.model import NoiseSpec, random_model, simulate
from htar.selection import SelectionConfig, select_model

__all__ = ["main"]


class ConfigError(ValueError):
    pass


_KNOWN_KEYS = {
    "model": {
        "dims", "lag", "y_orders", "y_ranks", "x_orders", "x_ranks",
        "noise", "noise_scale", "noise_rho", "target_rho",
        "length", "burn_in", "seed",
    },
    "fit": {"max_sweeps", "rel_loss_tol", "restarts", "init", "ridge_eps", "seed"},
    "select": {"y_candidates", "x_candidates", "phi", "v_max", "l_max", "lag", "seed"},
    "study": {
        "replications", "seed", "noises", "train_length", "test_length", "grid",
    },
    "forecast": {"refit_sweeps"},
}


def _load_config(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is None:
        return parser
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file {path} not found")
    parser.read(path)
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    return parser


def _get(cfg, section, key, cast, default):
    if not cfg.has_section(section) or key not in cfg[section]:
        return default
    raw = cfg[section][key]
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key} = {raw!r}: {exc}") from exc


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split())


def _parse_order_list(raw: str) -> list[tuple[int, ...]]:
    groups = [g.strip() for g in raw.split(";") if g.strip()]
    return [_parse_int_list(g) for g in groups]


def _structures(cfg, side: str):
    orders = _get(cfg, "model", f"{side}_orders", _parse_order_list, None)
    ranks = _get(cfg, "model", f"{side}_ranks", _parse_order_list, None)
    if orders is None or ranks is None:
        raise ConfigError(f"[model] needs {side}_orders and {side}_ranks")
    if len(orders) != len(ranks):
        raise ConfigError(
            f"{side}_orders has {len(orders)} stacks but {side}_ranks has {len(ranks)}"
        )
    return list(zip(orders, ranks))


def _fit_config(cfg, seed_override: int | None) -> FitConfig:
    config = FitConfig(
        max_sweeps=_get(cfg, "fit", "max_sweeps", int, 200),
        rel_loss_tol=_get(cfg, "fit", "rel_loss_tol", float, 1e-7),
        restarts=_get(cfg, "fit", "restarts", int, 3),
        init=_get(cfg, "fit", "init", str, "random"),
        ridge_eps=_get(cfg, "fit", "ridge_eps", float, 1e-10),
        seed=_get(cfg, "fit", "seed", int, 0),
    )
    if config.init not in ("random", "spectral"):
        raise ConfigError(f"[fit] init must be random or spectral, got {config.init!r}")
    if seed_override is not None:
        config.seed = seed_override
    return config


def _noise_spec(cfg) -> NoiseSpec:
    return NoiseSpec(
        _get(cfg, "model", "noise", str, "iid_gaussian"),
        rho=_get(cfg, "model", "noise_rho", float, 0.5),
        scale=_get(cfg, "model", "noise_scale", float, 1.0),
    )


def _cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    dims = _get(cfg, "model", "dims", _parse_int_list, None)
    if dims is None:
        raise ConfigError("[model] dims is required")
    lag = _get(cfg, "model", "lag", int, 1)
    seed = args.seed if args.seed is not None else _get(cfg, "model", "seed", int, 0)
    model = random_model(
        dims,
        lag,
        y_structure=_structures(cfg, "y"),
        x_structure=_structures(cfg, "x"),
        noise=_noise_spec(cfg),
        target_rho=_get(cfg, "model", "target_rho", float, 0.8),
        seed=seed,
    )
    series = simulate(
        model,
        length=_get(cfg, "model", "length", int, 500),
        burn_in=_get(cfg, "model", "burn_in", int, 200),
        seed=seed + 1,
    )
    write_series(args.out, series)
    print(f"wrote {len(series)} records of dims {dims} to {args.out}")
    return 0


def _write_report_csv(path: str, trajectory) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep", "loss"])
        for sweep, value in enumerate(trajectory):
            writer.writerow([sweep, f"{value:.12g}"])
    os.replace(tmp, path)


def _cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    series = read_series(args.data)
    lag = _get(cfg, "model", "lag", int, 1)
    model, report = fit_als(
        series,
        _structures(cfg, "y"),
        _structures(cfg, "x"),
        lag=lag,
        config=_fit_config(cfg, args.seed),
    )
    save_model(args.out, model)
    if args.report:
        _write_report_csv(args.report, report.loss_trajectory)
    print(
        f"fit: loss={report.final_loss:.6g} sweeps={report.sweeps_used} "
        f"converged={report.converged} d={report.d} bic={report.bic:.6g}"
    )
    return 0


def _cmd_select(args) -> int:
    cfg = _load_config(args.config)
    series = read_series(args.data)
    y_cand = _get(cfg, "select", "y_candidates", _parse_order_list, None)
    x_cand = _get(cfg, "select", "x_candidates", _parse_order_list, None)
    if y_cand is None or x_cand is None:
        raise ConfigError("[select] needs y_candidates and x_candidates")
    seed = args.seed if args.seed is not None else _get(cfg, "select", "seed", int, 0)
    base_fit = _fit_config(cfg, None)
    sel = SelectionConfig(
        phi=_get(cfg, "select", "phi", float, 1.0),
        v_max=_get(cfg, "select", "v_max", int, 10),
        l_max=_get(cfg, "select", "l_max", int, 3),
        weak_config=base_fit,
        full_config=base_fit,
        seed=seed,
    )
    lag = _get(cfg, "select", "lag", int, None)
    result = select_model(series, y_cand, x_cand, config=sel, lag=lag)
    if result.model is None:
        print("selected the empty model (no dynamics); nothing to save")
        return 0
    save_model(args.out, result.model)
    print(f"lag: {result.model.lag}")
    for side, spec in (
        ("response", result.model.response_spec),
        ("predictor", result.model.predictor_spec),
    ):
        for stack in spec.stacks:
            print(
                f"{side}: order={stack.order.perm} ranks={stack.profile.ranks}"
            )
    print(f"bic: {result.bic:.6g}")
    return 0


def _cmd_forecast(args) -> int:
    cfg = _load_config(args.config)
    series = read_series(args.data)
    model = load_model(args.model)
    y_structure = [(st.order, st.profile) for st in model.response_spec.stacks]
    x_structure = [(st.order, st.profile) for st in model.predictor_spec.stacks]
    fit_cfg = _fit_config(cfg, args.seed)
    fit_cfg.init = model
    fit_cfg.restarts = 1
    report = rolling_forecast(
        series,
        args.split,
        y_structure,
        x_structure,
        lag=model.lag,
        config=fit_cfg,
        refit_sweeps=_get(cfg, "forecast", "refit_sweeps", int, 5),
    )
    tmp = f"{args.out}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "sq_error", "abs_error"])
        for i, (sq, ab) in enumerate(
            zip(report.squared_errors, report.absolute_errors)
        ):
            writer.writerow([args.split + i, f"{sq:.12g}", f"{ab:.12g}"])
    os.replace(tmp, args.out)
    print(f"msfe: {report.msfe:.6g}")
    print(f"mafe: {report.mafe:.6g}")
    return 0


def _cmd_study(args) -> int:
    cfg = _load_config(args.config)
    kind = args.kind if args.kind != "scaling" else f"scaling-{args.setting}"
    if args.kind == "scaling" and args.setting is None:
        raise ConfigError("study scaling needs --setting a|b|c")
    seed = args.seed if args.seed is not None else _get(cfg, "study", "seed", int, 0)
    spec = StudySpec(
        kind=kind,
        replications=_get(cfg, "study", "replications", int, 20),
        seed=seed,
        noise_kinds=_get(
            cfg, "study", "noises", lambda s: tuple(s.split()),
            ("iid_uniform", "iid_gaussian", "correlated_gaussian"),
        ),
        grid=_get(cfg, "study", "grid", _parse_int_list, None),
        train_length=_get(cfg, "study", "train_length", int, 800),
        test_length=_get(cfg, "study", "test_length", int, 300),
        output=args.out,
    )
    if kind == "misspec":
        result = run_misspec_study(spec)
    else:
        result = run_scaling_study(spec)
    print(f"wrote {len(result.rows)} rows to {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htar",
        description="Supervised factor models for hierarchical tensor time series",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a series from a random model")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=_cmd_simulate)

    fit = sub.add_parser("fit", help="fit with fixed hyperparameters")
    fit.add_argument("--data", required=True)
    fit.add_argument("--config", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--report", default=None)
    fit.add_argument("--seed", type=int, default=None)
    fit.set_defaults(func=_cmd_fit)

    sel = sub.add_parser("select", help="boosted hyperparameter selection")
    sel.add_argument("--data", required=True)
    sel.add_argument("--config", required=True)
    sel.add_argument("--out", required=True)
    sel.add_argument("--seed", type=int, default=None)
    sel.set_defaults(func=_cmd_select)

    fc = sub.add_parser("forecast", help="rolling one-step forecast evaluation")
    fc.add_argument("--data", required=True)
    fc.add_argument("--model", required=True)
    fc.add_argument("--split", type=int, required=True)
    fc.add_argument("--out", required=True)
    fc.add_argument("--config", default=None)
    fc.add_argument("--seed", type=int, default=None)
    fc.set_defaults(func=_cmd_forecast)

    study = sub.add_parser("study", help="run a simulation study")
    study.add_argument("kind", choices=["scaling", "misspec"])
    study.add_argument("--setting", choices=["a", "b", "c"], default=None)
    study.add_argument("--config", default=None)
    study.add_argument("--out", required=True)
    study.add_argument("--seed", type=int, default=None)
    study.set_defaults(func=_cmd_study)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, ParseError):
            print(f"error: {args.data if hasattr(args, 'data') else ''}: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
