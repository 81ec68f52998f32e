"""Batch command-line interface.

Subcommands: fit, simulate, benchmark, sensitivity, predict.  Everything
structural lives in the JSON config; flags only override paths, seed, job
count and verbosity.  Exit codes: 0 success, 1 numerical failure, 2
configuration or data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report as report_io
from .blip import BlipError
from .compare import IpwMsmEstimator, OlsEstimator, PsRegressionEstimator
from .config import ConfigError, RunConfig, load_config
from .effects import CdeEstimator, RegimeMeanPredictor
from .expr import ExpressionError
from .gest import (GestError, IvGEstimator, LogisticSmmEstimator,
                   SdmGridEstimator, SensitivitySweep, SmmGEstimator,
                   SnmmGEstimator)
from .mestimation import MEstimationError
from .nuisance import NuisanceError
from .panel import PanelError, load_panel, write_panel
from .sim import get_scenario, monte_carlo, oracle_regime_mean
from .survival import SaftmGridEstimator

log = logging.getLogger("gestimate")

_CONFIG_ERRORS = (ConfigError, PanelError, ExpressionError)
_NUMERIC_ERRORS = (GestError, NuisanceError, MEstimationError, BlipError,
                   np.linalg.LinAlgError)


def _setup_logging():
    level = os.environ.get("GESTIMATE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(stream=sys.stderr, level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _load(cfg: RunConfig):
    panel = load_panel(cfg.data_path, cfg.panel_schema())
    log.info("loaded panel: %d subjects, K=%d, survival=%s",
             panel.n_subjects, panel.K, panel.survival)
    return panel


def _build_estimator(cfg: RunConfig):
    method = cfg.method
    est_cfg = cfg.estimator
    model = cfg.model
    if method in ("smm", "snmm", "iv", "logistic-smm", "cde", "sdm-grid") \
            and cfg.data.get("survival", False):
        raise ConfigError(f"method {method!r} needs mean-mode data")
    if method == "saftm" and not cfg.data.get("survival", False):
        raise ConfigError("method 'saftm' needs survival-mode data "
                          "(data.survival = true with event/censor columns)")

    known, known_scale = cfg.known_propensity()
    prop = cfg.propensity()
    common = dict(propensity_features=prop["features"],
                  propensity_family=prop["family"],
                  known_propensity=known, known_propensity_scale=known_scale,
                  outcome_features=cfg.outcome_features(),
                  center_outcome=bool(model.get("center_outcome", True)))
    if method in ("smm", "snmm"):
        cls = SmmGEstimator if method == "smm" else SnmmGEstimator
        return cls(cfg.blip_spec(), solver=est_cfg.get("solver", "auto"),
                   max_iter=int(est_cfg.get("max_iter", 100)),
                   tol=float(est_cfg.get("tol", 1e-8)), **common)
    if method == "sdm-grid":
        return SdmGridEstimator(cfg.sndm_spec(), cfg.grid_spec(),
                                level=float(est_cfg.get("level", 0.95)),
                                d_features=None, **common)
    if method == "saftm":
        levels = model.get("treatment_levels")
        return SaftmGridEstimator(
            cfg.saftm_spec(), cfg.grid_spec(),
            level=float(est_cfg.get("level", 0.95)),
            alpha=float(est_cfg.get("alpha", 0.05)),
            propensity_features=prop["features"],
            propensity_family=prop["family"],
            known_propensity=known, known_propensity_scale=known_scale,
            outcome_features=cfg.outcome_features(),
            treatment_levels=tuple(levels) if levels else None)
    if method == "iv":
        flat_out = (cfg.outcome_features() or {}).get(0, ())
        return IvGEstimator(cfg.blip_spec(),
                            instrument_features=tuple(model.get("instrument_features", ())),
                            propensity_family=prop["family"],
                            outcome_features=flat_out,
                            center_outcome=bool(model.get("center_outcome", True)))
    if method == "logistic-smm":
        flat_out = (cfg.outcome_features() or {}).get(0, ())
        return LogisticSmmEstimator(
            cfg.blip_spec(),
            propensity_features=prop["features"],
            outcome_mean_features=tuple(model.get("outcome_mean_features", ())),
            outcome_features=flat_out,
            center_outcome=bool(model.get("center_outcome", True)))
    if method == "cde":
        return CdeEstimator(cfg.cde_spec(),
                            propensity_features=(prop["features"] or {}).get(0, ()),
                            mediator_features=tuple(model.get("mediator_features", ())),
                            mediator_family=model.get("mediator_family",
                                                      "bernoulli-logit"),
                            residual_features=tuple(model.get("residual_features", ())))
    raise ConfigError(f"unhandled method {method!r}")


def _result_payload(est, method: str) -> dict:
    res = est.result_
    payload = res.to_dict()
    payload["method"] = method
    return payload


def _write_confidence_set(est, outdir: Path):
    cset = getattr(est, "confidence_set_", None)
    if cset is None:
        return
    p = cset.grid.shape[1]
    rows = []
    for i in range(len(cset.grid)):
        row = {f"psi_{j}": cset.grid[i, j] for j in range(p)}
        row["statistic"] = cset.statistic[i]
        stat = cset.statistic[i]
        row["accepted"] = bool(np.isfinite(stat) and stat <= cset.threshold)
        rows.append(row)
    report_io.write_csv(rows, outdir / "confidence_set.csv")


def cmd_fit(cfg: RunConfig, outdir: Path) -> int:
    panel = _load(cfg)
    est = _build_estimator(cfg)
    est.fit(panel)
    payload = _result_payload(est, cfg.method)
    payload["n_subjects"] = panel.n_subjects
    report_io.write_json(payload, outdir / "report.json")
    _write_confidence_set(est, outdir)
    log.info("fit done: psi = %s", est.psi_)
    return 0


def cmd_simulate(cfg: RunConfig, outdir: Path) -> int:
    sc_cfg = cfg.scenario
    if "name" not in sc_cfg:
        raise ConfigError("scenario.name is required for simulate")
    scenario = get_scenario(sc_cfg["name"], **sc_cfg.get("overrides", {}))
    n = int(sc_cfg.get("n", 1000))
    panel, truth = scenario.generate(n, cfg.seed)
    write_panel(panel, outdir / "panel.csv")
    payload = {
        "scenario": scenario.name,
        "n": n,
        "seed": cfg.seed,
        "psi_star": np.asarray(scenario.psi_star),
        "target": np.asarray(scenario.target),
        "baseline": {k: np.asarray(v) for k, v in truth.get("baseline", {}).items()},
    }
    for key, val in truth.items():
        if key not in ("baseline",):
            payload[key] = np.asarray(val)
    report_io.write_json(payload, outdir / "truth.json")
    return 0


def cmd_benchmark(cfg: RunConfig, outdir: Path) -> int:
    sc_cfg = cfg.scenario
    if "name" not in sc_cfg:
        raise ConfigError("scenario.name is required for benchmark")
    scenario = get_scenario(sc_cfg["name"], **sc_cfg.get("overrides", {}))
    n = int(sc_cfg.get("n", 1000))
    reps = int(sc_cfg.get("reps", 100))
    which = sc_cfg.get("estimators", "all")
    estimators = {"matched": scenario.estimator()}
    if which == "all":
        estimators.update(scenario.comparators())
    rejection = sc_cfg.get("rejection_psi")
    summary = monte_carlo(scenario, estimators, n=n, reps=reps, seed=cfg.seed,
                          jobs=cfg.jobs,
                          rejection_psi=np.asarray(rejection, dtype=float)
                          if rejection is not None else None)
    payload = summary.to_dict()
    law = scenario.law()
    if law is not None:
        payload["analytic"] = law.to_dict()
    report_io.write_json(payload, outdir / "report.json")

    rows = []
    for name, s in summary.estimators.items():
        for j in range(len(s.mean)):
            row = {
                "estimator": name, "param": j, "mean": s.mean[j],
                "bias": s.mean_bias[j], "empirical_sd": s.empirical_sd[j],
                "se_mc": s.se_mc[j], "mean_sandwich_se": s.mean_se[j],
                "coverage": s.coverage[j],
            }
            if law is not None:
                row["analytic_sd_gest"] = float(np.sqrt(law.var_gest / n))
                row["analytic_sd_ipw"] = float(np.sqrt(law.var_ipw / n))
                row["analytic_var_ratio"] = law.ratio
                base = summary.estimators.get("matched")
                ipw = summary.estimators.get("ipw")
                if base is not None and ipw is not None:
                    row["empirical_var_ratio"] = float(
                        ipw.empirical_sd[0] ** 2 / base.empirical_sd[0] ** 2)
            rows.append(row)
    report_io.write_csv(rows, outdir / "benchmark.csv")
    return 0


def cmd_sensitivity(cfg: RunConfig, outdir: Path) -> int:
    panel = _load(cfg)
    model = cfg.model
    prop = cfg.propensity()
    sweep = SensitivitySweep(cfg.blip_spec(), cfg.sensitivity_spec(),
                             propensity_features=prop["features"],
                             outcome_features=cfg.outcome_features(),
                             center_outcome=bool(model.get("center_outcome", True)))
    sweep.fit(panel)
    rows = []
    payload = {"method": "sensitivity", "results": []}
    for gamma, res in sweep.results_:
        payload["results"].append({"gamma": gamma, **res.to_dict()})
        for j in range(len(res.psi)):
            rows.append({"gamma": gamma, "param": j, "psi": res.psi[j],
                         "se": res.se[j], "converged": res.converged})
    report_io.write_json(payload, outdir / "report.json")
    report_io.write_csv(rows, outdir / "sensitivity.csv")
    return 0


def cmd_predict(cfg: RunConfig, outdir: Path) -> int:
    panel = _load(cfg)
    base = _build_estimator(cfg)
    if not isinstance(base, (SmmGEstimator, SnmmGEstimator)):
        raise ConfigError("prediction needs a mean-model method (smm or snmm)")
    predictor = RegimeMeanPredictor(
        base, cfg.regime(),
        inner_features=tuple(cfg.predict.get("inner_features", ())),
        n_boot=int(cfg.predict.get("n_boot", 200)), seed=cfg.seed)
    predictor.fit(panel)
    payload = {
        "method": "predict-regime-mean",
        "regime": {"a0": cfg.regime().a0, "a1": cfg.regime().a1},
        "prediction": predictor.prediction_,
        "se": predictor.se_,
        "n_boot": int(cfg.predict.get("n_boot", 200)),
        "flags": predictor.flags_,
    }
    report_io.write_json(payload, outdir / "report.json")
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "benchmark": cmd_benchmark,
    "sensitivity": cmd_sensitivity,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="gestimate",
        description="G-estimation of structural nested models")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel workers for Monte Carlo commands")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--output", default=None, help="override output directory")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output is not None:
            cfg.output_dir = args.output
        outdir = Path(cfg.output_dir)
        outdir.mkdir(parents=True, exist_ok=True)
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    try:
        return _COMMANDS[args.command](cfg, outdir)
    except _CONFIG_ERRORS as exc:
        report_io.write_json({"error": type(exc).__name__, "message": str(exc)},
                             outdir / "error.json")
        print(f"configuration/data error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        report_io.write_json({"error": type(exc).__name__, "message": str(exc)},
                             outdir / "error.json")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        report_io.write_json({"error": type(exc).__name__, "message": str(exc)},
                             outdir / "error.json")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
