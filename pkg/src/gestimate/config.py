"""Run configuration: schema-validated JSON, one file per run.

Model and estimator structure is too nested for command-line flags, so the
config file carries everything except paths, seed, parallelism and verbosity.
Unknown keys anywhere are errors (they usually mean a typo silently changing
the analysis).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .blip import BlipSpec, BlipTerm, SaftmSpec, SaftmTerm, SndmSpec
from .effects import CdeSpec, CdeTerm, RegimeSpec
from .gest import GridSpec, SensitivitySpec
from .panel import PanelSchema

__all__ = ["ConfigError", "RunConfig", "load_config"]

METHODS = ("smm", "snmm", "sdm-grid", "saftm", "iv", "logistic-smm", "cde")


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed: set[str], where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")


def _features_by_time(raw, where: str) -> dict[int, tuple[str, ...]] | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must map time index -> expression list")
    out = {}
    for key, val in raw.items():
        try:
            m = int(key)
        except (TypeError, ValueError):
            raise ConfigError(f"non-integer time key {key!r} in {where}") from None
        if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
            raise ConfigError(f"{where}[{key}] must be a list of expressions")
        out[m] = tuple(val)
    return out


def _blip_terms(raw, where: str) -> tuple[BlipTerm, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{where} must be a non-empty list of term records")
    terms = []
    for i, rec in enumerate(raw):
        _check_keys(rec, {"target_k", "source_m", "expression", "psi_index"},
                    f"{where}[{i}]")
        try:
            terms.append(BlipTerm(target_k=int(rec["target_k"]),
                                  source_m=int(rec["source_m"]),
                                  expression=str(rec["expression"]),
                                  psi_index=int(rec["psi_index"])))
        except KeyError as exc:
            raise ConfigError(f"{where}[{i}] missing key {exc.args[0]!r}") from None
    return tuple(terms)


@dataclass
class RunConfig:
    """Validated configuration for one command invocation."""

    seed: int = 0
    jobs: int = 1
    output_dir: str = "gestimate-out"
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)

    # -- data ------------------------------------------------------------
    def panel_schema(self) -> PanelSchema:
        d = self.data
        return PanelSchema(
            subject=d.get("subject", "subject_id"),
            time=d.get("time", "time_index"),
            treatment=d.get("treatment", "A"),
            outcome=d.get("outcome", "Y"),
            covariates=tuple(d.get("covariates", ())),
            outcome_times=tuple(d["outcome_times"]) if "outcome_times" in d else None,
            times=tuple(d["times"]) if "times" in d else None,
            survival=bool(d.get("survival", False)),
        )

    @property
    def data_path(self) -> str:
        try:
            return self.data["path"]
        except KeyError:
            raise ConfigError("data.path is required") from None

    # -- model pieces ----------------------------------------------------
    def blip_spec(self) -> BlipSpec:
        if "blip" not in self.model:
            raise ConfigError("model.blip is required for mean-model methods")
        return BlipSpec(link=self.model.get("link", "identity"),
                        terms=_blip_terms(self.model["blip"], "model.blip"))

    def sndm_spec(self) -> SndmSpec:
        if "sndm" not in self.model:
            raise ConfigError("model.sndm is required for the sdm-grid method")
        return SndmSpec(terms=_blip_terms(self.model["sndm"], "model.sndm"))

    def saftm_spec(self) -> SaftmSpec:
        if "saftm" not in self.model:
            raise ConfigError("model.saftm is required for the saftm method")
        raw = self.model["saftm"]
        terms = []
        for i, rec in enumerate(raw):
            _check_keys(rec, {"expression", "psi_index"}, f"model.saftm[{i}]")
            terms.append(SaftmTerm(expression=str(rec["expression"]),
                                   psi_index=int(rec["psi_index"])))
        return SaftmSpec(terms=tuple(terms))

    def cde_spec(self) -> CdeSpec:
        if "cde" not in self.model:
            raise ConfigError("model.cde is required for the cde method")
        terms = []
        for i, rec in enumerate(self.model["cde"]):
            _check_keys(rec, {"expression", "psi_index"}, f"model.cde[{i}]")
            terms.append(CdeTerm(expression=str(rec["expression"]),
                                 psi_index=int(rec["psi_index"])))
        return CdeSpec(terms=tuple(terms))

    def propensity(self) -> dict:
        raw = self.model.get("propensity", {})
        _check_keys(raw, {"family", "features"}, "model.propensity")
        return {
            "family": raw.get("family", "bernoulli-logit"),
            "features": _features_by_time(raw.get("features"), "model.propensity.features"),
        }

    def known_propensity(self):
        raw = self.model.get("known_propensity")
        if raw is None:
            return None, "probability"
        if not isinstance(raw, dict):
            raise ConfigError("model.known_propensity maps time -> expression")
        return ({int(k): str(v) for k, v in raw.items()},
                self.model.get("known_propensity_scale", "probability"))

    def outcome_features(self):
        raw = self.model.get("outcome_working", {})
        _check_keys(raw, {"features"}, "model.outcome_working")
        return _features_by_time(raw.get("features"), "model.outcome_working.features")

    def grid_spec(self) -> GridSpec:
        raw = self.estimator.get("grid")
        if raw is None:
            raise ConfigError("estimator.grid is required for grid methods")
        _check_keys(raw, {"lower", "upper", "num"}, "estimator.grid")
        try:
            return GridSpec(lower=tuple(float(v) for v in raw["lower"]),
                            upper=tuple(float(v) for v in raw["upper"]),
                            num=tuple(int(v) for v in raw["num"]))
        except KeyError as exc:
            raise ConfigError(f"estimator.grid missing {exc.args[0]!r}") from None

    def sensitivity_spec(self) -> SensitivitySpec:
        raw = self.estimator.get("sensitivity")
        if raw is None:
            raise ConfigError("estimator.sensitivity.gammas is required")
        _check_keys(raw, {"gammas"}, "estimator.sensitivity")
        return SensitivitySpec(gammas=tuple(float(g) for g in raw["gammas"]))

    def regime(self) -> RegimeSpec:
        raw = self.predict.get("regime")
        if raw is None:
            raise ConfigError("predict.regime is required for prediction")
        _check_keys(raw, {"a0", "a1"}, "predict.regime")
        try:
            return RegimeSpec(a0=str(raw["a0"]), a1=str(raw["a1"]))
        except KeyError as exc:
            raise ConfigError(f"predict.regime missing {exc.args[0]!r}") from None

    @property
    def method(self) -> str:
        m = self.estimator.get("method")
        if m is None:
            raise ConfigError("estimator.method is required")
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        return m


_TOP_KEYS = {"seed", "jobs", "output_dir", "data", "model", "estimator",
             "scenario", "predict"}
_DATA_KEYS = {"path", "subject", "time", "treatment", "outcome", "covariates",
              "outcome_times", "times", "survival"}
_MODEL_KEYS = {"link", "blip", "sndm", "saftm", "cde", "propensity",
               "known_propensity", "known_propensity_scale", "outcome_working",
               "outcome_mean_features", "mediator_features", "mediator_family",
               "residual_features", "instrument_features", "center_outcome",
               "d_features", "treatment_levels"}
_ESTIMATOR_KEYS = {"method", "grid", "level", "alpha", "sensitivity",
                   "solver", "max_iter", "tol"}
_SCENARIO_KEYS = {"name", "n", "reps", "estimators", "overrides",
                  "rejection_psi", "n_oracle"}
_PREDICT_KEYS = {"regime", "inner_features", "n_boot"}


def load_config(path) -> RunConfig:
    """Parse and strictly validate a JSON run configuration."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    _check_keys(raw.get("data", {}), _DATA_KEYS, "data")
    _check_keys(raw.get("model", {}), _MODEL_KEYS, "model")
    _check_keys(raw.get("estimator", {}), _ESTIMATOR_KEYS, "estimator")
    _check_keys(raw.get("scenario", {}), _SCENARIO_KEYS, "scenario")
    _check_keys(raw.get("predict", {}), _PREDICT_KEYS, "predict")
    if "blip" in raw.get("model", {}):
        _blip_terms(raw["model"]["blip"], "model.blip")
    return RunConfig(
        seed=int(raw.get("seed", 0)),
        jobs=int(raw.get("jobs", 1)),
        output_dir=str(raw.get("output_dir", "gestimate-out")),
        data=raw.get("data", {}),
        model=raw.get("model", {}),
        estimator=raw.get("estimator", {}),
        scenario=raw.get("scenario", {}),
        predict=raw.get("predict", {}),
    )
