"""Scenario library with known ground truth plus the Monte Carlo runner.

Every scenario draws the treatment-free baseline outcomes first, then
covariates and treatments given observed history, and finally inverts the
blip maps to produce the observed outcomes (rank preservation by
construction, so blipping down at the true parameter recovers the stored
baselines exactly).  Confounding enters through covariates that carry
information about the baselines; the two deliberate violations of sequential
ignorability (instrument and hidden-bias scenarios) are documented in their
generators.

All randomness flows through counter-based streams keyed by fixed arithmetic
on (seed, replication), so parallel and serial Monte Carlo runs agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, clone

from .blip import BlipSpec, BlipTerm, SaftmSpec, SaftmTerm, SndmSpec
from .compare import IpwMsmEstimator, OlsEstimator, analytic_variances
from .effects import CdeEstimator, CdeSpec, CdeTerm
from .gest import (GestError, GridSpec, IvGEstimator, SdmGridEstimator,
                   SensitivitySpec, SensitivitySweep, SmmGEstimator,
                   SnmmGEstimator)
from .panel import Panel
from .survival import SaftmGridEstimator

__all__ = [
    "substream",
    "mix64",
    "Scenario",
    "SCENARIOS",
    "get_scenario",
    "MCSummary",
    "monte_carlo",
    "oracle_regime_mean",
    "LastPeriodPointView",
]

_MASK64 = (1 << 64) - 1
_MIX_MULT = 6364136223846793005
_MIX_INC = 0x9E3779B97F4A7C15


def mix64(*values: int) -> int:
    """Deterministic integer mixing for substream keys."""
    acc = 0
    for v in values:
        acc = (acc * _MIX_MULT + int(v) + _MIX_INC) & _MASK64
    return acc


def substream(seed: int, *indices: int) -> np.random.Generator:
    """Counter-based generator for (seed, index...) so streams never collide."""
    key = np.array([int(seed) & _MASK64, mix64(*indices) if indices else 0],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ids(n: int) -> tuple[str, ...]:
    return tuple(str(i) for i in range(n))


def _point_panel(x, A, Y1) -> Panel:
    n = len(x)
    Y = np.full((n, 2), np.nan)
    Y[:, 1] = Y1
    return Panel(ids=_ids(n), time_grid=np.array([0.0, 1.0]),
                 covariate_names=("x",), A=A[:, None], L=x[:, None, None],
                 Y=Y, outcome_times=(1,))


def _two_period_panel(x0, x1, A0, A1, Y1, Y2, outcome_times=(1, 2)) -> Panel:
    n = len(x0)
    Y = np.full((n, 3), np.nan)
    if 1 in outcome_times:
        Y[:, 1] = Y1
    Y[:, 2] = Y2
    L = np.stack([x0, x1], axis=1)[:, :, None]
    return Panel(ids=_ids(n), time_grid=np.array([0.0, 1.0, 2.0]),
                 covariate_names=("x",), A=np.column_stack([A0, A1]), L=L,
                 Y=Y, outcome_times=tuple(outcome_times))


class Scenario:
    """Base class: concrete scenarios override ``_simulate`` and ``estimator``."""

    name: str = ""
    mode: str = "mean"
    supports_regimes: bool = False

    @property
    def psi_star(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def target(self) -> np.ndarray:
        """What the matched estimator converges to (defaults to psi_star)."""
        return self.psi_star

    def generate(self, n: int, seed: int, regime=None) -> tuple[Panel, dict]:
        if regime is not None and not self.supports_regimes:
            raise GestError(f"scenario {self.name} does not support forced regimes")
        return self._simulate(n, substream(seed), regime)

    def _simulate(self, n, rng, regime):
        raise NotImplementedError

    def estimator(self) -> BaseEstimator:
        raise NotImplementedError

    def comparators(self) -> dict[str, BaseEstimator]:
        return {}

    def law(self):
        """Discrete covariate law for analytic variance formulas, if any."""
        return None


@dataclass(frozen=True)
class PointRandomizedScenario(Scenario):
    """Coin-flip treatment; covariate affects the outcome only."""

    name = "point-randomized"
    psi0: float = 1.0
    sigma: float = 1.0
    supports_regimes = True

    @property
    def psi_star(self):
        return np.array([self.psi0])

    def _simulate(self, n, rng, regime):
        x = rng.normal(0.0, 1.0, n)
        y0 = 0.3 + 0.5 * x + rng.normal(0.0, self.sigma, n)
        u = rng.random(n)
        a = (u < 0.5).astype(float) if regime is None \
            else np.full(n, float(regime[0]))
        y1 = y0 + self.psi0 * a
        truth = {"psi": self.psi_star, "baseline": {"y0": y0},
                 "alpha": np.array([0.0])}
        return _point_panel(x, a, y1), truth

    def blip_spec(self):
        return BlipSpec(link="identity", terms=(BlipTerm(1, 0, "1", 0),))

    def estimator(self):
        return SmmGEstimator(self.blip_spec(), propensity_features={0: ()},
                             outcome_features={0: ("x0",)})

    def comparators(self):
        return {
            "ipw": IpwMsmEstimator(propensity_features=(), arm_features=("x0",)),
            "ols": OlsEstimator(features=("x0",)),
        }


@dataclass(frozen=True)
class PointConfoundedScenario(Scenario):
    """Measured confounding: one covariate drives both treatment and outcome."""

    name = "point-confounded"
    psi0: float = 1.0
    alpha0: float = 0.2
    alpha1: float = 0.9
    sigma: float = 0.8
    supports_regimes = True

    @property
    def psi_star(self):
        return np.array([self.psi0])

    def _simulate(self, n, rng, regime):
        x = rng.normal(0.0, 1.0, n)
        y0 = 0.5 + 0.8 * x + rng.normal(0.0, self.sigma, n)
        u = rng.random(n)
        a = (u < _expit(self.alpha0 + self.alpha1 * x)).astype(float) \
            if regime is None else np.full(n, float(regime[0]))
        y1 = y0 + self.psi0 * a
        truth = {"psi": self.psi_star, "baseline": {"y0": y0},
                 "alpha": np.array([self.alpha0, self.alpha1])}
        return _point_panel(x, a, y1), truth

    def blip_spec(self):
        return BlipSpec(link="identity", terms=(BlipTerm(1, 0, "1", 0),))

    def estimator(self):
        return SmmGEstimator(self.blip_spec(), propensity_features={0: ("x0",)},
                             outcome_features={0: ("x0",)})

    def comparators(self):
        from .compare import PsRegressionEstimator

        return {
            "ipw": IpwMsmEstimator(propensity_features=("x0",),
                                   arm_features=("x0",)),
            "ols": OlsEstimator(features=("x0",)),
            "ps-regression": PsRegressionEstimator(propensity_features=("x0",)),
        }


@dataclass(frozen=True)
class NearPositivityScenario(Scenario):
    """Three strata with propensities reaching 0.02 and 0.98."""

    name = "near-positivity"
    psi0: float = 1.0
    sigma: float = 1.0
    e_by_stratum: tuple[float, ...] = (0.02, 0.5, 0.98)
    supports_regimes = True

    @property
    def psi_star(self):
        return np.array([self.psi0])

    def _simulate(self, n, rng, regime):
        x = rng.integers(0, 3, n).astype(float)
        e = np.asarray(self.e_by_stratum)[x.astype(int)]
        y0 = 0.5 + 0.5 * x + rng.normal(0.0, self.sigma, n)
        u = rng.random(n)
        a = (u < e).astype(float) if regime is None \
            else np.full(n, float(regime[0]))
        y1 = y0 + self.psi0 * a
        truth = {"psi": self.psi_star, "baseline": {"y0": y0}}
        return _point_panel(x, a, y1), truth

    def blip_spec(self):
        return BlipSpec(link="identity", terms=(BlipTerm(1, 0, "1", 0),))

    def known_prop_expr(self):
        e = self.e_by_stratum
        # propensities happen to be linear in the stratum index
        slope = (e[1] - e[0])
        if not (np.isclose(e[2] - e[1], slope)):
            raise GestError("stratum propensities are not linear in the index")
        return {0: f"{e[0]} + {slope}*x0"}

    def estimator(self):
        return SmmGEstimator(self.blip_spec(),
                             known_propensity=self.known_prop_expr(),
                             outcome_features={0: ("x0", "x0*x0")})

    def comparators(self):
        return {
            "ipw": IpwMsmEstimator(known_propensity=self.known_prop_expr(),
                                   arm_features=("x0", "x0*x0")),
        }

    def law(self):
        return analytic_variances(probs=(1 / 3, 1 / 3, 1 / 3),
                                  e=self.e_by_stratum, sigma2=self.sigma ** 2,
                                  delta=0.0, psi=self.psi0)


@dataclass(frozen=True)
class HeterogeneousScenario(Scenario):
    """Stratum-specific effects; a homogeneous blip pools them by information."""

    name = "heterogeneous"
    psi_by_stratum: tuple[float, float] = (0.0, 1.0)
    e_by_stratum: tuple[float, float] = (0.1, 0.5)
    sigma: float = 1.0

    @property
    def psi_star(self):
        return np.asarray(self.psi_by_stratum)

    @property
    def target(self):
        return np.array([self.law().pooling_limit])

    def _simulate(self, n, rng, regime):
        x = rng.integers(0, 2, n).astype(float)
        e = np.asarray(self.e_by_stratum)[x.astype(int)]
        psi_x = np.asarray(self.psi_by_stratum)[x.astype(int)]
        y0 = 0.4 + 0.4 * x + rng.normal(0.0, self.sigma, n)
        a = (rng.random(n) < e).astype(float)
        y1 = y0 + psi_x * a
        truth = {"psi": self.psi_star, "baseline": {"y0": y0},
                 "pooling_limit": self.law().pooling_limit}
        return _point_panel(x, a, y1), truth

    def blip_spec(self):
        return BlipSpec(link="identity", terms=(BlipTerm(1, 0, "1", 0),))

    def known_prop_expr(self):
        e = self.e_by_stratum
        return {0: f"{e[0]} + {e[1] - e[0]}*x0"}

    def estimator(self):
        return SmmGEstimator(self.blip_spec(),
                             known_propensity=self.known_prop_expr(),
                             outcome_features={0: ("x0",)})

    def law(self):
        return analytic_variances(probs=(0.5, 0.5), e=self.e_by_stratum,
                                  sigma2=self.sigma ** 2, delta=0.0,
                                  psi=self.psi_by_stratum)


@dataclass(frozen=True)
class SeqConfoundedScenario(Scenario):
    """Two periods with treatment-affected confounding (the Figure-1 topology).

    The intermediate covariate is raised by early treatment, shares the
    latent cause of the outcomes, and drives later treatment; its
    coefficients live here, not in any published table.
    """

    name = "seq-confounded"
    psi: tuple[float, ...] = (1.0, 0.5, 0.0, 1.0, 0.0)
    tau_latent: float = 1.0
    supports_regimes = True

    @property
    def psi_star(self):
        return np.asarray(self.psi)

    def _simulate(self, n, rng, regime):
        p0, p1, p2, p3, p4 = self.psi
        x0 = rng.normal(0.0, 1.0, n)
        b = rng.normal(0.0, self.tau_latent, n)
        u01 = 1.0 + 0.5 * x0 + b + rng.normal(0.0, 0.5, n)
        u02 = 1.5 + 0.5 * x0 + b + rng.normal(0.0, 0.5, n)
        eta_x1 = rng.normal(0.0, 0.5, n)
        u_a0 = rng.random(n)
        u_a1 = rng.random(n)

        if regime is None:
            a0 = (u_a0 < _expit(-0.3 + 0.8 * x0)).astype(float)
        else:
            r0 = regime[0]
            a0 = np.asarray(r0({"x0": x0}), dtype=float) if callable(r0) \
                else np.full(n, float(r0))
        y1 = u01 + (p0 + p1 * x0) * a0
        x1 = 0.3 + 0.6 * a0 + 0.8 * b + eta_x1
        if regime is None:
            a1 = (u_a1 < _expit(-0.2 + 0.7 * x1 + 0.3 * a0 - 0.3 * y1)).astype(float)
        else:
            r1 = regime[1]
            a1 = np.asarray(r1({"x0": x0, "x1": x1, "y1": y1, "a0": a0}),
                            dtype=float) if callable(r1) else np.full(n, float(r1))
        y2 = u02 + (p3 + p4 * x0) * a0 + (p0 + p1 * x1 + p2 * a0) * a1
        truth = {"psi": self.psi_star,
                 "baseline": {"u01": u01, "u02": u02}}
        return _two_period_panel(x0, x1, a0, a1, y1, y2), truth

    def blip_spec(self):
        return BlipSpec(link="identity", terms=(
            BlipTerm(2, 1, "1", 0), BlipTerm(2, 1, "x1", 1), BlipTerm(2, 1, "a0", 2),
            BlipTerm(2, 0, "1", 3), BlipTerm(2, 0, "x0", 4),
            BlipTerm(1, 0, "1", 0), BlipTerm(1, 0, "x0", 1)))

    def correct_propensity(self):
        return {0: ("x0",), 1: ("x1", "y1", "a0")}

    def correct_outcome(self):
        return {0: ("x0",), 1: ("x0", "x1", "y1", "a0", "a0*x0")}

    def estimator(self):
        return SnmmGEstimator(self.blip_spec(),
                              propensity_features=self.correct_propensity(),
                              outcome_features=self.correct_outcome())

    def nuisance_grid(self) -> dict[str, BaseEstimator]:
        """The four model-A/model-B correctness cells used for double robustness."""
        spec = self.blip_spec()
        pa, pb = self.correct_propensity(), self.correct_outcome()
        return {
            "A-ok-B-ok": SnmmGEstimator(spec, propensity_features=pa,
                                        outcome_features=pb, compute_cov=False),
            "A-ok-B-wrong": SnmmGEstimator(spec, propensity_features=pa,
                                           outcome_features={}, compute_cov=False),
            "A-wrong-B-ok": SnmmGEstimator(spec, propensity_features={},
                                           outcome_features=pb, compute_cov=False),
            "A-wrong-B-wrong": SnmmGEstimator(spec, propensity_features={},
                                              outcome_features={}, compute_cov=False),
        }

    def ols_comparator(self):
        """Naive regression for the long-term coefficient (biased by design)."""
        return OlsEstimator(features=("x0", "x1", "y1", "a1", "x1*a1"),
                            treatment_time=0, outcome_time=2)


@dataclass(frozen=True)
class NullScenario(SeqConfoundedScenario):
    """The sequential topology under the sharp null."""

    name = "null"
    psi: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class NoncomplianceScenario(Scenario):
    """Randomized encouragement with unmeasured confounding of actual treatment.

    Sequential ignorability fails for the second treatment (a latent variable
    drives both it and the outcome); the randomized first 'treatment' is a
    valid instrument by construction.
    """

    name = "noncompliance"
    psi0: float = 1.0
    compliance: float = 1.6

    @property
    def psi_star(self):
        return np.array([self.psi0])

    def _simulate(self, n, rng, regime):
        b = rng.normal(0.0, 1.0, n)
        a0 = (rng.random(n) < 0.5).astype(float)
        a1 = (rng.random(n) < _expit(-0.8 + self.compliance * a0 + 1.0 * b)
              ).astype(float)
        y2 = 1.0 + self.psi0 * a1 + b + rng.normal(0.0, 0.7, n)
        n_ = len(a0)
        Y = np.full((n_, 3), np.nan)
        Y[:, 2] = y2
        panel = Panel(ids=_ids(n_), time_grid=np.array([0.0, 1.0, 2.0]),
                      covariate_names=(), A=np.column_stack([a0, a1]),
                      L=np.zeros((n_, 2, 0)), Y=Y, outcome_times=(2,))
        return panel, {"psi": self.psi_star, "baseline": {"y0": y2 - self.psi0 * a1}}

    def blip_spec(self):
        return BlipSpec(link="identity", terms=(BlipTerm(2, 1, "1", 0),))

    def estimator(self):
        return IvGEstimator(self.blip_spec(), instrument_features=())

    def comparators(self):
        return {"naive-point": LastPeriodPointView(
            SmmGEstimator(self.blip_spec_point(), propensity_features={0: ()},
                          outcome_features={0: ()}))}

    def blip_spec_point(self):
        return BlipSpec(link="identity", terms=(BlipTerm(1, 0, "1", 0),))


@dataclass(frozen=True)
class HiddenBiasScenario(Scenario):
    """Treatment depends on the baseline outcome through a known tilt form.

    Sequential ignorability fails exactly along the exponential tilt with
    coefficient ``gamma_star`` on the treatment-free outcome, so the
    sensitivity analysis at that value is consistent while the untilted fit
    is not.
    """

    name = "hidden-bias"
    psi0: float = 1.0
    gamma_star: float = 0.5

    @property
    def psi_star(self):
        return np.array([self.psi0])

    def _simulate(self, n, rng, regime):
        x = rng.normal(0.0, 1.0, n)
        y0 = 0.5 + 0.6 * x + rng.normal(0.0, 1.0, n)
        p = _expit(0.2 + 0.7 * x + self.gamma_star * y0)
        a = (rng.random(n) < p).astype(float)
        y1 = y0 + self.psi0 * a
        truth = {"psi": self.psi_star, "baseline": {"y0": y0},
                 "gamma_star": self.gamma_star}
        return _point_panel(x, a, y1), truth

    def blip_spec(self):
        return BlipSpec(link="identity", terms=(BlipTerm(1, 0, "1", 0),))

    def estimator(self):
        return _SweepComponent(
            SensitivitySweep(self.blip_spec(),
                             SensitivitySpec(gammas=(self.gamma_star,)),
                             propensity_features={0: ("x0",)},
                             outcome_features={0: ("x0",)}, compute_cov=True),
            index=0)

    def sweep(self, gammas) -> SensitivitySweep:
        return SensitivitySweep(self.blip_spec(), SensitivitySpec(gammas=tuple(gammas)),
                                propensity_features={0: ("x0",)},
                                outcome_features={0: ("x0",)}, compute_cov=False)

    def comparators(self):
        return {"untilted": SmmGEstimator(self.blip_spec(),
                                          propensity_features={0: ("x0",)},
                                          outcome_features={0: ("x0",)})}


@dataclass(frozen=True)
class MediationScenario(Scenario):
    """Direct effect of the first treatment with an interacting binary mediator."""

    name = "mediation"
    psi: tuple[float, float] = (1.0, 0.5)

    @property
    def psi_star(self):
        return np.asarray(self.psi)

    def _simulate(self, n, rng, regime):
        p1, p2 = self.psi
        x0 = rng.normal(0.0, 1.0, n)
        a0 = (rng.random(n) < _expit(0.3 + 0.6 * x0)).astype(float)
        x1_base = 0.2 + 0.5 * x0 + rng.normal(0.0, 0.7, n)
        x1 = x1_base + 0.7 * a0
        a1 = (rng.random(n) < _expit(-0.3 + 0.8 * a0 + 0.7 * x1)).astype(float)
        y_mediated = 1.0 + 0.6 * x0 + 0.8 * x1_base + 0.5 * a1 \
            + rng.normal(0.0, 0.8, n)
        y2 = y_mediated + (p1 + p2 * a1) * a0
        return (_two_period_panel(x0, x1, a0, a1, np.zeros(n), y2,
                                  outcome_times=(2,)),
                {"psi": self.psi_star, "baseline": {"y_mediated": y_mediated}})

    def cde_spec(self):
        return CdeSpec(terms=(CdeTerm("1", 0), CdeTerm("a1", 1)))

    def estimator(self):
        return CdeEstimator(self.cde_spec(), propensity_features=("x0",),
                            mediator_features=("a0", "x1"),
                            residual_features=("x0",))


@dataclass(frozen=True)
class SaftmConfoundedScenario(Scenario):
    """Failure times with confounded treatments at two grid times, Type I censoring."""

    name = "saftm-confounded"
    mode = "survival"
    psi0: float = 0.5
    censor_at: float = 2.5

    @property
    def psi_star(self):
        return np.array([self.psi0])

    def _simulate(self, n, rng, regime):
        x0 = rng.normal(0.0, 1.0, n)
        t0 = np.exp(0.6 + 0.4 * x0 + 0.9 * rng.normal(0.0, 1.0, n))
        u0 = rng.random(n)
        u1 = rng.random(n)
        a0 = (u0 < _expit(0.3 + 0.7 * x0)).astype(float)
        # invert the time transform interval by interval (grid times 0 and 1)
        rate0 = np.exp(a0 * self.psi0)
        dies_first = t0 <= rate0  # baseline budget used up inside [0, 1)
        t_first = t0 / rate0
        a1 = np.where(dies_first, 0.0,
                      (u1 < _expit(-0.2 + 0.6 * x0 + 0.5 * a0)).astype(float))
        rate1 = np.exp(a1 * self.psi0)
        t = np.where(dies_first, t_first, 1.0 + (t0 - rate0) / rate1)
        observed = t < self.censor_at
        L = np.stack([x0, x0], axis=1)[:, :, None]
        panel = Panel(ids=_ids(n), time_grid=np.array([0.0, 1.0]),
                      covariate_names=("x",), A=np.column_stack([a0, a1]),
                      L=L, Y=np.full((n, 2), np.nan), outcome_times=(),
                      survival=True,
                      event_time=np.where(observed, t, np.nan),
                      censor_time=np.full(n, self.censor_at),
                      event_observed=observed)
        return panel, {"psi": self.psi_star, "baseline": {"t0": t0, "t": t}}

    def saftm_spec(self):
        return SaftmSpec(terms=(SaftmTerm("1", 0),))

    def grid(self):
        return GridSpec(lower=(-0.5,), upper=(1.5,), num=(81,))

    def estimator(self):
        return SaftmGridEstimator(self.saftm_spec(), self.grid(),
                                  propensity_features={0: ("x0",), 1: ("x0", "a0")},
                                  outcome_features={0: ("x0",), 1: ("x0",)})


@dataclass(frozen=True)
class SdmShiftScenario(Scenario):
    """Point-treatment location-shift distribution model."""

    name = "sdm-shift"
    psi: tuple[float, float] = (1.0, 0.0)

    @property
    def psi_star(self):
        return np.asarray(self.psi)

    def _simulate(self, n, rng, regime):
        p0, p1 = self.psi
        x = rng.normal(0.0, 1.0, n)
        y0 = 1.0 + 0.7 * x + rng.normal(0.0, 1.0, n)
        a = (rng.random(n) < _expit(0.3 + 0.8 * x)).astype(float)
        y1 = y0 + (p0 + p1 * x) * a
        return _point_panel(x, a, y1), {"psi": self.psi_star,
                                        "baseline": {"y0": y0}}

    def sndm_spec(self):
        return SndmSpec(terms=(BlipTerm(1, 0, "1", 0), BlipTerm(1, 0, "x0", 1)))

    def grid(self):
        return GridSpec(lower=(0.0, -0.6), upper=(2.0, 0.6), num=(41, 25))

    def estimator(self):
        return SdmGridEstimator(self.sndm_spec(), self.grid(),
                                propensity_features={0: ("x0",)},
                                outcome_features={0: ("x0",)})


@dataclass(frozen=True)
class SndmRankScenario(Scenario):
    """Two-period rank-preserving distribution model with outcome-dependent blips."""

    name = "sndm-rank"
    psi: tuple[float, float] = (1.0, 0.4)

    @property
    def psi_star(self):
        return np.asarray(self.psi)

    def _simulate(self, n, rng, regime):
        p0, p1 = self.psi
        x0 = rng.normal(0.0, 1.0, n)
        y1_0 = 0.5 + 0.5 * x0 + rng.normal(0.0, 0.8, n)
        y2_0 = 0.8 + 0.4 * x0 + 0.5 * y1_0 + rng.normal(0.0, 0.8, n)
        a0 = (rng.random(n) < _expit(0.2 + 0.6 * x0)).astype(float)
        y1 = y1_0 + p0 * a0
        y2_a00 = y2_0 + p1 * y1 * a0
        a1 = (rng.random(n) < _expit(-0.2 + 0.5 * x0 + 0.5 * y1 + 0.3 * a0)
              ).astype(float)
        y2 = y2_a00 + p0 * a1
        x1 = np.zeros(n)  # no fresh covariate; history enters via y1
        return (_two_period_panel(x0, x1, a0, a1, y1, y2),
                {"psi": self.psi_star, "baseline": {"y1_0": y1_0, "y2_0": y2_0}})

    def sndm_spec(self):
        return SndmSpec(terms=(BlipTerm(1, 0, "1", 0), BlipTerm(2, 1, "1", 0),
                               BlipTerm(2, 0, "y1", 1)))

    def grid(self):
        return GridSpec(lower=(0.0, 0.0), upper=(2.0, 0.8), num=(41, 33))

    def estimator(self):
        return SdmGridEstimator(self.sndm_spec(), self.grid(),
                                propensity_features={0: ("x0",),
                                                     1: ("x0", "y1", "a0")},
                                outcome_features={0: ("x0",),
                                                  1: ("x0", "y1", "a0", "y1*a0")})


class LastPeriodPointView(BaseEstimator):
    """Run a point-treatment estimator on (last treatment, final outcome).

    Useful as the 'naive' comparator in instrument scenarios: it ignores the
    endogeneity of the final treatment.
    """

    def __init__(self, inner: BaseEstimator):
        self.inner = inner

    def fit(self, panel: Panel):
        n = panel.n_subjects
        k_end = panel.outcome_times[-1]
        Y = np.full((n, 2), np.nan)
        Y[:, 1] = panel.Y[:, k_end]
        derived = Panel(ids=panel.ids, time_grid=np.array([0.0, 1.0]),
                        covariate_names=(), A=panel.A[:, panel.K:panel.K + 1],
                        L=np.zeros((n, 1, 0)), Y=Y, outcome_times=(1,))
        self.inner_ = clone(self.inner).fit(derived)
        self.psi_ = self.inner_.psi_
        self.cov_ = self.inner_.cov_
        self.result_ = self.inner_.result_
        return self


class _SweepComponent(BaseEstimator):
    """Expose one gamma entry of a sensitivity sweep as a plain estimator."""

    def __init__(self, sweep: SensitivitySweep, index: int = 0):
        self.sweep = sweep
        self.index = index

    def fit(self, panel: Panel):
        sw = clone(self.sweep).fit(panel)
        gamma, res = sw.results_[self.index]
        if not res.converged:
            raise GestError(f"tilted fit at gamma={gamma} did not converge")
        self.psi_ = res.psi
        self.cov_ = res.cov
        self.result_ = res
        return self


SCENARIOS: dict[str, type] = {
    cls.name: cls for cls in (
        NullScenario, PointRandomizedScenario, PointConfoundedScenario,
        NearPositivityScenario, HeterogeneousScenario, SeqConfoundedScenario,
        NoncomplianceScenario, HiddenBiasScenario, MediationScenario,
        SaftmConfoundedScenario, SdmShiftScenario, SndmRankScenario,
    )
}


def get_scenario(name: str, **overrides) -> Scenario:
    try:
        cls = SCENARIOS[name]
    except KeyError:
        raise GestError(
            f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}"
        ) from None
    return cls(**overrides)


@dataclass
class EstimatorSummary:
    mean: np.ndarray
    mean_bias: np.ndarray
    empirical_sd: np.ndarray
    se_mc: np.ndarray
    mean_se: np.ndarray
    coverage: np.ndarray
    rejection_rate: float
    n_ok: int
    n_failed: int
    failures: list[str]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "mean_bias": self.mean_bias.tolist(),
            "empirical_sd": self.empirical_sd.tolist(),
            "se_mc": self.se_mc.tolist(),
            "mean_se": self.mean_se.tolist(),
            "coverage": self.coverage.tolist(),
            "rejection_rate": self.rejection_rate,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed,
            "failures": self.failures[:5],
        }


@dataclass
class MCSummary:
    scenario: str
    n: int
    reps: int
    seed: int
    target: np.ndarray
    estimators: dict[str, EstimatorSummary]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "target": self.target.tolist(),
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
        }


_Z975 = 1.959963984540054


def _coverage_and_se(est, panel, target):
    """(per-component coverage or joint scalar, se array)."""
    res = getattr(est, "result_", None)
    if hasattr(est, "confidence_set_"):
        stat = est.score_statistic(panel, target)
        covered = float(stat <= est.confidence_set_.threshold)
        p = len(np.atleast_1d(est.psi_))
        return np.full(p, covered), res.se if res is not None else None
    if res is None or not np.all(np.isfinite(res.cov)):
        return None, None
    z = _Z975
    lo = res.psi - z * res.se
    hi = res.psi + z * res.se
    t = np.atleast_1d(target)[: len(res.psi)]
    return ((lo <= t) & (t <= hi)).astype(float), res.se


def _one_replication(scenario: Scenario, estimators: Mapping[str, BaseEstimator],
                     n: int, seed: int, rep: int, rejection_psi):
    panel, truth = scenario.generate(n, mix64(seed, rep))
    target = np.atleast_1d(scenario.target)
    out = {}
    for name, proto in estimators.items():
        try:
            est = clone(proto).fit(panel)
            psi = np.atleast_1d(np.asarray(est.psi_, dtype=float))
            cover, se = _coverage_and_se(est, panel, target)
            reject = np.nan
            if rejection_psi is not None:
                if hasattr(est, "score_statistic"):
                    stat = est.score_statistic(panel, rejection_psi)
                    thr = est.confidence_set_.threshold
                    reject = float(stat > thr)
                elif hasattr(est, "score_test"):
                    _, _, pv = est.score_test(panel, rejection_psi)
                    reject = float(pv < 0.05)
            out[name] = ("ok", psi, se, cover, reject)
        except Exception as exc:  # failures are data, not crashes
            out[name] = ("fail", f"{type(exc).__name__}: {exc}")
    return out


def monte_carlo(scenario: Scenario, estimators: Mapping[str, BaseEstimator] | None,
                n: int, reps: int, seed: int, jobs: int = 1,
                rejection_psi=None) -> MCSummary:
    """Replicate generate-and-fit and aggregate bias/SD/SE/coverage per estimator.

    Per-replication failures are recorded; more than 10% for any estimator
    aborts with the collected messages.
    """
    if reps < 2:
        raise GestError("monte_carlo needs reps >= 2")
    if estimators is None:
        estimators = {"matched": scenario.estimator()}
    runner = Parallel(n_jobs=jobs) if jobs != 1 else None
    args = [(scenario, estimators, n, seed, r, rejection_psi) for r in range(reps)]
    if runner is None:
        results = [_one_replication(*a) for a in args]
    else:
        results = runner(delayed(_one_replication)(*a) for a in args)

    target = np.atleast_1d(scenario.target)
    summaries = {}
    for name in estimators:
        oks = [r[name] for r in results if r[name][0] == "ok"]
        fails = [r[name][1] for r in results if r[name][0] == "fail"]
        if len(fails) > 0.1 * reps:
            raise RuntimeError(
                f"estimator {name!r} failed in {len(fails)}/{reps} replications; "
                f"first errors: {fails[:3]}"
            )
        psis = np.vstack([o[1] for o in oks])
        p = psis.shape[1]
        ses = np.vstack([o[2] if o[2] is not None else np.full(p, np.nan)
                         for o in oks])
        covers = np.vstack([o[3] if o[3] is not None else np.full(p, np.nan)
                            for o in oks])
        rejects = np.array([o[4] for o in oks], dtype=float)
        tgt = target[:p] if len(target) >= p else np.resize(target, p)

        def _nanmean(x, axis=None):
            x = np.asarray(x, dtype=float)
            if np.all(np.isnan(x)):
                return np.full(x.shape[1], np.nan) if axis == 0 else np.nan
            return np.nanmean(x, axis=axis)

        summaries[name] = EstimatorSummary(
            mean=psis.mean(axis=0),
            mean_bias=psis.mean(axis=0) - tgt,
            empirical_sd=psis.std(axis=0, ddof=1),
            se_mc=psis.std(axis=0, ddof=1) / np.sqrt(len(oks)),
            mean_se=_nanmean(ses, axis=0),
            coverage=_nanmean(covers, axis=0),
            rejection_rate=float(_nanmean(rejects)) if len(rejects) else np.nan,
            n_ok=len(oks), n_failed=len(fails), failures=fails)
    return MCSummary(scenario=scenario.name, n=n, reps=reps, seed=seed,
                     target=target, estimators=summaries)


def oracle_regime_mean(scenario: Scenario, regime, n_oracle: int,
                       seed: int) -> dict:
    """Mean final outcome when the generator's treatments are forced to a regime."""
    panel, _ = scenario.generate(n_oracle, seed, regime=regime)
    k_end = panel.outcome_times[-1]
    y = panel.Y[:, k_end]
    return {"mean": float(y.mean()),
            "se_mc": float(y.std(ddof=1) / np.sqrt(len(y)))}
