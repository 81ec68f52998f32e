"""Comparator estimators and analytic efficiency calculations.

These exist to reproduce the classic point-treatment comparisons: the
(augmented) inverse-probability-weighted estimator of the marginal contrast,
plain outcome regression, regression adjustment for the propensity score, and
the closed-form asymptotic variances that rank them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .expr import compile_expression
from .gest import EstimateResult, GestError
from .mestimation import stacked_sandwich
from .nuisance import design_matrix, fit_propensity, known_propensity
from .panel import Panel

__all__ = [
    "IpwMsmEstimator",
    "OlsEstimator",
    "PsRegressionEstimator",
    "VarianceReport",
    "analytic_variances",
    "pooling_check",
]


def _point_checks(panel: Panel):
    if panel.survival or panel.K != 0:
        raise GestError("comparator estimators require a point-treatment panel")
    if not set(np.unique(panel.A[:, 0])) <= {0.0, 1.0}:
        raise GestError("comparator estimators require binary treatment")
    if 1 not in panel.outcome_times:
        raise GestError("comparator estimators need the outcome at time 1")


class IpwMsmEstimator(BaseEstimator):
    """Locally efficient (augmented) IPW estimator of the marginal treatment effect.

    The estimate is the sample mean of the efficient influence-function
    expression plus the parameter: weighted residuals from both treatment
    arms' outcome models plus the model contrast.  ``augmented=False`` zeroes
    the arm models, which is plain inverse-probability weighting.
    """

    def __init__(self, propensity_features=None, arm_features=(),
                 known_propensity=None, known_propensity_scale="probability",
                 augmented: bool = True):
        self.propensity_features = propensity_features
        self.arm_features = arm_features
        self.known_propensity = known_propensity
        self.known_propensity_scale = known_propensity_scale
        self.augmented = augmented

    def fit(self, panel: Panel) -> "IpwMsmEstimator":
        _point_checks(panel)
        n = panel.n_subjects
        a = panel.A[:, 0]
        y = panel.Y[:, 1]
        if self.known_propensity is not None:
            prop = known_propensity(panel, {int(m): v for m, v in
                                            self.known_propensity.items()},
                                    scale=self.known_propensity_scale)
        else:
            prop = fit_propensity(panel, {0: tuple(self.propensity_features or ())})
        e = prop.prob(panel, 0)
        if np.any(e <= 0.0) or np.any(e >= 1.0):
            raise GestError("fitted propensity hits 0 or 1; weighting undefined")

        W = design_matrix(panel, tuple(self.arm_features), 0, include_am=False)
        if self.augmented:
            b1, *_ = np.linalg.lstsq(W[a == 1], y[a == 1], rcond=None)
            b0, *_ = np.linalg.lstsq(W[a == 0], y[a == 0], rcond=None)
            m1 = W @ b1
            m0 = W @ b0
        else:
            m1 = np.zeros(n)
            m0 = np.zeros(n)
        infl = a * (y - m1) / e - (1 - a) * (y - m0) / (1 - e) + m1 - m0
        psi = float(infl.mean())
        # variance of the mean of influence contributions, nuisances stacked
        centered = infl - psi
        cov = self._sandwich(panel, prop, W, a, y, e, psi)
        self.psi_ = np.array([psi])
        self.cov_ = cov
        self.result_ = EstimateResult(
            psi=self.psi_, cov=cov, converged=True, n_iter=1,
            equation_norm=float(abs(centered.mean())), mode="closed-form",
            diagnostics={"warnings": [], "notes": [],
                         "augmented": bool(self.augmented)})
        return self

    def _sandwich(self, panel, prop, W, a, y, e, psi):
        n = panel.n_subjects
        alpha0 = prop.coef_vector()
        if self.augmented:
            b1, *_ = np.linalg.lstsq(W[a == 1], y[a == 1], rcond=None)
            b0, *_ = np.linalg.lstsq(W[a == 0], y[a == 0], rcond=None)
            theta0 = np.concatenate([alpha0, b1, b0, [psi]])
        else:
            b1 = b0 = np.zeros(0)
            theta0 = np.concatenate([alpha0, [psi]])
        n_a, q = len(alpha0), W.shape[1]

        def contributions(theta):
            pos = n_a
            if self.augmented:
                c1 = theta[pos:pos + q]
                c0 = theta[pos + q:pos + 2 * q]
                pos += 2 * q
            psi_c = theta[pos]
            cols = []
            if n_a:
                alpha_coef = prop.with_coef_vector(theta[:n_a])
                cols.append(prop.scores(panel, coef=alpha_coef))
                X = prop._design(panel, 0)
                from .nuisance import expit
                ee = expit(X @ alpha_coef[0])
            else:
                ee = e
            if self.augmented:
                mm1 = W @ c1
                mm0 = W @ c0
                cols.append(((a * (y - mm1)))[:, None] * W)
                cols.append((((1 - a) * (y - mm0)))[:, None] * W)
            else:
                mm1 = np.zeros(n)
                mm0 = np.zeros(n)
            infl = a * (y - mm1) / ee - (1 - a) * (y - mm0) / (1 - ee) + mm1 - mm0
            cols.append((infl - psi_c)[:, None])
            return np.concatenate(cols, axis=1)

        cov_full = stacked_sandwich(contributions, theta0)
        return cov_full[-1:, -1:]


class OlsEstimator(BaseEstimator):
    """Plain least squares of the outcome on covariate features and treatment."""

    def __init__(self, features=(), treatment_time: int = 0,
                 outcome_time: int | None = None):
        self.features = features
        self.treatment_time = treatment_time
        self.outcome_time = outcome_time

    def fit(self, panel: Panel) -> "OlsEstimator":
        if panel.survival:
            raise GestError("OLS comparator needs a mean-mode panel")
        k = self.outcome_time if self.outcome_time is not None \
            else panel.outcome_times[-1]
        y = panel.Y[:, k]
        a = panel.A[:, self.treatment_time]
        W = design_matrix(panel, tuple(self.features), panel.K, include_am=True)
        X = np.column_stack([W, a])
        coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        if rank < X.shape[1]:
            raise GestError("singular design in OLS comparator")
        resid = y - X @ coef
        XtX_inv = np.linalg.inv(X.T @ X)
        meat = (X * resid[:, None]).T @ (X * resid[:, None])
        cov_full = XtX_inv @ meat @ XtX_inv
        self.coef_ = coef
        self.psi_ = np.array([coef[-1]])
        self.cov_ = cov_full[-1:, -1:]
        self.result_ = EstimateResult(
            psi=self.psi_, cov=self.cov_, converged=True, n_iter=1,
            equation_norm=float(np.max(np.abs(X.T @ resid))), mode="closed-form",
            diagnostics={"warnings": [], "notes": []})
        return self


class PsRegressionEstimator(BaseEstimator):
    """Least squares of the outcome on (1, fitted propensity, treatment).

    A constant fitted propensity is collinear with the intercept; the column
    is dropped with a warning and the fit reduces to the difference in means.
    """

    def __init__(self, propensity_features=None):
        self.propensity_features = propensity_features

    def fit(self, panel: Panel) -> "PsRegressionEstimator":
        _point_checks(panel)
        a = panel.A[:, 0]
        y = panel.Y[:, 1]
        prop = fit_propensity(panel, {0: tuple(self.propensity_features or ())})
        e = prop.prob(panel, 0)
        warnings = []
        if np.ptp(e) < 1e-12:
            warnings.append("constant fitted propensity dropped from the design")
            X = np.column_stack([np.ones_like(a), a])
        else:
            X = np.column_stack([np.ones_like(a), e, a])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
        XtX_inv = np.linalg.inv(X.T @ X)
        meat = (X * resid[:, None]).T @ (X * resid[:, None])
        cov_full = XtX_inv @ meat @ XtX_inv
        self.propensity_ = prop
        self.psi_ = np.array([coef[-1]])
        self.cov_ = cov_full[-1:, -1:]
        self.result_ = EstimateResult(
            psi=self.psi_, cov=self.cov_, converged=True, n_iter=1,
            equation_norm=float(np.max(np.abs(X.T @ resid))), mode="closed-form",
            diagnostics={"warnings": warnings, "notes": []})
        return self


@dataclass(frozen=True)
class VarianceReport:
    """Asymptotic variances of the locally efficient G- and IPW estimators.

    ``pooling_limit`` is the treatment-variance-weighted average the
    homogeneous-blip G-estimator converges to under effect heterogeneity.
    """

    var_gest: float
    var_ipw: float
    var_gest_misspec: float
    var_ipw_misspec: float
    pooling_limit: float
    sigma2: float
    probs: tuple[float, ...]
    e: tuple[float, ...]
    delta: tuple[float, ...]
    psi: tuple[float, ...]

    @property
    def ratio(self) -> float:
        return self.var_ipw / self.var_gest

    def to_dict(self) -> dict:
        return {
            "var_gest": self.var_gest,
            "var_ipw": self.var_ipw,
            "var_gest_misspec": self.var_gest_misspec,
            "var_ipw_misspec": self.var_ipw_misspec,
            "pooling_limit": self.pooling_limit,
            "ratio": self.ratio,
            "sigma2": self.sigma2,
            "probs": list(self.probs),
            "e": list(self.e),
            "delta": list(self.delta),
            "psi": list(self.psi),
        }


def analytic_variances(probs: Sequence[float], e: Sequence[float], sigma2: float,
                       delta: Sequence[float] | float = 0.0,
                       psi: Sequence[float] | float = 0.0) -> VarianceReport:
    """Exact arithmetic over a finite covariate law with per-stratum propensities.

    With homoscedastic outcome noise, the efficient G-estimator's variance is
    sigma^2 / E{Var(A|L)} while the efficient IPW estimator's is
    sigma^2 E{1/Var(A|L)}; the misspecified versions add the stated
    penalty terms with Delta(L) the outcome-model error per stratum.
    """
    probs = np.asarray(probs, dtype=float)
    e_arr = np.asarray(e, dtype=float)
    if probs.shape != e_arr.shape:
        raise GestError("probs and e must align")
    if not np.isclose(probs.sum(), 1.0):
        raise GestError("stratum probabilities must sum to 1")
    if np.any((e_arr <= 0.0) | (e_arr >= 1.0)):
        raise GestError("per-stratum propensities must lie strictly inside (0, 1)")
    delta_arr = np.broadcast_to(np.asarray(delta, dtype=float), probs.shape)
    psi_arr = np.broadcast_to(np.asarray(psi, dtype=float), probs.shape)

    v = e_arr * (1.0 - e_arr)
    ev = float(probs @ v)
    e_inv_v = float(probs @ (1.0 / v))
    var_gest = sigma2 / ev
    var_ipw = sigma2 * e_inv_v
    var_gest_mis = var_gest + float(probs @ (v * delta_arr ** 2)) / ev ** 2
    var_ipw_mis = var_ipw + float(
        probs @ ((delta_arr + psi_arr * (1.0 - e_arr)) ** 2 / v))
    pooling = float(probs @ (v * psi_arr)) / ev
    return VarianceReport(
        var_gest=var_gest, var_ipw=var_ipw, var_gest_misspec=var_gest_mis,
        var_ipw_misspec=var_ipw_mis, pooling_limit=pooling, sigma2=sigma2,
        probs=tuple(probs), e=tuple(e_arr), delta=tuple(np.asarray(delta_arr)),
        psi=tuple(np.asarray(psi_arr)))


def pooling_check(generate, estimator, psi_fun_report: VarianceReport,
                  n: int, reps: int, seed: int) -> dict:
    """Monte Carlo mean of a homogeneous-blip fit against the analytic pooled limit.

    ``generate(n, seed)`` must yield a panel from a heterogeneous-effect law
    whose report carries the pooling limit.
    """
    from sklearn.base import clone

    psis = []
    for r in range(reps):
        panel = generate(n, seed + r)
        psis.append(float(clone(estimator).fit(panel).psi_[0]))
    psis = np.asarray(psis)
    se_mc = float(psis.std(ddof=1) / np.sqrt(reps))
    return {
        "mc_mean": float(psis.mean()),
        "se_mc": se_mc,
        "analytic_limit": psi_fun_report.pooling_limit,
        "abs_error": abs(float(psis.mean()) - psi_fun_report.pooling_limit),
    }
