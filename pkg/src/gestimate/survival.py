"""Failure-time transforms, blipped-down censoring bounds and grid estimation.

Type I censoring makes the blipped failure time unobservable past end of
follow-up, so the raw transform cannot enter the estimating equations.  The
fix: blip down the administrative censoring time too, minimised over every
feasible future treatment sequence so it no longer depends on the treatments
actually received, then artificially censor events whose transformed time
exceeds that bound.  A piecewise-linear taper keeps the resulting residual
close to the event indicator while restoring continuity.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .blip import BlipError, SaftmSpec
from .expr import compile_expression
from .gest import (ConfidenceSet, EstimateResult, GestError, GridSpec,
                   _as_feature_dict, _BaseGEstimator, _residualizer, run_grid)
from .mestimation import MEstimationError, nuisance_projector, score_quadratic
from .nuisance import design_matrix, fit_propensity
from .panel import Panel, SubjectRecord, at_risk_mask

__all__ = [
    "SurvTransform",
    "smooth_weight",
    "blipdown_time",
    "censor_bound",
    "surv_transform",
    "SaftmGridEstimator",
]


@dataclass(frozen=True)
class SurvTransform:
    """Transformed time, post-artificial-censoring indicator and censoring bound."""

    X: float
    delta: bool
    C_bound: float
    U: float | None  # blipped failure time; None when the event was unobserved


def smooth_weight(t, alpha: float):
    """Taper that is 1 on [0, 1-alpha], linear down to 0 at 1."""
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise GestError("smooth weight argument must lie in [0, 1]")
    if not 0 < alpha <= 1:
        raise GestError("alpha must lie in (0, 1]")
    out = np.where(t > 1 - alpha, (1 - t) / alpha, 1.0)
    return float(out) if out.ndim == 0 else out


def _relative_env_record(record: SubjectRecord, m: int, a_prev: float) -> dict:
    env = {name: float(record.L[m, c])
           for c, name in enumerate(record.covariate_names)}
    env["aprev"] = float(a_prev)
    return env


def _transform_record(spec: SaftmSpec, record: SubjectRecord, psi: np.ndarray,
                      m: int, horizon: float, treatments: np.ndarray) -> float:
    """t_m plus interval-wise rescaled duration up to ``horizon``."""
    grid = record.time_grid
    K = record.K
    total = float(grid[m])
    for k in range(m, K + 1):
        start = float(grid[k])
        end = float(grid[k + 1]) if k < K else np.inf
        if horizon <= start:
            break
        dur = min(end, horizon) - start
        a_prev = treatments[k - 1] if k - 1 >= 0 else 0.0
        rate = spec.rate(_relative_env_record(record, k, a_prev),
                         treatments[k], psi)
        total += dur * float(np.exp(rate))
    return total


def blipdown_time(spec: SaftmSpec, record: SubjectRecord, psi, m: int) -> float:
    """Blipped failure time U_m(psi) for a subject with known event time."""
    psi = spec.check_dim(psi)
    if record.T is None or (record.observed_event is False):
        raise GestError("blipdown_time needs an observed event time")
    if record.T < record.time_grid[m]:
        raise GestError(f"event time {record.T} precedes t_{m}")
    return _transform_record(spec, record, psi, m, record.T, record.A)


def censor_bound(spec: SaftmSpec, record: SubjectRecord, psi, m: int,
                 levels=None) -> float:
    """Blipped censoring bound C_m(psi), minimised over feasible future treatments.

    Treatments through m-1 stay at their observed values; the minimisation
    runs over every discrete sequence for times m..K, evaluated at the
    subject's observed covariates.  The result never depends on the
    treatments the subject actually received from m on.
    """
    psi = spec.check_dim(psi)
    if record.C is None or not np.isfinite(record.C):
        raise GestError("Type I censoring requires a finite planned end of follow-up")
    K = record.K
    if levels is None:
        levels = (0.0, 1.0)
    levels = tuple(float(v) for v in levels)
    if len(levels) > 16:
        raise GestError("censoring bound needs a small discrete treatment set")
    best = np.inf
    n_free = K + 1 - m
    for cand in itertools.product(levels, repeat=n_free):
        treatments = np.concatenate([record.A[:m], np.asarray(cand)])
        val = _transform_record(spec, record, psi, m, record.C, treatments)
        best = min(best, val)
    return float(best)


def surv_transform(spec: SaftmSpec, record: SubjectRecord, psi, m: int,
                   levels=None) -> SurvTransform:
    """Assemble (X_m, Delta_m, C_m); observed events past the bound are censored."""
    psi = spec.check_dim(psi)
    c_bound = censor_bound(spec, record, psi, m, levels=levels)
    if record.observed_event:
        u = blipdown_time(spec, record, psi, m)
        delta = bool(u < c_bound)
        return SurvTransform(X=float(min(u, c_bound)), delta=delta,
                             C_bound=c_bound, U=float(u))
    return SurvTransform(X=c_bound, delta=False, C_bound=c_bound, U=None)


class _PanelSurvDesign:
    """Vectorised transforms over a survival panel."""

    def __init__(self, panel: Panel, spec: SaftmSpec, levels=None):
        if not panel.survival:
            raise GestError("survival estimation needs a survival-mode panel")
        if not np.all(np.isfinite(panel.censor_time)):
            raise GestError("Type I censoring requires finite planned end of follow-up")
        self.panel = panel
        self.spec = spec
        if levels is None:
            observed = np.unique(panel.A)
            if len(observed) > 16:
                raise GestError("treatments must be discrete for the censoring bound")
            levels = tuple(float(v) for v in observed)
        self.levels = levels
        self._rel_envs = [
            {name: panel.L[:, m, c] for c, name in enumerate(panel.covariate_names)}
            for m in range(panel.K + 1)
        ]

    def _rates(self, psi, m, treatments_by_time) -> np.ndarray:
        env = dict(self._rel_envs[m])
        env["aprev"] = treatments_by_time[m - 1] if m >= 1 \
            else np.zeros(self.panel.n_subjects)
        return self.spec.rate(env, treatments_by_time[m], psi)

    def _transform(self, psi, m, horizon: np.ndarray,
                   treatments_by_time) -> np.ndarray:
        grid = self.panel.time_grid
        K = self.panel.K
        total = np.full(self.panel.n_subjects, float(grid[m]))
        for k in range(m, K + 1):
            start = float(grid[k])
            end = float(grid[k + 1]) if k < K else np.inf
            dur = np.clip(np.minimum(end, horizon) - start, 0.0, None)
            rate = self._rates(psi, k, treatments_by_time)
            total += dur * np.exp(rate)
        return total

    def blip_time(self, psi, m) -> np.ndarray:
        """U_m(psi) using observed treatments; inf where the event is unobserved."""
        horizon = np.where(self.panel.event_observed, self.panel.event_time, np.inf)
        obs = [self.panel.A[:, k] for k in range(self.panel.K + 1)]
        vals = self._transform(psi, m, np.where(np.isfinite(horizon), horizon,
                                                float(self.panel.time_grid[m])),
                               obs)
        return np.where(np.isfinite(horizon), vals, np.inf)

    def censor_bound(self, psi, m) -> np.ndarray:
        K = self.panel.K
        best = np.full(self.panel.n_subjects, np.inf)
        for cand in itertools.product(self.levels, repeat=K + 1 - m):
            by_time = [self.panel.A[:, k] if k < m
                       else np.full(self.panel.n_subjects, cand[k - m])
                       for k in range(K + 1)]
            best = np.minimum(
                best, self._transform(psi, m, self.panel.censor_time, by_time))
        return best

    def residuals(self, psi, m, alpha: float):
        """q = Delta * w_alpha(X / C) plus the artificial-censoring count at m."""
        u = self.blip_time(psi, m)
        c = self.censor_bound(psi, m)
        delta = self.panel.event_observed & (u < c)
        x = np.minimum(u, c)
        ratio = np.clip(x / c, 0.0, 1.0)
        q = np.where(delta, smooth_weight(ratio, alpha), 0.0)
        artificial = int(np.sum(self.panel.event_observed & ~delta
                                & at_risk_mask(self.panel, m)))
        return q, artificial


class SaftmGridEstimator(_BaseGEstimator):
    """Grid-search G-estimation for the accelerated failure-time blip.

    Each candidate parameter yields per-time residuals from the censored
    transform; the score statistic pairs them with centered treatments among
    subjects still at risk, and test inversion gives the confidence set.
    """

    def __init__(self, spec: SaftmSpec, grid: GridSpec, level: float = 0.95,
                 alpha: float = 0.05, propensity_features=None,
                 propensity_family: str = "bernoulli-logit",
                 known_propensity=None, known_propensity_scale: str = "probability",
                 outcome_features=None, treatment_levels=None):
        self.spec = spec
        self.grid = grid
        self.level = level
        self.alpha = alpha
        self.propensity_features = propensity_features
        self.propensity_family = propensity_family
        self.known_propensity = known_propensity
        self.known_propensity_scale = known_propensity_scale
        self.outcome_features = outcome_features
        self.treatment_levels = treatment_levels

    def _builder(self, panel: Panel):
        spec = self.spec
        p = spec.p
        design = _PanelSurvDesign(panel, spec, levels=self.treatment_levels)
        masks = {m: at_risk_mask(panel, m) for m in range(panel.K + 1)}
        if self.known_propensity is not None:
            prop = self._fit_propensity(panel)
        else:
            prop = fit_propensity(panel, _as_feature_dict(self.propensity_features),
                                  family=self.propensity_family, masks=masks)
        ell = prop.scores(panel, masks=masks)
        feats = _as_feature_dict(self.outcome_features)
        W = {m: design_matrix(panel, feats.get(m, ()), m, include_am=False)
             for m in range(panel.K + 1)}
        # precompute rank-aware least-squares solvers on the at-risk rows
        pinvs = {m: np.linalg.pinv(W[m][masks[m]]) for m in range(panel.K + 1)}
        # per-time index features: term expressions on that time's relative env
        G = {}
        for m in range(panel.K + 1):
            env = {name: panel.L[:, m, c]
                   for c, name in enumerate(panel.covariate_names)}
            env["aprev"] = panel.A[:, m - 1] if m >= 1 else np.zeros(panel.n_subjects)
            gm = np.zeros((panel.n_subjects, p))
            for t in spec.terms:
                gm[:, t.psi_index] += np.broadcast_to(np.asarray(
                    compile_expression(t.expression)(env), dtype=float),
                    (panel.n_subjects,))
            G[m] = gm
        resid_a = {m: panel.A[:, m] - prop.mean(panel, m)
                   for m in range(panel.K + 1)}

        def scores_at(psi):
            psi = spec.check_dim(psi)
            s = np.zeros((panel.n_subjects, p))
            art_total = 0
            for m in range(panel.K + 1):
                q, art = design.residuals(psi, m, self.alpha)
                art_total += art
                mask = masks[m]
                qc = q - W[m] @ (pinvs[m] @ q[mask])
                contrib = (resid_a[m] * qc)[:, None] * G[m]
                contrib[~mask] = 0.0
                s += contrib
            return s, art_total

        return scores_at, ell, prop, design

    def fit(self, panel: Panel) -> "SaftmGridEstimator":
        p = self.spec.p
        if self.grid.p != p:
            raise GestError(f"grid dimension {self.grid.p} != parameter dimension {p}")
        scores_at, ell, prop, design = self._builder(panel)
        proj = nuisance_projector(ell)
        art_counts = []
        flagged = []

        def stat_fn(psi):
            s, art = scores_at(psi)
            art_counts.append((psi.tolist(), art))
            try:
                stat, _, _ = score_quadratic(s, projector=proj)
            except MEstimationError:
                flagged.append(psi.tolist())
                return np.nan
            return stat

        psi_hat, cset, warnings = run_grid(self.grid, stat_fn, self.level, p)
        cov = self._grid_cov(scores_at, ell, psi_hat)
        diagnostics = {
            "warnings": warnings,
            "notes": [],
            "artificial_censoring": art_counts,
            "undefined_points": flagged,
        }
        self.propensity_ = prop
        self.psi_ = psi_hat
        self.cov_ = cov
        self.confidence_set_ = cset
        self.result_ = EstimateResult(
            psi=psi_hat, cov=cov, converged=True, n_iter=len(cset.grid),
            equation_norm=float(np.linalg.norm(scores_at(psi_hat)[0].sum(axis=0))),
            mode="grid", diagnostics=diagnostics)
        return self

    def score_statistic(self, panel: Panel, psi) -> float:
        scores_at, ell, _, _ = self._builder(panel)
        s, _ = scores_at(np.asarray(psi, dtype=float))
        stat, _, _ = score_quadratic(s, ell)
        return float(stat)

    def artificial_censoring_count(self, panel: Panel, psi) -> int:
        _, _, _, design = self._builder(panel)
        total = 0
        for m in range(panel.K + 1):
            _, art = design.residuals(np.asarray(psi, dtype=float), m, self.alpha)
            total += art
        return total

    def _grid_cov(self, scores_at, ell, psi_hat) -> np.ndarray:
        p = len(psi_hat)
        try:
            _, S, V = score_quadratic(scores_at(psi_hat)[0], ell)
            J = np.empty((p, p))
            axes_step = [(hi - lo) / (n - 1) for lo, hi, n in
                         zip(self.grid.lower, self.grid.upper, self.grid.num)]
            for j in range(p):
                h = 0.5 * axes_step[j]
                up = psi_hat.copy()
                dn = psi_hat.copy()
                up[j] += h
                dn[j] -= h
                J[:, j] = (scores_at(up)[0].sum(axis=0)
                           - scores_at(dn)[0].sum(axis=0)) / (2 * h)
            Jinv = np.linalg.inv(J)
            cov = Jinv @ V @ Jinv.T
            return 0.5 * (cov + cov.T)
        except np.linalg.LinAlgError:
            return np.full((p, p), np.nan)
