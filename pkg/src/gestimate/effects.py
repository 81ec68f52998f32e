"""Regime-mean prediction and controlled direct effects.

Prediction composes the fitted blips with the treatment-free transform: the
mean outcome under a two-period regime is the average of the time-1 blip
(with its inner conditional expectation estimated by regression), the time-0
blip and the blipped-down outcome.  This rests on the assumption that the
effect of a treatment level does not differ between those who did and did not
receive it ("no current-treatment interaction"), which the data cannot check;
the output carries that flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, clone

from .expr import compile_expression
from .gest import EstimateResult, GestError, _residualizer, SnmmGEstimator
from .mestimation import stacked_sandwich
from .nuisance import design_matrix, expit, fit_propensity
from .panel import Panel

__all__ = ["RegimeSpec", "CdeSpec", "RegimeMeanPredictor", "CdeEstimator"]

NO_INTERACTION_FLAG = (
    "assumes no current-treatment interaction: the regime's effect is taken to "
    "be the same for subjects who did and did not receive each treatment level; "
    "the data carry no information about this assumption"
)


@dataclass(frozen=True)
class RegimeSpec:
    """Treatment assignment rule for two periods.

    Each entry is an expression: a constant for a static regime, or a map over
    observed history for a dynamic one (``a1`` may reference ``a0``, which
    evaluates to the regime's own first assignment).
    """

    a0: str
    a1: str

    def assignments(self, panel: Panel) -> tuple[np.ndarray, np.ndarray]:
        env = dict(panel.env())
        n = panel.n_subjects
        a0 = np.broadcast_to(np.asarray(
            compile_expression(self.a0)(env), dtype=float), (n,)).astype(float)
        env["a0"] = a0
        a1 = np.broadcast_to(np.asarray(
            compile_expression(self.a1)(env), dtype=float), (n,)).astype(float)
        return a0, a1


@dataclass(frozen=True)
class CdeTerm:
    """One direct-effect term: psi[psi_index] * expression(a1, baseline) * a0."""

    expression: str
    psi_index: int

    def __post_init__(self):
        compile_expression(self.expression)


@dataclass(frozen=True)
class CdeSpec:
    """Controlled-direct-effect blip, linear in psi with a structural a0 factor."""

    terms: tuple[CdeTerm, ...]
    p: int | None = None

    def __post_init__(self):
        if not self.terms:
            raise GestError("controlled-direct-effect spec needs at least one term")
        object.__setattr__(self, "terms", tuple(self.terms))
        need = 1 + max(t.psi_index for t in self.terms)
        if self.p is None:
            object.__setattr__(self, "p", need)
        elif self.p < need:
            raise GestError("declared p smaller than used indices")


class RegimeMeanPredictor(BaseEstimator):
    """Mean outcome under a treatment regime from a fitted two-period mean model.

    The inner conditional expectation of the time-1 blip given baseline is
    estimated by regressing it on baseline features among subjects whose
    observed first treatment matches the regime; standard errors come from a
    subject-level bootstrap that refits everything.
    """

    def __init__(self, snmm: SnmmGEstimator, regime: RegimeSpec,
                 inner_features=(), n_boot: int = 200, seed: int = 0):
        self.snmm = snmm
        self.regime = regime
        self.inner_features = inner_features
        self.n_boot = n_boot
        self.seed = seed

    def fit(self, panel: Panel) -> "RegimeMeanPredictor":
        if panel.K != 1 or panel.survival:
            raise GestError("regime prediction is implemented for two-period panels")
        if self.snmm.spec.link != "identity":
            raise GestError("regime prediction requires the identity link")
        est = clone(self.snmm)
        est.set_params(compute_cov=False)
        est.fit(panel)
        self.prediction_ = self._predict_once(panel, est)
        self.psi_ = np.array([self.prediction_])
        boots = self._bootstrap(panel)
        self.se_ = float(np.std(boots, ddof=1)) if len(boots) > 1 else float("nan")
        self.boot_predictions_ = boots
        self.flags_ = [NO_INTERACTION_FLAG]
        return self

    def _predict_once(self, panel: Panel, est: SnmmGEstimator) -> float:
        psi = est.psi_
        spec = est.spec
        env = dict(panel.env())
        a0r, a1r = self.regime.assignments(panel)
        n = panel.n_subjects
        k_end = panel.outcome_times[-1]

        env_regime = dict(env)
        env_regime["a0"] = a0r
        env_regime["a1"] = a1r
        gamma1 = np.zeros(n)
        gamma0 = np.zeros(n)
        for t in spec.terms:
            val = np.broadcast_to(np.asarray(
                compile_expression(t.expression)(env_regime), dtype=float), (n,))
            if (t.source_m, t.target_k) == (1, k_end):
                gamma1 += psi[t.psi_index] * val * a1r
            elif (t.source_m, t.target_k) == (0, k_end):
                gamma0 += psi[t.psi_index] * val * a0r

        match = np.abs(panel.A[:, 0] - a0r) < 1e-9
        if not match.any():
            raise GestError("no subjects follow the regime's first treatment; "
                            "the conditioning stratum is empty")
        W0 = design_matrix(panel, tuple(self.inner_features), 0, include_am=False)
        coef, *_ = np.linalg.lstsq(W0[match], gamma1[match], rcond=None)
        inner = W0 @ coef

        design = est.design_
        ks = design.ks_after(0)
        u0_end = design.blipdown(psi, 0)[:, ks.index(k_end)]
        return float(np.mean(inner + gamma0 + u0_end))

    def _bootstrap(self, panel: Panel) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        n = panel.n_subjects
        out = []
        for _ in range(self.n_boot):
            idx = rng.integers(0, n, size=n)
            resampled = panel.take(idx)
            est = clone(self.snmm)
            est.set_params(compute_cov=False)
            try:
                est.fit(resampled)
                out.append(self._predict_once(resampled, est))
            except GestError:
                continue
        return np.asarray(out)


class CdeEstimator(BaseEstimator):
    """Controlled direct effect of the first treatment with the mediator held fixed.

    Subjects at other mediator levels are handled by inverse weighting with
    the mediator density given history; the index pairs the centered first
    treatment with the direct-effect features and the weighted residual is
    centered on baseline.  The variance treats the weights as fixed.
    """

    def __init__(self, spec: CdeSpec, propensity_features=(),
                 mediator_features=(), mediator_family: str = "bernoulli-logit",
                 residual_features=(), weight_cap: float = 1e4,
                 compute_cov: bool = True):
        self.spec = spec
        self.propensity_features = propensity_features
        self.mediator_features = mediator_features
        self.mediator_family = mediator_family
        self.residual_features = residual_features
        self.weight_cap = weight_cap
        self.compute_cov = compute_cov

    def fit(self, panel: Panel) -> "CdeEstimator":
        if panel.K != 1 or panel.survival:
            raise GestError("controlled-direct-effect estimation needs two periods")
        spec = self.spec
        p = spec.p
        n = panel.n_subjects
        y = panel.Y[:, panel.outcome_times[-1]]
        a0 = panel.A[:, 0]
        a1 = panel.A[:, 1]
        env = panel.env()

        w, mediator_note = self._weights(panel)
        if np.any(w > self.weight_cap):
            raise GestError(
                f"mediator weight exceeds {self.weight_cap:g}: positivity failure"
            )

        prop = fit_propensity(panel, {0: tuple(self.propensity_features)}, times=[0])
        r0 = a0 - prop.mean(panel, 0)

        # blip features at observed treatments and with a0 factored out
        Phi = np.zeros((n, p))
        G = np.zeros((n, p))
        for t in spec.terms:
            val = np.broadcast_to(np.asarray(
                compile_expression(t.expression)(env), dtype=float), (n,))
            Phi[:, t.psi_index] += a0 * val
            G[:, t.psi_index] += val

        W0 = design_matrix(panel, tuple(self.residual_features), 0, include_am=False)
        sw = np.sqrt(w)
        center = _residualizer(W0 * sw[:, None])
        y_c = center(y * sw)
        Phi_c = center(Phi * sw[:, None])

        D = (sw * r0)[:, None] * G
        M = D.T @ Phi_c
        b = D.T @ y_c
        if np.linalg.matrix_rank(M) < p:
            raise GestError("singular direct-effect system")
        psi = np.linalg.solve(M, b)
        norm = float(np.max(np.abs(b - M @ psi)))

        diagnostics = {
            "warnings": [],
            "notes": ["mediator weights treated as fixed in the variance"],
        }
        if mediator_note:
            diagnostics["notes"].append(mediator_note)

        cov = np.full((p, p), np.nan)
        if self.compute_cov:
            cov = self._sandwich(panel, prop, w, G, Phi, W0, y, psi)
        self.weights_ = w
        self.propensity_ = prop
        self.psi_ = psi
        self.cov_ = cov
        self.result_ = EstimateResult(psi=psi, cov=cov, converged=True, n_iter=1,
                                      equation_norm=norm, mode="closed-form",
                                      diagnostics=diagnostics)
        return self

    def _weights(self, panel: Panel) -> tuple[np.ndarray, str | None]:
        a1 = panel.A[:, 1]
        n = panel.n_subjects
        if np.unique(a1).size < 2:
            return np.ones(n), "mediator is constant; weights are identically 1"
        med = fit_propensity(panel, {1: tuple(self.mediator_features)},
                             family=self.mediator_family, times=[1])
        self.mediator_ = med
        if self.mediator_family == "bernoulli-logit":
            phat = med.prob(panel, 1)
            dens = np.where(a1 == 1.0, phat, 1.0 - phat)
            return 1.0 / dens, None
        # gaussian mediator: density weights stabilised by the marginal density
        mu = med.mean(panel, 1)
        s2 = med.residual_variance[1]
        cond = np.exp(-0.5 * (a1 - mu) ** 2 / s2) / np.sqrt(2 * np.pi * s2)
        mu0, s20 = float(a1.mean()), float(a1.var())
        marg = np.exp(-0.5 * (a1 - mu0) ** 2 / s20) / np.sqrt(2 * np.pi * s20)
        return marg / cond, "gaussian mediator weights stabilised by the marginal density"

    def _sandwich(self, panel, prop, w, G, Phi, W0, y, psi):
        p = self.spec.p
        a0 = panel.A[:, 0]
        sw = np.sqrt(w)
        beta0, *_ = np.linalg.lstsq(W0 * sw[:, None], (y - Phi @ psi) * sw,
                                    rcond=None)
        alpha0 = prop.coef_vector()
        theta0 = np.concatenate([alpha0, beta0, psi])
        n_a, n_b = len(alpha0), len(beta0)

        def contributions(theta):
            a_vec = theta[:n_a]
            b_vec = theta[n_a:n_a + n_b]
            psi_c = theta[n_a + n_b:]
            alpha_coef = prop.with_coef_vector(a_vec)
            cols = [prop.scores(panel, coef=alpha_coef)]
            resid = y - Phi @ psi_c - W0 @ b_vec
            cols.append((w * resid)[:, None] * W0)
            X0 = prop._design(panel, 0)
            e0 = expit(X0 @ alpha_coef[0]) if prop.family == "bernoulli-logit" \
                else X0 @ alpha_coef[0]
            s = (w * (a0 - e0) * resid)[:, None] * G
            cols.append(s)
            return np.concatenate(cols, axis=1)

        cov_full = stacked_sandwich(contributions, theta0)
        return cov_full[-p:, -p:]
