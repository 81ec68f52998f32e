"""G-estimators for structural (nested) mean and distribution models.

The common shape: blip down the observed outcomes at a candidate parameter,
center both the blipped outcome and a treatment-side index function on
history, and find the parameter where the summed products vanish.  With the
identity link and linear-in-parameter blips this is one p x p linear solve;
otherwise Newton's method with the analytic blip Jacobian; distribution-scale
models invert a score-type test over a parameter grid.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from .blip import BlipError, BlipSpec, BlipTerm, PanelBlipDesign, SndmSpec
from .expr import compile_expression
from .mestimation import (MEstimationError, nuisance_projector, score_quadratic,
                          stacked_sandwich)
from .nuisance import (NuisanceError, OutcomeMeanModel, PerfectSeparationError,
                       design_matrix, expit, fit_propensity, known_propensity, logit)
from .panel import Panel

__all__ = [
    "GestError",
    "EstimateResult",
    "ConfidenceSet",
    "GridSpec",
    "SensitivitySpec",
    "SmmGEstimator",
    "SnmmGEstimator",
    "IvGEstimator",
    "LogisticSmmEstimator",
    "SensitivitySweep",
    "SdmGridEstimator",
]


class GestError(ValueError):
    pass


@dataclass
class EstimateResult:
    """Point estimate with sandwich covariance and solver diagnostics."""

    psi: np.ndarray
    cov: np.ndarray
    converged: bool
    n_iter: int
    equation_norm: float
    mode: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "psi": self.psi.tolist(),
            "cov": self.cov.tolist(),
            "se": self.se.tolist(),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "equation_norm": float(self.equation_norm),
            "mode": self.mode,
            "diagnostics": self.diagnostics,
        }


@dataclass
class ConfidenceSet:
    """Test-inversion confidence set over an evaluated parameter grid."""

    grid: np.ndarray       # (G, p)
    statistic: np.ndarray  # (G,)
    level: float
    threshold: float

    @property
    def accepted(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.grid[np.nan_to_num(self.statistic, nan=np.inf) <= self.threshold]

    def contains(self, psi) -> bool:
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        acc = self.accepted
        if acc.size == 0:
            return False
        return bool(np.any(np.all(np.isclose(acc, psi[None, :], atol=1e-12), axis=1)))


@dataclass(frozen=True)
class GridSpec:
    """Rectangular search grid, one (lower, upper, num) triple per dimension."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    num: tuple[int, ...]

    def __post_init__(self):
        if not len(self.lower) == len(self.upper) == len(self.num):
            raise GestError("grid lower/upper/num lengths disagree")
        if any(n < 2 for n in self.num):
            raise GestError("grid needs at least two points per dimension")

    @property
    def p(self) -> int:
        return len(self.lower)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n)
                for lo, hi, n in zip(self.lower, self.upper, self.num)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])


@dataclass(frozen=True)
class SensitivitySpec:
    """Exponential-tilt sensitivity sweep.

    The default tilt is gamma * (first blipped-down outcome) * a_m; pass
    ``q_builder(gamma) -> fn(u, panel, m) -> (n,) offsets`` for other forms
    (the offset is the tilt evaluated at treatment level 1; it must vanish at
    the reference level, which the builder contract assumes).
    """

    gammas: tuple[float, ...]
    q_builder: Callable[[float], Callable] | None = None

    def offsets_fn(self, gamma: float) -> Callable:
        if self.q_builder is not None:
            return self.q_builder(gamma)

        def builtin(u: np.ndarray, panel: Panel, m: int) -> np.ndarray:
            return gamma * u[:, 0]

        return builtin


def _as_feature_dict(features) -> dict[int, tuple[str, ...]]:
    if features is None:
        return {}
    return {int(m): tuple(v) for m, v in features.items()}


def _index_terms(spec_terms: Sequence[BlipTerm], override) -> tuple[BlipTerm, ...]:
    if override is None:
        return tuple(spec_terms)
    return tuple(override if isinstance(override, (list, tuple)) else [override])


def _index_features(panel: Panel, terms: Sequence[BlipTerm], p: int,
                    family: str) -> dict[tuple[int, int], np.ndarray]:
    """Per-(m, k) index features g with the current treatment factored out.

    For a binary treatment the centered index is (A_m - e_m) g evaluated at
    a_m = 1, which is exact; a gaussian treatment requires expressions free of
    the current a_m (the residual supplies the only a_m dependence).
    """
    base = panel.env()
    out: dict[tuple[int, int], np.ndarray] = {}
    n = panel.n_subjects
    for (m, k) in sorted({(t.source_m, t.target_k) for t in terms}):
        env = dict(base)
        env[f"a{m}"] = 1.0
        G = np.zeros((n, p))
        for t in terms:
            if (t.source_m, t.target_k) != (m, k):
                continue
            e = compile_expression(t.expression)
            if family == "gaussian-identity" and f"a{m}" in e.variables:
                raise GestError(
                    f"index expression {t.expression!r} references a{m}; not "
                    "supported with a gaussian treatment model"
                )
            G[:, t.psi_index] += np.broadcast_to(
                np.asarray(e(env), dtype=float), (n,)).astype(float)
        out[(m, k)] = G
    return out


def _residualizer(W: np.ndarray):
    """Return fn(X) -> X minus its projection onto col(W).

    The orthonormal basis is precomputed (SVD, rank-aware) so repeated calls
    over a parameter grid cost two matrix products each; the projection is
    invariant to the particular feature basis spanning the same space.
    """
    U, s, _ = np.linalg.svd(W, full_matrices=False)
    tol = max(W.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    Ur = U[:, s > tol]

    def center(X: np.ndarray) -> np.ndarray:
        return X - Ur @ (Ur.T @ X)

    return center


def _check_treatment_variation(panel: Panel, times: set[int]):
    for m in sorted(times):
        if np.unique(panel.A[:, m]).size < 2:
            raise GestError(
                f"singular estimating system: treatment at time {m} has no variation"
            )


class _BaseGEstimator(BaseEstimator):
    """Shared plumbing: nuisance fitting, equation assembly, sandwich stacking."""

    def _fit_propensity(self, panel: Panel):
        if self.known_propensity is not None:
            return known_propensity(panel, {int(m): v for m, v in
                                            self.known_propensity.items()},
                                    scale=self.known_propensity_scale)
        return fit_propensity(panel, _as_feature_dict(self.propensity_features),
                              family=self.propensity_family)

    def _centering_designs(self, panel: Panel) -> dict[int, np.ndarray]:
        feats = _as_feature_dict(self.outcome_features)
        return {m: design_matrix(panel, feats.get(m, ()), m, include_am=False)
                for m in range(panel.K + 1)}


class SnmmGEstimator(_BaseGEstimator):
    """G-estimation for structural nested mean models (identity or log link).

    Solves the summed-over-time conditional-covariance equations: at each
    time, an index built from the blip features and the centered treatment is
    paired with the blipped-down outcome, centered on history by working
    regressions.  Identity-link, linear-in-parameter models solve in closed
    form; the log link uses Newton iterations with the analytic Jacobian,
    refitting the outcome centering at each candidate parameter.

    The fitted attributes are ``psi_``, ``cov_`` and ``result_``.
    """

    _mode_closed = "closed-form"

    def __init__(self, spec: BlipSpec, propensity_features=None,
                 propensity_family: str = "bernoulli-logit",
                 known_propensity=None, known_propensity_scale: str = "probability",
                 outcome_features=None, center_outcome: bool = True,
                 d_features=None, solver: str = "auto", max_iter: int = 100,
                 tol: float = 1e-8, compute_cov: bool = True):
        self.spec = spec
        self.propensity_features = propensity_features
        self.propensity_family = propensity_family
        self.known_propensity = known_propensity
        self.known_propensity_scale = known_propensity_scale
        self.outcome_features = outcome_features
        self.center_outcome = center_outcome
        self.d_features = d_features
        self.solver = solver
        self.max_iter = max_iter
        self.tol = tol
        self.compute_cov = compute_cov

    def _validate_panel(self, panel: Panel):
        if panel.survival:
            raise GestError("mean-model estimation needs a mean-mode panel")

    def fit(self, panel: Panel) -> "SnmmGEstimator":
        self._validate_panel(panel)
        spec: BlipSpec = self.spec
        if spec.link not in ("identity", "log"):
            raise GestError("this estimator supports identity and log links only")
        design = PanelBlipDesign(panel, spec)
        dterms = _index_terms(spec.terms, self.d_features)
        dfeat = _index_features(panel, dterms, spec.p, self.propensity_family)
        _check_treatment_variation(panel, {m for (m, _) in dfeat})
        prop = self._fit_propensity(panel)
        resid_a = {m: prop.residual(panel, m) for (m, _) in dfeat}
        W = self._centering_designs(panel)
        blocks = sorted(dfeat)

        D = {mk: resid_a[mk[0]][:, None] * dfeat[mk] for mk in blocks}
        centerers = {m: _residualizer(W[m]) for m in {mk[0] for mk in blocks}} \
            if self.center_outcome else None

        diagnostics: dict = {"warnings": [], "notes": []}
        self._efficiency_note(panel, diagnostics)

        if spec.link == "identity" and self.solver in ("auto", "closed"):
            psi, norm = self._solve_closed(panel, design, D, centerers, blocks)
            converged, n_iter, mode = True, 1, self._mode_closed
        else:
            psi, norm, converged, n_iter = self._solve_newton(
                panel, design, D, centerers, blocks)
            mode = "root-find"
            if not converged:
                raise GestError(
                    f"estimating equations did not converge in {self.max_iter} "
                    f"iterations (norm {norm:.3g})"
                )

        cov = np.full((spec.p, spec.p), np.nan)
        if self.compute_cov:
            cov = self._sandwich(panel, design, prop, W, dfeat, blocks, psi)

        self.design_ = design
        self.propensity_ = prop
        self.psi_ = psi
        self.cov_ = cov
        self.result_ = EstimateResult(psi=psi, cov=cov, converged=converged,
                                      n_iter=n_iter, equation_norm=norm,
                                      mode=mode, diagnostics=diagnostics)
        return self

    def _efficiency_note(self, panel: Panel, diagnostics: dict):
        feats = _as_feature_dict(self.outcome_features)
        for m in range(1, panel.K + 1):
            used = set()
            for text in feats.get(m, ()):
                used |= compile_expression(text).variables
            if f"y{m}" not in used:
                diagnostics["notes"].append(
                    f"outcome centering at time {m} omits the previous outcome; "
                    "the index functions remain valid but may lose efficiency"
                )
                break

    # -- solvers ---------------------------------------------------------
    def _equation_pieces(self, panel, design, blocks, centerers, psi):
        """Residual and Jacobian contributions per block at psi."""
        out = []
        for (m, k) in blocks:
            ks = design.ks_after(m)
            kk = ks.index(k)
            U = design.blipdown(psi, m)[:, kk]
            J = design.jacobian(psi, m)[:, kk, :]
            if centerers is not None:
                c = centerers[m]
                U = c(U)
                J = c(J)
            out.append(((m, k), U, J))
        return out

    def _solve_closed(self, panel, design, D, centerers, blocks):
        p = self.spec.p
        M = np.zeros((p, p))
        b = np.zeros(p)
        for (m, k) in blocks:
            ks = design.ks_after(m)
            kk = ks.index(k)
            y = panel.Y[:, k]
            phi = design.cum(m, k)
            if centerers is not None:
                c = centerers[m]
                y = c(y)
                phi = c(phi)
            M += D[(m, k)].T @ phi
            b += D[(m, k)].T @ y
        if np.linalg.matrix_rank(M) < p or not np.all(np.isfinite(M)):
            raise GestError("singular estimating system: index functions do not "
                            "span the parameter space")
        psi = np.linalg.solve(M, b)
        norm = float(np.max(np.abs(b - M @ psi)))
        return psi, norm

    def _equation(self, panel, design, D, centerers, blocks, psi):
        p = self.spec.p
        F = np.zeros(p)
        J = np.zeros((p, p))
        for (m, k), U, JU in self._equation_pieces(panel, design, blocks,
                                                   centerers, psi):
            F += D[(m, k)].T @ U
            J += D[(m, k)].T @ JU
        return F, J

    def _solve_newton(self, panel, design, D, centerers, blocks):
        p = self.spec.p
        psi = np.zeros(p)
        F, J = self._equation(panel, design, D, centerers, blocks, psi)
        norm = float(np.max(np.abs(F)))
        for it in range(1, self.max_iter + 1):
            if norm < self.tol:
                return psi, norm, True, it - 1
            try:
                step = np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                step = None
            moved = False
            if step is not None and np.all(np.isfinite(step)):
                scale = 1.0
                for _ in range(30):
                    cand = psi - scale * step
                    Fc, Jc = self._equation(panel, design, D, centerers, blocks, cand)
                    nc = float(np.max(np.abs(Fc)))
                    if nc < norm:
                        psi, F, J, norm, moved = cand, Fc, Jc, nc, True
                        break
                    scale *= 0.5
            if not moved:
                psi, F, J, norm, moved = self._secant_sweep(
                    panel, design, D, centerers, blocks, psi, F, J, norm)
                if not moved:
                    return psi, norm, norm < self.tol, it
        return psi, norm, norm < self.tol, self.max_iter

    def _secant_sweep(self, panel, design, D, centerers, blocks, psi, F, J, norm):
        """Coordinate-wise secant fallback when the Newton step stalls."""
        moved = False
        for j in range(len(psi)):
            h = 0.1 * max(1.0, abs(psi[j]))
            probe = psi.copy()
            probe[j] += h
            Fp, _ = self._equation(panel, design, D, centerers, blocks, probe)
            denom = Fp[j] - F[j]
            if denom == 0:
                continue
            cand = psi.copy()
            cand[j] -= F[j] * h / denom
            Fc, Jc = self._equation(panel, design, D, centerers, blocks, cand)
            nc = float(np.max(np.abs(Fc)))
            if nc < norm:
                psi, F, J, norm, moved = cand, Fc, Jc, nc, True
        return psi, F, J, norm, moved

    # -- inference -------------------------------------------------------
    def _psi_scores(self, panel, design, prop, W, dfeat, blocks, psi,
                    alpha_coef=None, beta=None, offsets=None) -> np.ndarray:
        n = panel.n_subjects
        s = np.zeros((n, self.spec.p))
        for (m, k) in blocks:
            X = prop._design(panel, m)
            coef = prop.coef[m] if alpha_coef is None else alpha_coef[m]
            eta = X @ coef
            if offsets is not None and m in offsets:
                eta = eta + offsets[m]
            if prop.family == "bernoulli-logit":
                mean = eta if (prop.known and prop.known_scale == "probability") \
                    else expit(eta)
            else:
                mean = eta
            r = panel.A[:, m] - mean
            ks = design.ks_after(m)
            kk = ks.index(k)
            U = design.blipdown(psi, m)[:, kk]
            if self.center_outcome:
                if beta is None:
                    U = _residualizer(W[m])(U)
                else:
                    U = U - W[m] @ beta[(m, k)]
            s += (r * U)[:, None] * dfeat[(m, k)]
        return s

    def _beta_hat(self, panel, design, W, blocks, psi):
        beta = {}
        for (m, k) in blocks:
            ks = design.ks_after(m)
            kk = ks.index(k)
            U = design.blipdown(psi, m)[:, kk]
            beta[(m, k)], *_ = np.linalg.lstsq(W[m], U, rcond=None)
        return beta

    def _sandwich(self, panel, design, prop, W, dfeat, blocks, psi) -> np.ndarray:
        p = self.spec.p
        beta = self._beta_hat(panel, design, W, blocks, psi) \
            if self.center_outcome else None
        alpha0 = prop.coef_vector()
        beta_keys = sorted(beta) if beta is not None else []
        beta0 = np.concatenate([beta[k] for k in beta_keys]) if beta_keys else np.zeros(0)
        theta0 = np.concatenate([alpha0, beta0, psi])
        n_alpha, n_beta = len(alpha0), len(beta0)

        def contributions(theta):
            a_vec = theta[:n_alpha]
            b_vec = theta[n_alpha:n_alpha + n_beta]
            psi_c = theta[n_alpha + n_beta:]
            alpha_coef = prop.with_coef_vector(a_vec) if n_alpha else None
            beta_c = None
            if beta is not None:
                beta_c = {}
                pos = 0
                for key in beta_keys:
                    q = len(beta[key])
                    beta_c[key] = b_vec[pos:pos + q]
                    pos += q
            cols = []
            if n_alpha:
                cols.append(prop.scores(panel, coef=alpha_coef))
            if beta is not None:
                for (m, k) in beta_keys:
                    ks = design.ks_after(m)
                    kk = ks.index(k)
                    U = design.blipdown(psi_c, m)[:, kk]
                    r = U - W[m] @ beta_c[(m, k)]
                    cols.append(r[:, None] * W[m])
            cols.append(self._psi_scores(panel, design, prop, W, dfeat, blocks,
                                         psi_c, alpha_coef=alpha_coef, beta=beta_c))
            return np.concatenate(cols, axis=1)

        try:
            cov_full = stacked_sandwich(contributions, theta0)
        except MEstimationError as exc:
            raise GestError(str(exc)) from None
        return cov_full[-p:, -p:]

    def score_test(self, panel: Panel, psi0) -> tuple[float, int, float]:
        """Score test of psi = psi0; returns (statistic, df, p-value)."""
        self._validate_panel(panel)
        spec = self.spec
        psi0 = spec.check_dim(psi0)
        design = PanelBlipDesign(panel, spec)
        dterms = _index_terms(spec.terms, self.d_features)
        dfeat = _index_features(panel, dterms, spec.p, self.propensity_family)
        prop = self._fit_propensity(panel)
        W = self._centering_designs(panel)
        blocks = sorted(dfeat)
        s = self._psi_scores(panel, design, prop, W, dfeat, blocks, psi0)
        stat, _, _ = score_quadratic(s, prop.scores(panel))
        df = spec.p
        return stat, df, float(stats.chi2.sf(stat, df))


class SmmGEstimator(SnmmGEstimator):
    """Point-treatment structural mean model G-estimator (K = 0)."""

    def _validate_panel(self, panel: Panel):
        super()._validate_panel(panel)
        if panel.K != 0:
            raise GestError("point-treatment estimator requires K = 0")


class IvGEstimator(_BaseGEstimator):
    """Instrumental-variable G-estimation with the baseline treatment as instrument.

    Only the time-0 equation is used; its index pairs the centered instrument
    with the later-treatment blip features.  Blips must not involve the
    instrument and later covariates must stay out of the model, which makes
    the just-identified no-covariate case collapse to the classical
    two-stage-least-squares/Wald estimate.
    """

    def __init__(self, spec: BlipSpec, instrument_features=(),
                 propensity_family: str = "bernoulli-logit",
                 outcome_features=(), center_outcome: bool = True,
                 compute_cov: bool = True, max_iter: int = 100, tol: float = 1e-8):
        self.spec = spec
        self.instrument_features = instrument_features
        self.propensity_family = propensity_family
        self.outcome_features = outcome_features
        self.center_outcome = center_outcome
        self.compute_cov = compute_cov
        self.max_iter = max_iter
        self.tol = tol

    def _validate_spec(self, panel: Panel):
        spec = self.spec
        if spec.link != "identity":
            raise GestError("IV estimation is implemented for the identity link")
        for t in spec.terms:
            if t.source_m == 0:
                raise GestError("IV blips must not model an effect of the instrument")
            vars_ = compile_expression(t.expression).variables
            for v in vars_:
                if v == "a0":
                    raise GestError("IV blip expressions must not reference a0")
                if v.startswith("y") or (v[-1].isdigit() and not v.startswith("a")
                                         and int("".join(c for c in v if c.isdigit())) > 0):
                    raise GestError(
                        f"IV blip expressions may only use baseline covariates; got {v!r}"
                    )

    def fit(self, panel: Panel) -> "IvGEstimator":
        if panel.survival:
            raise GestError("IV estimation needs a mean-mode panel")
        self._validate_spec(panel)
        spec = self.spec
        design = PanelBlipDesign(panel, spec)
        env = panel.env()
        n = panel.n_subjects

        prop = fit_propensity(panel, {0: tuple(self.instrument_features)},
                              family=self.propensity_family)
        r0 = panel.A[:, 0] - prop.mean(panel, 0)
        W0 = design_matrix(panel, tuple(self.outcome_features), 0, include_am=False)
        center = _residualizer(W0) if self.center_outcome else (lambda x: x)

        ks = sorted({t.target_k for t in spec.terms})
        G = {k: np.zeros((n, spec.p)) for k in ks}
        for t in spec.terms:
            G[t.target_k][:, t.psi_index] += np.broadcast_to(
                np.asarray(compile_expression(t.expression)(env), dtype=float), (n,))

        M = np.zeros((spec.p, spec.p))
        b = np.zeros(spec.p)
        ks_all = design.ks_after(0)
        for k in ks:
            kk = ks_all.index(k)
            D = r0[:, None] * G[k]
            y = center(panel.Y[:, k])
            phi = center(design.cum(0, k))
            M += D.T @ phi
            b += D.T @ y
        if np.linalg.matrix_rank(M) < spec.p:
            raise GestError("singular IV system: instrument does not move the "
                            "indexed treatment features")
        psi = np.linalg.solve(M, b)
        norm = float(np.max(np.abs(b - M @ psi)))

        diagnostics: dict = {"warnings": [], "notes": []}
        tmin = self._first_stage_tstats(panel, diagnostics)

        cov = np.full((spec.p, spec.p), np.nan)
        if self.compute_cov:
            cov = self._sandwich(panel, design, prop, W0, G, ks, psi)

        self.propensity_ = prop
        self.psi_ = psi
        self.cov_ = cov
        self.result_ = EstimateResult(psi=psi, cov=cov, converged=True, n_iter=1,
                                      equation_norm=norm, mode="closed-form",
                                      diagnostics=diagnostics)
        return self

    def _first_stage_tstats(self, panel: Panel, diagnostics: dict):
        z = panel.A[:, 0]
        X = np.column_stack([np.ones(panel.n_subjects), z])
        tmin = np.inf
        times = sorted({t.source_m for t in self.spec.terms})
        for m in times:
            a = panel.A[:, m]
            coef, *_ = np.linalg.lstsq(X, a, rcond=None)
            resid = a - X @ coef
            dof = max(len(a) - 2, 1)
            s2 = float(resid @ resid) / dof
            xtx_inv = np.linalg.inv(X.T @ X)
            se = np.sqrt(s2 * xtx_inv[1, 1])
            t_stat = abs(coef[1]) / se if se > 0 else np.inf
            tmin = min(tmin, t_stat)
            if t_stat < 2.0:
                diagnostics["warnings"].append(
                    f"weak instrument: first-stage |t| = {t_stat:.2f} for "
                    f"treatment at time {m}"
                )
        diagnostics["first_stage_min_t"] = float(tmin)
        return tmin

    def _sandwich(self, panel, design, prop, W0, G, ks, psi):
        p = self.spec.p
        ks_all = design.ks_after(0)
        beta = {}
        if self.center_outcome:
            for k in ks:
                kk = ks_all.index(k)
                U = design.blipdown(psi, 0)[:, kk]
                beta[k], *_ = np.linalg.lstsq(W0, U, rcond=None)
        alpha0 = prop.coef_vector()
        beta0 = np.concatenate([beta[k] for k in sorted(beta)]) if beta else np.zeros(0)
        theta0 = np.concatenate([alpha0, beta0, psi])
        n_alpha, n_beta = len(alpha0), len(beta0)

        def contributions(theta):
            a_vec = theta[:n_alpha]
            b_vec = theta[n_alpha:n_alpha + n_beta]
            psi_c = theta[n_alpha + n_beta:]
            alpha_coef = prop.with_coef_vector(a_vec)
            cols = [prop.scores(panel, coef=alpha_coef)]
            beta_c = {}
            pos = 0
            for k in sorted(beta):
                q = len(beta[k])
                beta_c[k] = b_vec[pos:pos + q]
                pos += q
            X0 = prop._design(panel, 0)
            eta = X0 @ alpha_coef[0]
            mean = expit(eta) if prop.family == "bernoulli-logit" else eta
            r0 = panel.A[:, 0] - mean
            s = np.zeros((panel.n_subjects, p))
            for k in ks:
                kk = ks_all.index(k)
                U = design.blipdown(psi_c, 0)[:, kk]
                if self.center_outcome:
                    r = U - W0 @ beta_c[k]
                    cols.append(r[:, None] * W0)
                else:
                    r = U
                s += (r0 * r)[:, None] * G[k]
            cols.append(s)
            return np.concatenate(cols, axis=1)

        cov_full = stacked_sandwich(contributions, theta0)
        return cov_full[-p:, -p:]


class LogisticSmmEstimator(_BaseGEstimator):
    """Plug-in G-estimation for a point-treatment logistic structural mean model.

    The counterfactual transform needs a fitted model for E(Y | L, A); the
    result is therefore not doubly robust and the diagnostics say so.
    """

    def __init__(self, spec: BlipSpec, propensity_features=None,
                 outcome_mean_features=(), outcome_features=(),
                 center_outcome: bool = True, max_iter: int = 100,
                 tol: float = 1e-8, compute_cov: bool = True):
        self.spec = spec
        self.propensity_features = propensity_features
        self.outcome_mean_features = outcome_mean_features
        self.outcome_features = outcome_features
        self.center_outcome = center_outcome
        self.max_iter = max_iter
        self.tol = tol
        self.compute_cov = compute_cov

    # reuse the base propensity configuration defaults
    propensity_family = "bernoulli-logit"
    known_propensity = None
    known_propensity_scale = "probability"

    def fit(self, panel: Panel) -> "LogisticSmmEstimator":
        spec = self.spec
        if panel.K != 0 or panel.survival:
            raise GestError("logistic SMM estimation requires a point-treatment panel")
        if spec.link != "logit":
            raise GestError("spec link must be 'logit'")
        mean_model = OutcomeMeanModel(tuple(self.outcome_mean_features)).fit(panel)
        mhat = mean_model.predict(panel)
        if np.any(mhat <= 0.0) or np.any(mhat >= 1.0):
            raise GestError("fitted outcome means leave (0, 1)")
        design = PanelBlipDesign(panel, spec)
        phi = design.phi[(0, 1)]
        base_logit = logit(mhat)

        dfeat = _index_features(panel, spec.terms, spec.p, "bernoulli-logit")
        _check_treatment_variation(panel, {0})
        prop = fit_propensity(panel, _as_feature_dict(self.propensity_features))
        r0 = prop.residual(panel, 0)
        D = r0[:, None] * dfeat[(0, 1)]
        W0 = design_matrix(panel, tuple(self.outcome_features), 0, include_am=False)
        center = _residualizer(W0) if self.center_outcome else (lambda x: x)

        def u_and_jac(psi):
            u = expit(base_logit - phi @ psi)
            J = -(u * (1.0 - u))[:, None] * phi
            return u, J

        psi = np.zeros(spec.p)
        u, J = u_and_jac(psi)
        F = D.T @ center(u)
        JF = D.T @ center(J)
        norm = float(np.max(np.abs(F)))
        converged = norm < self.tol
        it = 0
        while not converged and it < self.max_iter:
            it += 1
            try:
                step = np.linalg.solve(JF, F)
            except np.linalg.LinAlgError:
                raise GestError("singular Jacobian in logistic SMM solve") from None
            scale = 1.0
            moved = False
            for _ in range(30):
                cand = psi - scale * step
                u, J = u_and_jac(cand)
                Fc = D.T @ center(u)
                nc = float(np.max(np.abs(Fc)))
                if nc < norm:
                    psi, F, norm, moved = cand, Fc, nc, True
                    JF = D.T @ center(J)
                    break
                scale *= 0.5
            if not moved:
                break
            converged = norm < self.tol
        if not converged:
            raise GestError("logistic SMM equations did not converge")

        diagnostics = {
            "warnings": [],
            "notes": ["not doubly robust; consistency requires the "
                      "outcome-mean model"],
        }
        cov = np.full((spec.p, spec.p), np.nan)
        if self.compute_cov:
            cov = self._sandwich(panel, prop, mean_model, phi, dfeat[(0, 1)],
                                 W0, psi)
        self.mean_model_ = mean_model
        self.propensity_ = prop
        self.psi_ = psi
        self.cov_ = cov
        self.result_ = EstimateResult(psi=psi, cov=cov, converged=True,
                                      n_iter=it, equation_norm=norm,
                                      mode="root-find", diagnostics=diagnostics)
        return self

    def _sandwich(self, panel, prop, mean_model, phi, G, W0, psi):
        p = self.spec.p
        X_mean = design_matrix(panel, tuple(self.outcome_mean_features),
                               panel.K, include_am=True)
        eta0 = mean_model.coef_
        beta0 = np.zeros(0)
        if self.center_outcome:
            u = expit(logit(mean_model.predict(panel)) - phi @ psi)
            beta0, *_ = np.linalg.lstsq(W0, u, rcond=None)
        alpha0 = prop.coef_vector()
        theta0 = np.concatenate([alpha0, eta0, beta0, psi])
        n_a, n_e, n_b = len(alpha0), len(eta0), len(beta0)

        def contributions(theta):
            a_vec = theta[:n_a]
            e_vec = theta[n_a:n_a + n_e]
            b_vec = theta[n_a + n_e:n_a + n_e + n_b]
            psi_c = theta[n_a + n_e + n_b:]
            alpha_coef = prop.with_coef_vector(a_vec)
            cols = [prop.scores(panel, coef=alpha_coef),
                    mean_model.scores(panel, coef=e_vec)]
            mhat = expit(X_mean @ e_vec)
            u = expit(logit(mhat) - phi @ psi_c)
            if self.center_outcome:
                r = u - W0 @ b_vec
                cols.append(r[:, None] * W0)
            else:
                r = u
            X0 = prop._design(panel, 0)
            r0 = panel.A[:, 0] - expit(X0 @ alpha_coef[0])
            cols.append((r0 * r)[:, None] * G)
            return np.concatenate(cols, axis=1)

        cov_full = stacked_sandwich(contributions, theta0)
        return cov_full[-p:, -p:]


class SensitivitySweep(_BaseGEstimator):
    """Re-solve the G-equations under exponential-tilt departures from ignorability.

    For each tilt magnitude the treatment model is refit by maximum likelihood
    with the tilt as a logit offset (the tilt depends on the blipped-down
    outcome, so the whole thing alternates between solving for psi and
    updating the tilt until the estimate stabilises).
    """

    def __init__(self, spec: BlipSpec, sens: SensitivitySpec,
                 propensity_features=None, outcome_features=None,
                 center_outcome: bool = True, max_sweeps: int = 50,
                 tol: float = 1e-8, compute_cov: bool = True):
        self.spec = spec
        self.sens = sens
        self.propensity_features = propensity_features
        self.outcome_features = outcome_features
        self.center_outcome = center_outcome
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.compute_cov = compute_cov

    propensity_family = "bernoulli-logit"
    known_propensity = None
    known_propensity_scale = "probability"

    def fit(self, panel: Panel) -> "SensitivitySweep":
        spec = self.spec
        if spec.link != "identity":
            raise GestError("sensitivity sweeps are implemented for the identity link")
        if not set(np.unique(panel.A)) <= {0.0, 1.0}:
            raise GestError("sensitivity analysis requires binary treatments")
        for m in range(panel.K + 1):
            if m + 1 not in panel.outcome_times:
                raise GestError(
                    "the built-in tilt needs the outcome declared at every time m+1"
                )
        design = PanelBlipDesign(panel, spec)
        dfeat = _index_features(panel, spec.terms, spec.p, "bernoulli-logit")
        _check_treatment_variation(panel, {m for (m, _) in dfeat})
        W = self._centering_designs(panel)
        blocks = sorted(dfeat)
        centerers = {m: _residualizer(W[m]) for m in {mk[0] for mk in blocks}} \
            if self.center_outcome else None
        feats = _as_feature_dict(self.propensity_features)

        self.results_ = []
        for gamma in self.sens.gammas:
            self.results_.append(
                (float(gamma), self._fit_one(panel, design, dfeat, blocks,
                                             centerers, W, feats, gamma)))
        return self

    def _offsets(self, panel, design, gamma, psi):
        fn = self.sens.offsets_fn(gamma)
        return {m: np.asarray(fn(design.blipdown(psi, m), panel, m), dtype=float)
                for m in range(panel.K + 1)}

    def _solve_given_resid(self, panel, design, dfeat, blocks, centerers, resid_a):
        p = self.spec.p
        M = np.zeros((p, p))
        b = np.zeros(p)
        for (m, k) in blocks:
            D = resid_a[m][:, None] * dfeat[(m, k)]
            y = panel.Y[:, k]
            phi = design.cum(m, k)
            if centerers is not None:
                y = centerers[m](y)
                phi = centerers[m](phi)
            M += D.T @ phi
            b += D.T @ y
        if np.linalg.matrix_rank(M) < p:
            raise GestError("singular estimating system under the tilt")
        return np.linalg.solve(M, b)

    def _fit_one(self, panel, design, dfeat, blocks, centerers, W, feats, gamma):
        psi = np.zeros(self.spec.p)
        converged = False
        sweeps = 0
        prop = None
        offsets = None
        for sweeps in range(1, self.max_sweeps + 1):
            offsets = self._offsets(panel, design, gamma, psi)
            try:
                prop = fit_propensity(panel, feats, offsets=offsets)
            except (NuisanceError, PerfectSeparationError) as exc:
                return EstimateResult(
                    psi=np.full(self.spec.p, np.nan),
                    cov=np.full((self.spec.p, self.spec.p), np.nan),
                    converged=False, n_iter=sweeps, equation_norm=np.nan,
                    mode="tilted", diagnostics={"warnings": [str(exc)]})
            resid_a = {}
            for m in range(panel.K + 1):
                eta = prop._design(panel, m) @ prop.coef[m] + offsets[m]
                resid_a[m] = panel.A[:, m] - expit(eta)
            new_psi = self._solve_given_resid(panel, design, dfeat, blocks,
                                              centerers, resid_a)
            if np.max(np.abs(new_psi - psi)) < self.tol:
                psi = new_psi
                converged = True
                break
            psi = new_psi
        diagnostics: dict = {"warnings": [], "gamma": float(gamma)}
        if not converged:
            diagnostics["warnings"].append(
                f"tilt fixed point did not stabilise within {self.max_sweeps} sweeps"
            )
        cov = np.full((self.spec.p, self.spec.p), np.nan)
        if self.compute_cov and converged:
            cov = self._sandwich(panel, design, prop, W, dfeat, blocks, psi, gamma)
        norm = 0.0
        return EstimateResult(psi=psi, cov=cov, converged=converged,
                              n_iter=sweeps, equation_norm=norm, mode="tilted",
                              diagnostics=diagnostics)

    def _sandwich(self, panel, design, prop, W, dfeat, blocks, psi, gamma):
        p = self.spec.p
        beta = {}
        if self.center_outcome:
            for (m, k) in blocks:
                ks = design.ks_after(m)
                kk = ks.index(k)
                U = design.blipdown(psi, m)[:, kk]
                beta[(m, k)], *_ = np.linalg.lstsq(W[m], U, rcond=None)
        alpha0 = prop.coef_vector()
        beta_keys = sorted(beta)
        beta0 = np.concatenate([beta[k] for k in beta_keys]) if beta_keys else np.zeros(0)
        theta0 = np.concatenate([alpha0, beta0, psi])
        n_a, n_b = len(alpha0), len(beta0)

        def contributions(theta):
            a_vec = theta[:n_a]
            b_vec = theta[n_a:n_a + n_b]
            psi_c = theta[n_a + n_b:]
            alpha_coef = prop.with_coef_vector(a_vec)
            offsets = self._offsets(panel, design, gamma, psi_c)
            cols = [prop.scores(panel, coef=alpha_coef, offsets=offsets)]
            beta_c = {}
            pos = 0
            for key in beta_keys:
                q = len(beta[key])
                beta_c[key] = b_vec[pos:pos + q]
                pos += q
            s = np.zeros((panel.n_subjects, p))
            for (m, k) in blocks:
                ks = design.ks_after(m)
                kk = ks.index(k)
                U = design.blipdown(psi_c, m)[:, kk]
                if self.center_outcome:
                    r = U - W[m] @ beta_c[(m, k)]
                    cols.append(r[:, None] * W[m])
                else:
                    r = U
                eta = prop._design(panel, m) @ alpha_coef[m] + offsets[m]
                ra = panel.A[:, m] - expit(eta)
                s += (ra * r)[:, None] * dfeat[(m, k)]
            cols.append(s)
            # keep the beta columns adjacent per block ordering used above
            return np.concatenate(cols, axis=1)

        cov_full = stacked_sandwich(contributions, theta0)
        return cov_full[-p:, -p:]


def run_grid(grid: GridSpec, stat_fn, level: float, p: int, refine: bool = True):
    """Evaluate a score statistic over a grid and invert the test.

    ``stat_fn`` returns the statistic (NaN marks an undefined point).  Ties in
    the lattice argmin break toward the smallest-norm parameter; a one-step
    per-axis parabolic interpolation then moves the point estimate off the
    lattice (the accepted set stays on it).
    """
    points = grid.points()
    stats_arr = np.empty(len(points))
    for i, psi in enumerate(points):
        stats_arr[i] = stat_fn(psi)
    threshold = float(stats.chi2.ppf(level, p))
    finite = np.isfinite(stats_arr)
    if not finite.any():
        raise GestError("grid statistic undefined everywhere")
    best = np.nanmin(stats_arr[finite])
    tie = finite & (np.abs(stats_arr - best) <= 1e-12)
    candidates = points[tie]
    order = np.argsort(np.linalg.norm(candidates, axis=1), kind="stable")
    psi_hat = candidates[order[0]].copy()
    if refine:
        psi_hat = _parabolic_refine(grid, points, stats_arr, psi_hat)
    cset = ConfidenceSet(grid=points, statistic=stats_arr, level=level,
                         threshold=threshold)
    warnings = []
    if cset.accepted.size == 0:
        warnings.append(
            f"empty confidence set at level {level}: the grid may not cover "
            "the solution region"
        )
    return psi_hat, cset, warnings


def _parabolic_refine(grid: GridSpec, points, stats_arr, psi_hat):
    """Quadratic vertex through the argmin and its axis neighbours."""
    shape = tuple(grid.num)
    arr = stats_arr.reshape(shape)
    idx = []
    for j, ax in enumerate(grid.axes()):
        idx.append(int(np.argmin(np.abs(ax - psi_hat[j]))))
    refined = psi_hat.copy()
    for j, ax in enumerate(grid.axes()):
        i = idx[j]
        if i == 0 or i == len(ax) - 1:
            continue
        sel_lo = tuple(idx[:j] + [i - 1] + idx[j + 1:])
        sel_mid = tuple(idx)
        sel_hi = tuple(idx[:j] + [i + 1] + idx[j + 1:])
        t_lo, t_mid, t_hi = arr[sel_lo], arr[sel_mid], arr[sel_hi]
        if not (np.isfinite(t_lo) and np.isfinite(t_mid) and np.isfinite(t_hi)):
            continue
        denom = t_lo - 2.0 * t_mid + t_hi
        if denom <= 0:
            continue
        h = ax[1] - ax[0]
        delta = 0.5 * h * (t_lo - t_hi) / denom
        refined[j] = ax[i] + float(np.clip(delta, -0.5 * h, 0.5 * h))
    return refined


def coordinate_descent_points(grid: GridSpec, stat_fn, max_sweeps: int = 10):
    """Nested per-coordinate grid search for p > 3; returns evaluated points."""
    axes = grid.axes()
    current = np.array([0.5 * (lo + hi) for lo, hi in zip(grid.lower, grid.upper)])
    evaluated: dict[tuple, float] = {}

    def eval_point(psi):
        key = tuple(np.round(psi, 12))
        if key not in evaluated:
            evaluated[key] = stat_fn(np.asarray(psi))
        return evaluated[key]

    for _ in range(max_sweeps):
        moved = False
        for j in range(grid.p):
            best_val, best_x = np.inf, current[j]
            for x in axes[j]:
                cand = current.copy()
                cand[j] = x
                val = eval_point(cand)
                if np.isfinite(val) and val < best_val - 1e-12:
                    best_val, best_x = val, x
            if best_x != current[j]:
                current[j] = best_x
                moved = True
        if not moved:
            break
    pts = np.array([list(k) for k in evaluated])
    vals = np.array([evaluated[tuple(r)] for r in pts])
    return pts, vals


class SdmGridEstimator(_BaseGEstimator):
    """Test-inversion G-estimation for structural (nested) distribution models.

    At each candidate parameter the blipped-down outcomes are centered on
    history and paired with centered treatments through the model's index
    expressions; the quadratic-form score statistic is minimised over the grid
    and thresholded against the chi-square quantile for the confidence set.
    """

    def __init__(self, spec: SndmSpec, grid: GridSpec, level: float = 0.95,
                 propensity_features=None, propensity_family: str = "bernoulli-logit",
                 known_propensity=None, known_propensity_scale: str = "probability",
                 outcome_features=None, center_outcome: bool = True,
                 d_features=None):
        self.spec = spec
        self.grid = grid
        self.level = level
        self.propensity_features = propensity_features
        self.propensity_family = propensity_family
        self.known_propensity = known_propensity
        self.known_propensity_scale = known_propensity_scale
        self.outcome_features = outcome_features
        self.center_outcome = center_outcome
        self.d_features = d_features

    def _score_builder(self, panel: Panel):
        from .blip import PanelSndmDesign

        spec = self.spec
        p = spec.p
        design = PanelSndmDesign(panel, spec)
        prop = self._fit_propensity(panel)
        resid_a = {m: prop.residual(panel, m) for m in range(panel.K + 1)}
        ell = prop.scores(panel)
        W = self._centering_designs(panel)
        centerers = {m: _residualizer(W[m]) for m in W}
        dterms = _index_terms(spec.terms, self.d_features)
        pairs = sorted({(t.source_m, t.target_k) for t in dterms})
        n = panel.n_subjects
        base_env = panel.env()

        # index features split into a precomputed static part and terms that
        # reference blipped-down outcomes (those move with psi)
        static_G: dict[tuple[int, int], np.ndarray] = {}
        dynamic: dict[tuple[int, int], list] = {}
        for (m, k) in pairs:
            static_G[(m, k)] = np.zeros((n, p))
            dynamic[(m, k)] = []
        for t in dterms:
            key = (t.source_m, t.target_k)
            expr = compile_expression(t.expression)
            m = t.source_m
            y_future = [v for v in expr.variables
                        if v.startswith("y") and v[1:].isdigit() and int(v[1:]) > m]
            if y_future:
                dynamic[key].append((t.psi_index, expr))
            else:
                env = dict(base_env)
                env[f"a{m}"] = 1.0
                static_G[key][:, t.psi_index] += np.broadcast_to(np.asarray(
                    expr(env), dtype=float), (n,))

        def scores_at(psi):
            U = design.blipdown(psi)
            s = np.zeros((n, p))
            for (m, k) in pairs:
                G = static_G[(m, k)]
                if dynamic[(m, k)]:
                    G = G.copy()
                    for idx, expr in dynamic[(m, k)]:
                        env = {}
                        for v in expr.variables:
                            if v == f"a{m}":
                                env[v] = 1.0
                            elif v.startswith("y") and v[1:].isdigit() \
                                    and int(v[1:]) > m:
                                env[v] = U[m][:, int(v[1:]) - (m + 1)]
                            else:
                                env[v] = base_env[v]
                        G[:, idx] += np.broadcast_to(np.asarray(
                            expr(env), dtype=float), (n,))
                u = U[m][:, k - (m + 1)]
                if self.center_outcome:
                    u = centerers[m](u)
                s += (resid_a[m] * u)[:, None] * G
            return s

        return scores_at, ell, prop

    def fit(self, panel: Panel) -> "SdmGridEstimator":
        spec = self.spec
        p = spec.p
        if self.grid.p != p:
            raise GestError(f"grid dimension {self.grid.p} != parameter dimension {p}")
        scores_at, ell, prop = self._score_builder(panel)
        proj = nuisance_projector(ell)

        def stat_fn(psi):
            try:
                stat, _, _ = score_quadratic(scores_at(psi), projector=proj)
            except MEstimationError:
                raise GestError("singular score variance on the grid") from None
            return stat

        if p <= 3:
            psi_hat, cset, warnings = run_grid(self.grid, stat_fn, self.level, p)
        else:
            points, vals = coordinate_descent_points(self.grid, stat_fn)
            threshold = float(stats.chi2.ppf(self.level, p))
            order = np.lexsort((np.linalg.norm(points, axis=1), vals))
            psi_hat = points[order[0]]
            cset = ConfidenceSet(grid=points, statistic=vals, level=self.level,
                                 threshold=threshold)
            warnings = [] if cset.accepted.size else ["empty confidence set"]

        cov = self._grid_cov(scores_at, ell, psi_hat)
        self.propensity_ = prop
        self.psi_ = psi_hat
        self.cov_ = cov
        self.confidence_set_ = cset
        self.result_ = EstimateResult(
            psi=psi_hat, cov=cov, converged=True, n_iter=len(cset.grid),
            equation_norm=float(np.linalg.norm(scores_at(psi_hat).sum(axis=0))),
            mode="grid", diagnostics={"warnings": warnings, "notes": []})
        return self

    def score_statistic(self, panel: Panel, psi) -> float:
        """Statistic at one parameter value (used for coverage checks)."""
        scores_at, ell, _ = self._score_builder(panel)
        stat, _, _ = score_quadratic(scores_at(np.asarray(psi, dtype=float)), ell)
        return float(stat)

    def _grid_cov(self, scores_at, ell, psi_hat) -> np.ndarray:
        """Local sandwich from finite-difference derivatives of the summed score."""
        p = len(psi_hat)
        try:
            _, S, V = score_quadratic(scores_at(psi_hat), ell)
            J = np.empty((p, p))
            for j in range(p):
                h = 1e-5 * max(1.0, abs(psi_hat[j]))
                up = psi_hat.copy()
                dn = psi_hat.copy()
                up[j] += h
                dn[j] -= h
                J[:, j] = (scores_at(up).sum(axis=0)
                           - scores_at(dn).sum(axis=0)) / (2 * h)
            Jinv = np.linalg.inv(J)
            cov = Jinv @ V @ Jinv.T
            return 0.5 * (cov + cov.T)
        except np.linalg.LinAlgError:
            return np.full((p, p), np.nan)
