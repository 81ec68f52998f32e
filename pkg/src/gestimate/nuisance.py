"""Working models for the treatment process and for outcome centering.

The treatment model (working model A) is fit per time point by maximum
likelihood: Newton iterations for the bernoulli-logit family, closed-form
least squares for the gaussian-identity family.  The outcome working model
(model B) is a per-(m, k) least-squares regression of the blipped-down
outcome on history features.  Both expose per-subject score contributions so
the sandwich variance can stack them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .expr import compile_expression
from .panel import Panel, HistoryView, SubjectRecord

__all__ = [
    "NuisanceError",
    "PerfectSeparationError",
    "design_matrix",
    "PropensityFit",
    "fit_propensity",
    "known_propensity",
    "OutcomeFit",
    "fit_outcome_working",
    "OutcomeMeanModel",
    "tilted_propensity",
    "expit",
    "logit",
]

SEPARATION_BOUND = 30.0  # on standardized features; expit(+-30) is numerically {0,1}


class NuisanceError(ValueError):
    pass


class PerfectSeparationError(NuisanceError):
    pass


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def design_matrix(panel: Panel, exprs: Sequence[str], m: int, include_am: bool,
                  env: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """(n, 1+len(exprs)) design with an implicit leading intercept.

    Expressions may only reference history observable by time m; treatments
    through m-1 unless ``include_am``.
    """
    env = env if env is not None else panel.env()
    allowed = panel.variables_at(m, include_am=include_am)
    n = panel.n_subjects
    cols = [np.ones(n)]
    for text in exprs:
        e = compile_expression(text)
        extra = e.variables - allowed
        if extra:
            raise NuisanceError(
                f"feature {text!r} at time {m} references {sorted(extra)} "
                "not observable there"
            )
        cols.append(np.broadcast_to(np.asarray(e(env), dtype=float), (n,)).astype(float))
    return np.column_stack(cols)


def _fit_logistic(X: np.ndarray, y: np.ndarray, offset: np.ndarray | None = None,
                  names: Sequence[str] = (), tol: float = 1e-10,
                  max_iter: int = 50) -> np.ndarray:
    """Newton MLE for logistic regression on a standardized copy of X.

    Diverging standardized coefficients (|coef| > 30) are reported as perfect
    separation, naming the offending feature.
    """
    n, q = X.shape
    # constant columns (the intercept) stay unscaled and uncentered
    std = X.std(axis=0)
    const = std == 0
    scale = np.where(const, 1.0, std)
    center = np.where(const, 0.0, X.mean(axis=0))
    Z = (X - center) / scale
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(q)
    for _ in range(max_iter):
        eta = Z @ beta + off
        p = expit(eta)
        grad = Z.T @ (y - p)
        if np.max(np.abs(grad)) < tol:
            break
        w = p * (1.0 - p)
        hess = Z.T @ (Z * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise NuisanceError("singular design in treatment model") from None
        beta = beta + step
        bad = np.abs(beta) > SEPARATION_BOUND
        if bad.any():
            j = int(np.nonzero(bad)[0][0])
            name = names[j] if j < len(names) else f"column {j}"
            raise PerfectSeparationError(
                f"perfect separation detected on feature {name!r}"
            )
    # back-transform to the raw feature scale
    coef = beta / scale
    coef[const] = beta[const]
    if const.any():
        j0 = int(np.nonzero(const)[0][0])
        coef[j0] -= float(np.sum((beta / scale)[~const] * center[~const]))
    return coef


@dataclass(frozen=True)
class PropensityFit:
    """Fitted treatment-process model, one coefficient vector per time."""

    family: str
    features: dict[int, tuple[str, ...]]
    coef: dict[int, np.ndarray]
    residual_variance: dict[int, float]
    known: bool = False
    known_scale: str = "logit"

    def _design(self, panel: Panel, m: int) -> np.ndarray:
        return design_matrix(panel, self.features.get(m, ()), m, include_am=False)

    def linear_predictor(self, panel: Panel, m: int) -> np.ndarray:
        return self._design(panel, m) @ self.coef[m]

    def prob(self, panel: Panel, m: int) -> np.ndarray:
        """Fitted P(A_m = 1 | history) (bernoulli family)."""
        if self.family != "bernoulli-logit":
            raise NuisanceError("prob() is only defined for the bernoulli family")
        eta = self.linear_predictor(panel, m)
        return eta if (self.known and self.known_scale == "probability") else expit(eta)

    def mean(self, panel: Panel, m: int) -> np.ndarray:
        """Fitted E(A_m | history) for either family."""
        if self.family == "bernoulli-logit":
            return self.prob(panel, m)
        return self.linear_predictor(panel, m)

    def residual(self, panel: Panel, m: int) -> np.ndarray:
        return panel.A[:, m] - self.mean(panel, m)

    def prob_record(self, h: HistoryView) -> float:
        env = h.env()
        x = [1.0] + [float(compile_expression(t)(env)) for t in self.features.get(h.m, ())]
        eta = float(np.dot(x, self.coef[h.m]))
        return eta if (self.known and self.known_scale == "probability") else float(expit(eta))

    def scores(self, panel: Panel, masks: dict[int, np.ndarray] | None = None,
               coef: dict[int, np.ndarray] | None = None,
               offsets: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """Per-subject stacked score contributions, (n, total params).

        Zero-width for a known propensity.  ``masks`` restricts each time's
        likelihood to at-risk subjects (survival panels).
        """
        n = panel.n_subjects
        if self.known:
            return np.zeros((n, 0))
        coef = coef if coef is not None else self.coef
        blocks = []
        for m in sorted(self.coef):
            X = self._design(panel, m)
            eta = X @ coef[m]
            if offsets is not None and m in offsets:
                eta = eta + offsets[m]
            mean = expit(eta) if self.family == "bernoulli-logit" else eta
            r = panel.A[:, m] - mean
            if masks is not None and m in masks:
                r = r * masks[m]
            blocks.append(r[:, None] * X)
        return np.concatenate(blocks, axis=1) if blocks else np.zeros((n, 0))

    def coef_vector(self) -> np.ndarray:
        if self.known:
            return np.zeros(0)
        return np.concatenate([self.coef[m] for m in sorted(self.coef)])

    def with_coef_vector(self, theta: np.ndarray) -> dict[int, np.ndarray]:
        out = {}
        pos = 0
        for m in sorted(self.coef):
            q = len(self.coef[m])
            out[m] = theta[pos:pos + q]
            pos += q
        return out


def fit_propensity(panel: Panel, features: Mapping[int, Sequence[str]] | None,
                   family: str = "bernoulli-logit",
                   masks: dict[int, np.ndarray] | None = None,
                   offsets: dict[int, np.ndarray] | None = None,
                   times: Sequence[int] | None = None) -> PropensityFit:
    """Fit working model A at each treatment time (all of them by default).

    ``features`` maps time index -> expression list (empty list or missing key
    means intercept-only).  Binary treatments use Newton-iterated logistic
    regression; continuous treatments a homoscedastic gaussian mean model.
    """
    if family not in ("bernoulli-logit", "gaussian-identity"):
        raise NuisanceError(f"unknown propensity family {family!r}")
    features = {int(m): tuple(v) for m, v in (features or {}).items()}
    coef: dict[int, np.ndarray] = {}
    resvar: dict[int, float] = {}
    for m in (range(panel.K + 1) if times is None else times):
        exprs = features.get(m, ())
        X = design_matrix(panel, exprs, m, include_am=False)
        a = panel.A[:, m]
        mask = None if masks is None else masks.get(m)
        if mask is not None:
            X, a = X[mask], a[mask]
        off = None
        if offsets is not None and m in offsets:
            off = offsets[m] if mask is None else offsets[m][mask]
        names = ["intercept"] + list(exprs)
        if family == "bernoulli-logit":
            vals = np.unique(a)
            if not set(vals) <= {0.0, 1.0}:
                raise NuisanceError("bernoulli family requires binary 0/1 treatment")
            if len(vals) < 2:
                raise PerfectSeparationError(
                    f"treatment at time {m} is constant; propensity is degenerate"
                )
            coef[m] = _fit_logistic(X, a, offset=off, names=names)
            resvar[m] = float("nan")
        else:
            sol, _, rank, _ = np.linalg.lstsq(X, a, rcond=None)
            if rank < X.shape[1]:
                raise NuisanceError(f"singular design in treatment model at time {m}")
            coef[m] = sol
            resvar[m] = float(np.mean((a - X @ sol) ** 2))
    return PropensityFit(family=family, features=features, coef=coef,
                         residual_variance=resvar)


def known_propensity(panel: Panel, exprs_by_time: Mapping[int, str],
                     scale: str = "probability") -> PropensityFit:
    """Wrap a known treatment mechanism (no estimation, zero-width scores).

    Each time maps to a single expression giving the treatment probability
    (``scale='probability'``) or its logit.
    """
    if scale not in ("probability", "logit"):
        raise NuisanceError("scale must be 'probability' or 'logit'")
    features = {}
    coef = {}
    for m in range(panel.K + 1):
        try:
            text = exprs_by_time[m]
        except KeyError:
            raise NuisanceError(f"known propensity missing time {m}") from None
        features[m] = (text,)
        coef[m] = np.array([0.0, 1.0])
    return PropensityFit(family="bernoulli-logit", features=features, coef=coef,
                         residual_variance={}, known=True, known_scale=scale)


@dataclass(frozen=True)
class OutcomeFit:
    """Per-(m, k) least-squares centering fits for blipped-down outcomes."""

    features: dict[int, tuple[str, ...]]
    coef: dict[tuple[int, int], np.ndarray]
    sigma2: dict[tuple[int, int], float]

    def predict(self, panel: Panel, m: int, k: int) -> np.ndarray:
        W = design_matrix(panel, self.features.get(m, ()), m, include_am=False)
        return W @ self.coef[(m, k)]


def fit_outcome_working(panel: Panel, spec, psi, features: Mapping[int, Sequence[str]]
                        | None = None) -> OutcomeFit:
    """Working model B: regress each U*_{m,k}(psi) on history features.

    The design at time m covers covariates through m plus treatments through
    m-1; an intercept is always included.
    """
    from .blip import PanelBlipDesign

    design = PanelBlipDesign(panel, spec)
    features = {int(m): tuple(v) for m, v in (features or {}).items()}
    coef: dict[tuple[int, int], np.ndarray] = {}
    sigma2: dict[tuple[int, int], float] = {}
    for m in range(panel.K + 1):
        W = design_matrix(panel, features.get(m, ()), m, include_am=False)
        U = design.blipdown(psi, m)
        for kk, k in enumerate(design.ks_after(m)):
            sol, _, rank, _ = np.linalg.lstsq(W, U[:, kk], rcond=None)
            if rank < W.shape[1]:
                raise NuisanceError(f"singular outcome-working design at time {m}")
            coef[(m, k)] = sol
            sigma2[(m, k)] = float(np.mean((U[:, kk] - W @ sol) ** 2))
    return OutcomeFit(features=features, coef=coef, sigma2=sigma2)


class OutcomeMeanModel:
    """Logistic model for E(Y | history, current treatment) on a point panel.

    Needed by the logit-link transform; also reusable as a generic fitted
    conditional-mean surface.
    """

    def __init__(self, features: Sequence[str] = (), outcome_time: int = 1):
        self.features = tuple(features)
        self.outcome_time = outcome_time

    def fit(self, panel: Panel) -> "OutcomeMeanModel":
        y = panel.Y[:, self.outcome_time]
        if not set(np.unique(y)) <= {0.0, 1.0}:
            raise NuisanceError("outcome-mean model requires binary outcome")
        X = design_matrix(panel, self.features, panel.K, include_am=True)
        names = ["intercept"] + list(self.features)
        self.coef_ = _fit_logistic(X, y, names=names)
        self._panel_vars = panel.covariate_names
        return self

    def predict(self, panel: Panel, env: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        X = design_matrix(panel, self.features, panel.K, include_am=True, env=env)
        return expit(X @ self.coef_)

    def predict_record(self, record: SubjectRecord) -> float:
        env = record.env()
        x = [1.0] + [float(compile_expression(t)(env)) for t in self.features]
        return float(expit(np.dot(x, self.coef_)))

    def scores(self, panel: Panel, coef: np.ndarray | None = None) -> np.ndarray:
        coef = self.coef_ if coef is None else coef
        X = design_matrix(panel, self.features, panel.K, include_am=True)
        r = panel.Y[:, self.outcome_time] - expit(X @ coef)
        return r[:, None] * X


def tilted_propensity(fit: PropensityFit, q: Callable, u, h: HistoryView) -> float:
    """Treatment probability under an exponential-tilt departure from ignorability.

    ``q(u, h, a)`` quantifies the tilt and must vanish at the reference level
    a = 0; the fitted propensity plays the role of the untilted density.
    """
    q0 = float(q(u, h, 0.0))
    if q0 != 0.0:
        raise NuisanceError("tilt function must satisfy q(., ., 0) = 0")
    q1 = float(q(u, h, 1.0))
    if abs(q1) > 700.0:
        raise NuisanceError("tilt exponent overflows exp()")
    p = fit.prob_record(h)
    # p e^q / (p e^q + 1 - p) == expit(logit p + q)
    return float(expit(logit(p) + q1))
