"""Blip-function specifications and counterfactual transforms.

A blip parameterizes the effect of the treatment given at one time on a later
outcome, with all treatments after that time held at the reference level 0.
Blips here are linear in the parameter vector: each term is a declared
expression over the history multiplied by one parameter component, and the
whole term is multiplied by the current treatment value so that a reference
level of 0 kills it structurally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .expr import compile_expression
from .panel import Panel, HistoryView, SubjectRecord

__all__ = [
    "BlipError",
    "BlipTerm",
    "BlipSpec",
    "SndmSpec",
    "SaftmTerm",
    "SaftmSpec",
    "PanelBlipDesign",
    "PanelSndmDesign",
    "eval_blip",
    "transform_point",
    "blipdown_snmm",
    "blipdown_sndm",
    "blip_jacobian",
]

_OVERFLOW = 700.0


class BlipError(ValueError):
    pass


@dataclass(frozen=True)
class BlipTerm:
    """One additive term: psi[psi_index] * expression(history) * a_{source_m}."""

    target_k: int
    source_m: int
    expression: str
    psi_index: int

    def __post_init__(self):
        if self.source_m > self.target_k - 1:
            raise BlipError(
                f"term with source_m={self.source_m} must target an outcome at "
                f"k >= source_m+1, got k={self.target_k}"
            )
        if self.psi_index < 0 or self.source_m < 0:
            raise BlipError("negative index in blip term")
        compile_expression(self.expression)


@dataclass(frozen=True)
class BlipSpec:
    """Mean-scale blip collection gamma*_{m,k} with a shared parameter vector."""

    link: str
    terms: tuple[BlipTerm, ...]
    p: int | None = None

    def __post_init__(self):
        if self.link not in ("identity", "log", "logit"):
            raise BlipError(f"unknown link {self.link!r}")
        if not self.terms:
            raise BlipError("blip spec needs at least one term")
        object.__setattr__(self, "terms", tuple(self.terms))
        need = 1 + max(t.psi_index for t in self.terms)
        if self.p is None:
            object.__setattr__(self, "p", need)
        elif self.p < need:
            raise BlipError(f"declared p={self.p} smaller than used indices ({need})")

    def pairs(self):
        """Sorted distinct (m, k) pairs with at least one term."""
        return sorted({(t.source_m, t.target_k) for t in self.terms})

    def check_dim(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (self.p,):
            raise BlipError(f"psi has dimension {psi.shape}, expected ({self.p},)")
        return psi


@dataclass(frozen=True)
class SndmSpec:
    """Distribution-scale blips in shift form: gamma_{m,k} = y_k - a_m * (features . psi).

    Expressions may additionally reference y_{m+1}..y_{k-1}; per the backward
    recursion those stand for the observed Y_{m+1} followed by the already
    blipped-down values at later indices.
    """

    terms: tuple[BlipTerm, ...]
    p: int | None = None

    def __post_init__(self):
        if not self.terms:
            raise BlipError("SNDM spec needs at least one term")
        object.__setattr__(self, "terms", tuple(self.terms))
        need = 1 + max(t.psi_index for t in self.terms)
        if self.p is None:
            object.__setattr__(self, "p", need)
        elif self.p < need:
            raise BlipError(f"declared p={self.p} smaller than used indices ({need})")

    def check_dim(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (self.p,):
            raise BlipError(f"psi has dimension {psi.shape}, expected ({self.p},)")
        return psi


@dataclass(frozen=True)
class SaftmTerm:
    """Per-time log-scale rate term, applied at every treatment time.

    Expressions use relative names: bare covariate names refer to the value at
    the current time, ``aprev`` to the previous treatment (0 at time 0).
    """

    expression: str
    psi_index: int

    def __post_init__(self):
        if self.psi_index < 0:
            raise BlipError("negative psi index")
        compile_expression(self.expression)


@dataclass(frozen=True)
class SaftmSpec:
    """Accelerated failure-time blip: residual life past t_m scales by exp(a_m * features . psi)."""

    terms: tuple[SaftmTerm, ...]
    p: int | None = None

    def __post_init__(self):
        if not self.terms:
            raise BlipError("SAFTM spec needs at least one term")
        object.__setattr__(self, "terms", tuple(self.terms))
        need = 1 + max(t.psi_index for t in self.terms)
        if self.p is None:
            object.__setattr__(self, "p", need)
        elif self.p < need:
            raise BlipError(f"declared p={self.p} smaller than used indices ({need})")

    def check_dim(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (self.p,):
            raise BlipError(f"psi has dimension {psi.shape}, expected ({self.p},)")
        return psi

    def rate(self, env: Mapping[str, object], a, psi: np.ndarray):
        """a * (features . psi) for one time, given that time's relative env."""
        total = 0.0
        for t in self.terms:
            total = total + psi[t.psi_index] * compile_expression(t.expression)(env)
        return np.asarray(a, dtype=float) * total


def _validate_history_vars(term: BlipTerm, allowed: frozenset[str], what: str):
    expr = compile_expression(term.expression)
    extra = expr.variables - allowed
    if extra:
        raise BlipError(
            f"{what} term ({term.source_m},{term.target_k}) references "
            f"{sorted(extra)} not observable by time {term.source_m}"
        )


def _term_features(spec, env, m: int, k: int, p: int):
    """Per-psi-component feature values (without the a_m factor) at one (m, k)."""
    cols = [0.0] * p
    for t in spec.terms:
        if t.source_m == m and t.target_k == k:
            cols[t.psi_index] = cols[t.psi_index] + compile_expression(t.expression)(env)
    return cols


def eval_blip(spec: BlipSpec, h: HistoryView, psi, m: int, k: int) -> float:
    """Evaluate gamma*_{m,k} on one subject's history."""
    psi = spec.check_dim(psi)
    if m != h.m:
        raise BlipError(f"history is through time {h.m}, blip asked at m={m}")
    if k <= m:
        raise BlipError(f"blip target k={k} must exceed m={m}")
    env = h.env()
    feats = _term_features(spec, env, m, k, spec.p)
    return float(h.Abar[m] * sum(psi[j] * feats[j] for j in range(spec.p)))


def _gamma_record(spec: BlipSpec, record: SubjectRecord, psi: np.ndarray,
                  m: int, k: int) -> float:
    env = record.env()
    feats = _term_features(spec, env, m, k, spec.p)
    return float(record.A[m] * sum(psi[j] * feats[j] for j in range(spec.p)))


def transform_point(spec: BlipSpec, record: SubjectRecord, psi,
                    outcome_model=None) -> float:
    """Counterfactual transform U*(psi) for a point treatment (K = 0)."""
    psi = spec.check_dim(psi)
    if record.K != 0:
        raise BlipError("transform_point requires a point-treatment record (K = 0)")
    if 1 not in record.outcome_times:
        raise BlipError("point transform needs the outcome declared at time 1")
    y = float(record.Y[1])
    gamma = _gamma_record(spec, record, psi, 0, 1)
    if spec.link == "identity":
        return y - gamma
    if spec.link == "log":
        if abs(gamma) > _OVERFLOW:
            raise BlipError("log-link blip overflows exp()")
        return y * float(np.exp(-gamma))
    if outcome_model is None:
        raise BlipError("logit link requires a fitted outcome-mean model")
    mean = float(outcome_model.predict_record(record))
    if not 0.0 < mean < 1.0:
        raise BlipError("fitted outcome mean outside (0, 1)")
    return float(_expit(_logit(mean) - gamma))


def _logit(x):
    return np.log(x) - np.log1p(-x)


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _declared_ks(record: SubjectRecord, m: int):
    ks = [k for k in record.outcome_times if k > m]
    if not ks:
        raise BlipError(f"no declared outcomes after time {m}")
    return ks


def blipdown_snmm(spec: BlipSpec, record: SubjectRecord, psi, m: int) -> np.ndarray:
    """Sequentially remove blip effects from time m on: U*_m(psi).

    Returns one entry per declared outcome time after m.  Only identity and
    log links support this; the logit-link analogue depends on the full
    observed-data law and is deliberately not provided.
    """
    psi = spec.check_dim(psi)
    if spec.link == "logit":
        raise BlipError("sequential blip-down is not supported for the logit link")
    if not 0 <= m <= record.K:
        raise BlipError(f"m={m} outside 0..{record.K}")
    out = []
    for k in _declared_ks(record, m):
        total = sum(_gamma_record(spec, record, psi, l, k) for l in range(m, k))
        y = float(record.Y[k])
        if spec.link == "identity":
            out.append(y - total)
        else:
            if abs(total) > _OVERFLOW:
                raise BlipError("log-link blip sum overflows exp()")
            out.append(y * float(np.exp(-total)))
    return np.array(out)


def blip_jacobian(spec: BlipSpec, record: SubjectRecord, psi, m: int) -> np.ndarray:
    """Analytic d U*_m / d psi, one row per declared outcome time after m."""
    psi = spec.check_dim(psi)
    if spec.link == "logit":
        raise BlipError("sequential blip-down is not supported for the logit link")
    env = record.env()
    rows = []
    for k in _declared_ks(record, m):
        cum = np.zeros(spec.p)
        for l in range(m, min(k, record.K + 1)):
            feats = _term_features(spec, env, l, k, spec.p)
            cum += float(record.A[l]) * np.asarray(feats, dtype=float)
        if spec.link == "identity":
            rows.append(-cum)
        else:
            total = float(cum @ psi)
            rows.append(-float(record.Y[k]) * np.exp(-total) * cum)
    return np.vstack(rows)


def blipdown_sndm(spec: SndmSpec, record: SubjectRecord, psi, m: int) -> np.ndarray:
    """Distribution-model blip-down U_m(psi) by backward recursion over times."""
    psi = spec.check_dim(psi)
    K = record.K
    if not 0 <= m <= K:
        raise BlipError(f"m={m} outside 0..{K}")
    needed = tuple(range(1, K + 2))
    if tuple(record.outcome_times) != needed:
        raise BlipError("SNDM blip-down needs outcomes declared at every time 1..K+1")
    base_env = record.env()
    prev: dict[int, float] = {}
    for level in range(K, m - 1, -1):
        cur: dict[int, float] = {}
        for k in range(level + 1, K + 2):
            env = dict(base_env)
            env[f"y{level + 1}"] = float(record.Y[level + 1])
            for j in range(level + 2, k):
                env[f"y{j}"] = prev[j]
            shifted = float(record.Y[level + 1]) if k == level + 1 else prev[k]
            shift = 0.0
            for t in spec.terms:
                if t.source_m == level and t.target_k == k:
                    shift += psi[t.psi_index] * float(compile_expression(t.expression)(env))
            cur[k] = shifted - float(record.A[level]) * shift
        prev = cur
    return np.array([prev[k] for k in range(m + 1, K + 2)])


class PanelSndmDesign:
    """Vectorised distribution-model blip-down over a whole panel.

    Shift-form transforms whose features only touch observed history and the
    observed next outcome are linear in the parameter, so their blip-down
    reduces to precomputed feature matrices; features that reference
    already-blipped later outcomes fall back to the generic recursion.
    """

    def __init__(self, panel: Panel, spec: SndmSpec):
        self.panel = panel
        self.spec = spec
        K = panel.K
        if panel.survival:
            raise BlipError("SNDM blip-down needs a mean-mode panel")
        if tuple(panel.outcome_times) != tuple(range(1, K + 2)):
            raise BlipError("SNDM blip-down needs outcomes declared at every time 1..K+1")
        self._linear = True
        for t in spec.terms:
            if t.source_m > K:
                raise BlipError(f"SNDM term at m={t.source_m} beyond last treatment time")
            allowed = set(panel.variables_at(t.source_m, include_am=True))
            allowed |= {f"y{j}" for j in range(t.source_m + 1, t.target_k)}
            variables = compile_expression(t.expression).variables
            extra = variables - allowed
            if extra:
                raise BlipError(
                    f"SNDM term ({t.source_m},{t.target_k}) references {sorted(extra)}"
                )
            if any(v.startswith("y") and v[1:].isdigit()
                   and int(v[1:]) > t.source_m + 1 for v in variables):
                self._linear = False
        if self._linear:
            env = panel.env()
            n = panel.n_subjects
            phi: dict[tuple[int, int], np.ndarray] = {}
            for t in spec.terms:
                key = (t.source_m, t.target_k)
                col = np.broadcast_to(np.asarray(
                    compile_expression(t.expression)(env), dtype=float), (n,))
                phi.setdefault(key, np.zeros((n, spec.p)))
                phi[key][:, t.psi_index] = phi[key][:, t.psi_index] \
                    + col * panel.A[:, t.source_m]
            self._cum: dict[int, np.ndarray] = {}
            for m in range(K + 1):
                ks = range(m + 1, K + 2)
                self._cum[m] = np.stack(
                    [sum((phi[(l, k)] for l in range(m, k) if (l, k) in phi),
                         np.zeros((n, spec.p))) for k in ks], axis=1)

    def blipdown(self, psi) -> dict[int, np.ndarray]:
        """m -> (n, K+1-m) matrix of U_m(psi)."""
        psi = self.spec.check_dim(psi)
        panel = self.panel
        K = panel.K
        if self._linear:
            return {m: panel.Y[:, m + 1:K + 2] - self._cum[m] @ psi
                    for m in range(K + 1)}
        base = panel.env()
        out: dict[int, np.ndarray] = {}
        prev: dict[int, np.ndarray] = {}
        for level in range(K, -1, -1):
            cur: dict[int, np.ndarray] = {}
            y_next = panel.Y[:, level + 1]
            for k in range(level + 1, K + 2):
                env = dict(base)
                env[f"y{level + 1}"] = y_next
                for j in range(level + 2, k):
                    env[f"y{j}"] = prev[j]
                shifted = y_next if k == level + 1 else prev[k]
                shift = np.zeros(panel.n_subjects)
                for t in self.spec.terms:
                    if (t.source_m, t.target_k) == (level, k):
                        shift = shift + psi[t.psi_index] * np.asarray(
                            compile_expression(t.expression)(env), dtype=float)
                cur[k] = shifted - panel.A[:, level] * shift
            prev = cur
            out[level] = np.column_stack([cur[k] for k in range(level + 1, K + 2)])
        return out

    def index_env(self, psi, m: int, U: dict[int, np.ndarray]) -> dict:
        """Env for index expressions at level m: future y's map to blipped values."""
        env = dict(self.panel.env())
        for j in range(m + 1, self.panel.K + 2):
            env[f"y{j}"] = U[m][:, j - (m + 1)]
        return env


class PanelBlipDesign:
    """Vectorised blip features over a whole panel.

    ``phi[(m, k)]`` holds the (n, p) feature matrix including the structural
    a_m factor; ``g[(m, k)]`` the same without it (used to build index
    functions and treatment-expectation centering).
    """

    def __init__(self, panel: Panel, spec: BlipSpec):
        self.panel = panel
        self.spec = spec
        env = panel.env()
        n = panel.n_subjects
        self.phi: dict[tuple[int, int], np.ndarray] = {}
        self.g: dict[tuple[int, int], np.ndarray] = {}
        for (m, k) in spec.pairs():
            if m > panel.K:
                raise BlipError(f"blip term at m={m} beyond last treatment time {panel.K}")
            if k not in panel.outcome_times:
                raise BlipError(f"blip targets undeclared outcome time {k}")
            allowed = panel.variables_at(m, include_am=True)
            G = np.zeros((n, spec.p))
            for t in spec.terms:
                if (t.source_m, t.target_k) == (m, k):
                    _validate_history_vars(t, allowed, "blip")
                    G[:, t.psi_index] += np.broadcast_to(
                        np.asarray(compile_expression(t.expression)(env), dtype=float), (n,)
                    )
            self.g[(m, k)] = G
            self.phi[(m, k)] = G * panel.A[:, m][:, None]
        # cumulative features sum_{l=m}^{k-1} phi_{l,k} for blip-down from m
        self._cum: dict[tuple[int, int], np.ndarray] = {}
        for k in panel.outcome_times:
            running = np.zeros((n, spec.p))
            for m in range(min(k - 1, panel.K), -1, -1):
                if (m, k) in self.phi:
                    running = running + self.phi[(m, k)]
                self._cum[(m, k)] = running

    def ks_after(self, m: int):
        return [k for k in self.panel.outcome_times if k > m]

    def cum(self, m: int, k: int) -> np.ndarray:
        return self._cum.get((m, k), np.zeros((self.panel.n_subjects, self.spec.p)))

    def blipdown(self, psi, m: int) -> np.ndarray:
        """(n, n_ks) matrix of U*_m(psi) components."""
        psi = self.spec.check_dim(psi)
        cols = []
        for k in self.ks_after(m):
            total = self.cum(m, k) @ psi
            y = self.panel.Y[:, k]
            if self.spec.link == "identity":
                cols.append(y - total)
            else:
                if np.max(np.abs(total)) > _OVERFLOW:
                    raise BlipError("log-link blip sum overflows exp()")
                cols.append(y * np.exp(-total))
        return np.column_stack(cols)

    def jacobian(self, psi, m: int) -> np.ndarray:
        """(n, n_ks, p) array of dU*_m/dpsi."""
        psi = self.spec.check_dim(psi)
        blocks = []
        for k in self.ks_after(m):
            cum = self.cum(m, k)
            if self.spec.link == "identity":
                blocks.append(-cum)
            else:
                total = cum @ psi
                u = self.panel.Y[:, k] * np.exp(-total)
                blocks.append(-u[:, None] * cum)
        return np.stack(blocks, axis=1)
