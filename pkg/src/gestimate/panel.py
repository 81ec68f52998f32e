"""Longitudinal panel container and CSV ingestion.

Data follow the ordering L_0, A_0, L_1, A_1, ..., with outcomes measured at
declared time indices (Y_k is also treated as part of the covariate history
from time k onward).  Treatment times are 0..K.  In mean mode the grid has
K+2 points and the last one carries only the final outcome; in survival mode
every grid point is a treatment time and failure/censoring times are
continuous per-subject fields.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "Panel",
    "PanelError",
    "PanelSchema",
    "SubjectRecord",
    "HistoryView",
    "OverlapReport",
    "load_panel",
    "write_panel",
    "history_view",
    "summarize_overlap",
]

_NAME_RE = re.compile(r"^[A-Za-z_]+$")
_RESERVED = {"a", "y"}


class PanelError(ValueError):
    """Raised for malformed input data or schema violations."""


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for the long-format CSV interface.

    ``outcome_times`` defaults to every time index from 1 through K+1.
    ``times`` optionally gives real-valued measurement times; the default is
    the integer time indices themselves.
    """

    subject: str = "subject_id"
    time: str = "time_index"
    treatment: str = "A"
    outcome: str = "Y"
    covariates: tuple[str, ...] = ()
    outcome_times: tuple[int, ...] | None = None
    times: tuple[float, ...] | None = None
    survival: bool = False
    event_time: str = "event_time"
    censor_time: str = "censor_time"
    event_observed: str = "event_observed"

    def __post_init__(self):
        for name in self.covariates:
            if not _NAME_RE.match(name) or name in _RESERVED:
                raise PanelError(
                    f"covariate name {name!r} must be letters/underscores only "
                    "(and not 'a' or 'y') so that time-indexed references parse"
                )


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's complete trajectory."""

    id: str
    L: np.ndarray  # (K+1, n_cov) covariates at treatment times
    A: np.ndarray  # (K+1,)
    Y: np.ndarray  # (n_times,) with NaN at undeclared outcome times
    covariate_names: tuple[str, ...] = ()
    outcome_times: tuple[int, ...] = ()
    time_grid: np.ndarray | None = None
    T: float | None = None
    C: float | None = None
    observed_event: bool | None = None

    @property
    def K(self) -> int:
        return len(self.A) - 1

    def env(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for m in range(self.K + 1):
            out[f"a{m}"] = float(self.A[m])
            for c, name in enumerate(self.covariate_names):
                out[f"{name}{m}"] = float(self.L[m, c])
        for k in self.outcome_times:
            out[f"y{k}"] = float(self.Y[k])
        return out


@dataclass(frozen=True)
class HistoryView:
    """Covariate and treatment history through time index m (inclusive)."""

    id: str
    m: int
    Lbar: np.ndarray  # (m+1, n_cov)
    Abar: np.ndarray  # (m+1,)
    Ybar: np.ndarray  # (m,) outcomes Y_1..Y_m
    covariate_names: tuple[str, ...]

    def env(self) -> dict[str, float]:
        """Expression environment with a0..am, y1..ym and covariate values."""
        out: dict[str, float] = {}
        for j in range(self.m + 1):
            out[f"a{j}"] = float(self.Abar[j])
            for c, name in enumerate(self.covariate_names):
                out[f"{name}{j}"] = float(self.Lbar[j, c])
        for k in range(1, self.m + 1):
            out[f"y{k}"] = float(self.Ybar[k - 1])
        return out


@dataclass(frozen=True)
class Panel:
    """Immutable panel of subjects sharing one time grid and schema."""

    ids: tuple[str, ...]
    time_grid: np.ndarray          # (n_times,) strictly increasing
    covariate_names: tuple[str, ...]
    A: np.ndarray                  # (n, K+1)
    L: np.ndarray                  # (n, K+1, n_cov)
    Y: np.ndarray                  # (n, n_times); NaN where undeclared
    outcome_times: tuple[int, ...] = ()
    survival: bool = False
    event_time: np.ndarray | None = None
    censor_time: np.ndarray | None = None
    event_observed: np.ndarray | None = None

    def __post_init__(self):
        grid = np.asarray(self.time_grid, dtype=float)
        if grid.ndim != 1 or len(grid) < 1 or np.any(np.diff(grid) <= 0):
            raise PanelError("time grid must be one-dimensional and strictly increasing")
        if not self.survival and len(grid) < 2:
            raise PanelError("mean-mode panel needs at least two time points (K >= 0)")
        if self.A.shape != (self.n_subjects, self.K + 1):
            raise PanelError("treatment array has wrong shape")
        if self.L.shape != (self.n_subjects, self.K + 1, len(self.covariate_names)):
            raise PanelError("covariate array has wrong shape")
        if self.survival and (self.event_time is None or self.censor_time is None):
            raise PanelError("survival panel requires event_time and censor_time")

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_times(self) -> int:
        return len(self.time_grid)

    @property
    def K(self) -> int:
        """Index of the last treatment time."""
        return self.n_times - 1 if self.survival else self.n_times - 2

    def env(self) -> dict[str, np.ndarray]:
        """Vectorised expression environment over all subjects."""
        out: dict[str, np.ndarray] = {}
        for m in range(self.K + 1):
            out[f"a{m}"] = self.A[:, m]
            for c, name in enumerate(self.covariate_names):
                out[f"{name}{m}"] = self.L[:, m, c]
        for k in self.outcome_times:
            out[f"y{k}"] = self.Y[:, k]
        return out

    def variables_at(self, m: int, include_am: bool = True) -> frozenset[str]:
        """Names observable by time m (treatments through m or m-1)."""
        names = set()
        a_last = m if include_am else m - 1
        for j in range(min(m, self.K) + 1):
            for name in self.covariate_names:
                names.add(f"{name}{j}")
        for j in range(min(a_last, self.K) + 1):
            names.add(f"a{j}")
        for k in self.outcome_times:
            if k <= m:
                names.add(f"y{k}")
        return frozenset(names)

    def subject(self, subject_id: str) -> SubjectRecord:
        try:
            i = self.ids.index(subject_id)
        except ValueError:
            raise PanelError(f"unknown subject {subject_id!r}") from None
        return self.subject_at(i)

    def subject_at(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            id=self.ids[i],
            L=self.L[i],
            A=self.A[i],
            Y=self.Y[i],
            covariate_names=self.covariate_names,
            outcome_times=self.outcome_times,
            time_grid=self.time_grid,
            T=None if self.event_time is None else float(self.event_time[i]),
            C=None if self.censor_time is None else float(self.censor_time[i]),
            observed_event=(
                None if self.event_observed is None else bool(self.event_observed[i])
            ),
        )

    def take(self, indices: Sequence[int]) -> "Panel":
        """Subset/resample by subject positions (used by bootstrap and MC)."""
        idx = np.asarray(indices, dtype=int)
        return Panel(
            ids=tuple(f"{self.ids[i]}#{j}" if j else self.ids[i]
                      for j, i in _dedup(idx)),
            time_grid=self.time_grid,
            covariate_names=self.covariate_names,
            A=self.A[idx],
            L=self.L[idx],
            Y=self.Y[idx],
            outcome_times=self.outcome_times,
            survival=self.survival,
            event_time=None if self.event_time is None else self.event_time[idx],
            censor_time=None if self.censor_time is None else self.censor_time[idx],
            event_observed=None if self.event_observed is None else self.event_observed[idx],
        )


def _dedup(idx: np.ndarray) -> Iterable[tuple[int, int]]:
    seen: dict[int, int] = {}
    for i in idx:
        j = seen.get(int(i), 0)
        seen[int(i)] = j + 1
        yield j, int(i)


def load_panel(path, schema: PanelSchema) -> Panel:
    """Read and validate a long-format CSV into a Panel.

    Rows are sorted by time within subject; any missing declared analysis
    value, duplicated (subject, time) pair or ragged time grid is an error.
    """
    df = pd.read_csv(path, dtype={schema.subject: str})
    required = [schema.subject, schema.time, schema.treatment] + list(schema.covariates)
    if not schema.survival:
        required.append(schema.outcome)
    else:
        required += [schema.event_time, schema.censor_time, schema.event_observed]
    for col in required:
        if col not in df.columns:
            raise PanelError(f"missing column {col!r}")

    numeric_cols = [c for c in required if c != schema.subject]
    for col in numeric_cols:
        try:
            df[col] = pd.to_numeric(df[col], errors="raise")
        except (ValueError, TypeError):
            raise PanelError(f"non-numeric cell in column {col!r}") from None

    if df.duplicated([schema.subject, schema.time]).any():
        dup = df[df.duplicated([schema.subject, schema.time])].iloc[0]
        raise PanelError(
            f"duplicated (subject, time) pair ({dup[schema.subject]}, "
            f"{int(dup[schema.time])})"
        )

    times = np.sort(df[schema.time].unique()).astype(int)
    if len(times) and (times[0] != 0 or np.any(np.diff(times) != 1)):
        raise PanelError("time indices must form the contiguous range 0..T-1")
    n_times = len(times)
    counts = df.groupby(schema.subject)[schema.time].count()
    if (counts != n_times).any():
        bad = counts[counts != n_times].index[0]
        raise PanelError(f"ragged time grid: subject {bad} lacks some time indices")

    # keep subjects in file order; sort only by time within subject
    order = {sid: i for i, sid in enumerate(df[schema.subject].unique())}
    df = df.assign(_order=df[schema.subject].map(order))
    df = df.sort_values(["_order", schema.time], kind="stable")
    ids = tuple(df[schema.subject].unique())
    n = len(ids)
    K = n_times - 1 if schema.survival else n_times - 2
    if K < 0:
        raise PanelError("panel needs at least two time points in mean mode")

    grid = np.asarray(schema.times, dtype=float) if schema.times is not None \
        else times.astype(float)
    if len(grid) != n_times:
        raise PanelError("schema times length does not match the time indices present")

    outcome_times = schema.outcome_times
    if outcome_times is None:
        outcome_times = () if schema.survival else tuple(range(1, K + 2))
    for k in outcome_times:
        if not 1 <= k <= n_times - 1:
            raise PanelError(f"declared outcome time {k} outside 1..{n_times - 1}")

    def grab(col):
        return df[col].to_numpy(dtype=float).reshape(n, n_times)

    A_full = grab(schema.treatment)
    A = A_full[:, : K + 1]
    L = np.stack([grab(c)[:, : K + 1] for c in schema.covariates], axis=2) \
        if schema.covariates else np.zeros((n, K + 1, 0))

    Y = np.full((n, n_times), np.nan)
    if not schema.survival:
        Y_full = grab(schema.outcome)
        for k in outcome_times:
            Y[:, k] = Y_full[:, k]

    # missing-value audit over declared analysis variables only
    if np.isnan(A).any():
        raise PanelError("missing analysis value in treatment column")
    if np.isnan(L).any():
        raise PanelError("missing analysis value in a covariate column")
    for k in outcome_times:
        if np.isnan(Y[:, k]).any():
            raise PanelError(f"missing analysis value: outcome at time {k}")

    event_time = censor_time = event_observed = None
    if schema.survival:
        first = df[df[schema.time] == 0]
        event_time = first[schema.event_time].to_numpy(dtype=float)
        censor_time = first[schema.censor_time].to_numpy(dtype=float)
        event_observed = first[schema.event_observed].to_numpy(dtype=float)
        if np.isnan(censor_time).any() or np.isnan(event_observed).any():
            raise PanelError("missing analysis value in survival columns")
        if np.isnan(event_time[event_observed > 0]).any():
            raise PanelError("missing event_time for a subject with observed event")
        event_observed = event_observed > 0

    return Panel(
        ids=ids,
        time_grid=grid,
        covariate_names=tuple(schema.covariates),
        A=A,
        L=L,
        Y=Y,
        outcome_times=tuple(outcome_times),
        survival=schema.survival,
        event_time=event_time,
        censor_time=censor_time,
        event_observed=event_observed,
    )


def write_panel(panel: Panel, path, schema: PanelSchema | None = None) -> None:
    """Write a Panel back to CSV; floats carry 17 significant digits."""
    schema = schema or PanelSchema(
        covariates=panel.covariate_names, survival=panel.survival,
        outcome_times=panel.outcome_times or None,
    )

    def fmt(v) -> str:
        return "" if v is None or (isinstance(v, float) and np.isnan(v)) \
            else f"{float(v):.17g}"

    rows = []
    for i, sid in enumerate(panel.ids):
        for t in range(panel.n_times):
            row = {schema.subject: sid, schema.time: t}
            row[schema.treatment] = fmt(panel.A[i, t]) if t <= panel.K else ""
            if not panel.survival:
                row[schema.outcome] = fmt(panel.Y[i, t])
            for c, name in enumerate(panel.covariate_names):
                row[name] = fmt(panel.L[i, t, c]) if t <= panel.K else ""
            if panel.survival:
                observed = bool(panel.event_observed[i])
                row[schema.event_time] = (
                    fmt(panel.event_time[i]) if t == 0 and observed else ""
                )
                row[schema.censor_time] = fmt(panel.censor_time[i]) if t == 0 else ""
                row[schema.event_observed] = int(observed) if t == 0 else ""
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False)


def at_risk_mask(panel: Panel, m: int) -> np.ndarray:
    """Subjects still under observation at treatment time m (survival mode)."""
    if not panel.survival:
        return np.ones(panel.n_subjects, dtype=bool)
    t = panel.time_grid[m]
    horizon = np.where(panel.event_observed, panel.event_time, np.inf)
    return (t < panel.censor_time) & (t < horizon)


def history_view(panel: Panel, subject_id: str, m: int) -> HistoryView:
    """Exact prefixes of the covariate/treatment history through time m."""
    if not 0 <= m <= panel.K:
        raise PanelError(f"history index m={m} outside 0..{panel.K}")
    rec = panel.subject(subject_id)
    ybar = np.array([rec.Y[k] for k in range(1, m + 1)])
    return HistoryView(
        id=subject_id,
        m=m,
        Lbar=rec.L[: m + 1].copy(),
        Abar=rec.A[: m + 1].copy(),
        Ybar=ybar,
        covariate_names=panel.covariate_names,
    )


@dataclass(frozen=True)
class OverlapReport:
    """Per-time propensity histograms and positivity flags."""

    edges: np.ndarray                      # shared histogram bin edges
    counts: dict[int, np.ndarray]          # m -> bin counts
    mean_treatment_variance: dict[int, float]
    flags: list[tuple[int, str, float]]    # (m, subject id, fitted propensity)
    eps: float

    @property
    def flagged(self) -> bool:
        return bool(self.flags)


def summarize_overlap(panel: Panel, propensity, eps: float = 0.05,
                      bins: int = 10) -> OverlapReport:
    """Histogram fitted propensities per time and flag values outside [eps, 1-eps].

    ``propensity`` is a fitted treatment model exposing per-time probabilities
    via ``prob(panel, m)``; treatment must be binary.
    """
    if not set(np.unique(panel.A)) <= {0.0, 1.0}:
        raise PanelError("overlap summary requires binary treatment")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts: dict[int, np.ndarray] = {}
    variances: dict[int, float] = {}
    flags: list[tuple[int, str, float]] = []
    for m in range(panel.K + 1):
        p = propensity.prob(panel, m)
        counts[m] = np.histogram(p, bins=edges)[0]
        variances[m] = float(np.mean(p * (1.0 - p)))
        for i in np.nonzero((p < eps) | (p > 1.0 - eps))[0]:
            flags.append((m, panel.ids[i], float(p[i])))
    return OverlapReport(edges=edges, counts=counts,
                         mean_treatment_variance=variances, flags=flags, eps=eps)
