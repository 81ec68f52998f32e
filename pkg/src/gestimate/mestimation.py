"""Stacked estimating-equation (sandwich) variance machinery.

The estimators in this package are all M-estimators: a parameter vector
solves a sum of per-subject estimating functions.  Stacking the nuisance
scores (treatment model, outcome centering) together with the target
equations and applying the usual A^{-1} B A^{-T} formula yields standard
errors that account for nuisance estimation.  The bread is differentiated
numerically (central differences) so each estimator only has to supply its
per-subject contributions.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "MEstimationError",
    "sandwich_covariance",
    "stacked_sandwich",
    "score_quadratic",
]


class MEstimationError(ValueError):
    pass


def sandwich_covariance(contributions: np.ndarray, bread: np.ndarray) -> np.ndarray:
    """A^{-1} B A^{-T} with B the outer-product sum of per-subject contributions."""
    G = np.asarray(contributions, dtype=float)
    A = np.asarray(bread, dtype=float)
    B = G.T @ G
    try:
        Ainv_B = np.linalg.solve(A, B)
        cov = np.linalg.solve(A, Ainv_B.T).T
    except np.linalg.LinAlgError:
        raise MEstimationError("singular bread matrix in sandwich variance") from None
    return 0.5 * (cov + cov.T)


def numeric_bread(contributions_fn: Callable[[np.ndarray], np.ndarray],
                  theta: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """d/dtheta of the summed estimating functions, by central differences."""
    theta = np.asarray(theta, dtype=float)
    d = len(theta)
    base_dim = contributions_fn(theta).shape[1]
    if base_dim != d:
        raise MEstimationError(
            f"stacked equations ({base_dim}) and parameters ({d}) disagree"
        )
    A = np.empty((d, d))
    for j in range(d):
        h = rel_step * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        A[:, j] = (contributions_fn(up).sum(axis=0)
                   - contributions_fn(dn).sum(axis=0)) / (2.0 * h)
    return A


def stacked_sandwich(contributions_fn: Callable[[np.ndarray], np.ndarray],
                     theta: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Full sandwich covariance for the stacked parameter vector."""
    A = numeric_bread(contributions_fn, np.asarray(theta, dtype=float), rel_step)
    G = contributions_fn(np.asarray(theta, dtype=float))
    return sandwich_covariance(G, A)


def nuisance_projector(nuisance_scores: np.ndarray | None):
    """Precompute the orthonormal basis of the nuisance score space."""
    if nuisance_scores is None or nuisance_scores.shape[1] == 0:
        return None
    U, sv, _ = np.linalg.svd(nuisance_scores, full_matrices=False)
    tol = max(nuisance_scores.shape) * np.finfo(float).eps * sv[0]
    return U[:, sv > tol]


def score_quadratic(s: np.ndarray, nuisance_scores: np.ndarray | None = None,
                    projector: np.ndarray | None = None
                    ) -> tuple[float, np.ndarray, np.ndarray]:
    """Score-type statistic S' V^{-1} S from per-subject score contributions.

    V is the empirical covariance of the contributions after projecting out
    the treatment-model score space; the projection accounts for maximum
    likelihood estimation of the propensity (plugging in the MLE removes the
    component of the score explained by it).  Pass ``projector`` (from
    ``nuisance_projector``) to amortise the SVD over a parameter grid.

    Returns (statistic, S, V).
    """
    s = np.asarray(s, dtype=float)
    S = s.sum(axis=0)
    centered = s - s.mean(axis=0)
    if projector is None:
        projector = nuisance_projector(nuisance_scores)
    resid = centered if projector is None \
        else centered - projector @ (projector.T @ centered)
    V = resid.T @ resid
    try:
        stat = float(S @ np.linalg.solve(V, S))
    except np.linalg.LinAlgError:
        raise MEstimationError("singular score variance") from None
    return stat, S, V
