"""Regression diagnostics: collinearity of the design and vertex-wise
heteroscedasticity tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .errors import ValidationError
from .glm import DesignMatrix, LinearModel

__all__ = ["DiagnosticsReport", "variance_inflation", "condition_number",
           "breusch_pagan", "white_test", "diagnostics"]


@dataclass
class DiagnosticsReport:
    column_names: tuple
    vif: np.ndarray
    collinear: np.ndarray
    condition_number: float
    bp_stat: np.ndarray | None = None
    bp_pvalue: np.ndarray | None = None
    white_stat: np.ndarray | None = None
    white_pvalue: np.ndarray | None = None
    white_df: int | None = None


def _split(design):
    if isinstance(design, DesignMatrix):
        X = design.values
        names = design.column_names
        intercept = design.intercept
    else:
        X = np.asarray(design, dtype=float)
        names = tuple(f"x{j}" for j in range(X.shape[1]))
        const = [j for j in range(X.shape[1]) if np.ptp(X[:, j]) == 0]
        intercept = const[0] if const else None
    return X, names, intercept


def variance_inflation(design):
    """Centred VIF of every non-intercept column.

    Computed as the diagonal of the inverse correlation matrix, which
    equals ``1 / (1 - R_j^2)`` of regressing column ``j`` on the others.
    The intercept column (if any) gets ``nan``; perfectly collinear columns
    get ``inf``.

    Returns
    -------
    vif : array, shape (n_columns,)
    collinear : bool array, shape (n_columns,)
    """
    X, _, intercept = _split(design)
    k = X.shape[1]
    cols = [j for j in range(k) if j != intercept]
    vif = np.full(k, np.nan)
    collinear = np.zeros(k, dtype=bool)
    if len(cols) == 1:
        vif[cols[0]] = 1.0
        return vif, collinear
    if not cols:
        return vif, collinear
    Xc = X[:, cols] - X[:, cols].mean(axis=0)
    Xc /= np.linalg.norm(Xc, axis=0)
    corr = Xc.T @ Xc
    s = np.linalg.svd(corr, compute_uv=False)
    if s[-1] <= len(cols) * np.finfo(float).eps * s[0]:
        # singular: find the columns caught in an exact dependency
        _, _, vt = np.linalg.svd(corr)
        null = np.abs(vt[s <= len(cols) * np.finfo(float).eps * s[0]])
        bad = null.max(axis=0) > 1e-8
        inv = np.linalg.pinv(corr)
        vals = np.where(bad, np.inf, np.diag(inv))
    else:
        vals = np.diag(np.linalg.inv(corr))
        bad = ~np.isfinite(vals)
    vif[cols] = vals
    collinear[cols] = bad
    return vif, collinear


def condition_number(design):
    """Ratio of extreme singular values of the design with every
    non-intercept column z-scored (the intercept column is kept)."""
    X, _, intercept = _split(design)
    Z = np.array(X, dtype=float)
    for j in range(Z.shape[1]):
        if j == intercept:
            continue
        sd = Z[:, j].std(ddof=1)
        if sd > 0:
            Z[:, j] = (Z[:, j] - Z[:, j].mean()) / sd
    s = np.linalg.svd(Z, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


def _lm_test(aux, U):
    """``n * R^2`` of regressing each column of ``U`` on ``aux``."""
    n = aux.shape[0]
    Q, R, _ = linalg.qr(aux, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > max(aux.shape) * np.finfo(float).eps
                      * diag[0]))
    Q = Q[:, :rank]
    fitted = Q @ (Q.T @ U)
    Uc = U - U.mean(axis=0)
    Fc = fitted - fitted.mean(axis=0)
    tss = np.einsum("ij,ij->j", Uc, Uc)
    ess = np.einsum("ij,ij->j", Fc, Fc)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(tss > 0, ess / tss, 0.0)
    return n * r2, rank - 1


def _residuals(X, Y):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    return LinearModel(X).residuals(Y)


def breusch_pagan(design, Y):
    """Studentised (Koenker) Breusch-Pagan test at every vertex.

    Squared OLS residuals are regressed on the design; ``LM = n R^2`` is
    referred to chi-square with ``p - 1`` degrees of freedom.

    Returns
    -------
    stat, pvalue : arrays, shape (n_vertices,)
    """
    X, _, intercept = _split(design)
    aux = X if intercept is not None else np.column_stack(
        [np.ones(len(X)), X])
    resid = _residuals(X, Y)
    lm, df = _lm_test(aux, resid ** 2)
    return lm, stats.chi2.sf(lm, df)


def _white_regressors(X, intercept):
    cols = [X[:, j] for j in range(X.shape[1]) if j != intercept]
    n = X.shape[0]
    linear = cols
    squares = [c * c for c in cols]
    cross = [cols[i] * cols[j] for i in range(len(cols))
             for j in range(i + 1, len(cols))]
    aux = [np.ones(n)] + linear + squares + cross
    # keep the auxiliary regression identified: drop cross products, then
    # squares, until it has fewer columns than observations
    while len(aux) >= n and cross:
        cross.pop()
        aux = [np.ones(n)] + linear + squares + cross
    while len(aux) >= n and squares:
        squares.pop()
        aux = [np.ones(n)] + linear + squares
    return np.column_stack(aux)


def white_test(design, Y):
    """White's test: squared residuals on levels, squares and cross
    products of the regressors.

    Returns
    -------
    stat, pvalue : arrays, shape (n_vertices,)
    df : int
        Rank of the auxiliary design minus one.
    """
    X, _, intercept = _split(design)
    aux = _white_regressors(X, intercept)
    resid = _residuals(X, Y)
    lm, df = _lm_test(aux, resid ** 2)
    return lm, stats.chi2.sf(lm, df), df


def diagnostics(design, Y=None):
    """Collinearity indices and, when ``Y`` is given, per-vertex
    heteroscedasticity tests."""
    X, names, _ = _split(design)
    if X.shape[0] <= X.shape[1]:
        raise ValidationError("need more subjects than design columns")
    vif, collinear = variance_inflation(design)
    report = DiagnosticsReport(names, vif, collinear, condition_number(design))
    if Y is not None and not collinear.any():
        Y = getattr(Y, "values", Y)
        report.bp_stat, report.bp_pvalue = breusch_pagan(design, Y)
        report.white_stat, report.white_pvalue, report.white_df = \
            white_test(design, Y)
    return report
