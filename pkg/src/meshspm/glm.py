"""Vertex-wise general linear model.

The same design is fitted to every column of the phenotype matrix, so the
pivoted QR of the design, the pseudo-inverse and the leverages are computed
once (:class:`LinearModel`) and applied to whole blocks of vertices with a
couple of matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NumericalError, ValidationError

__all__ = [
    "DesignMatrix",
    "PhenotypeMatrix",
    "FitResult",
    "OLSFit",
    "LinearModel",
    "standardize_columns",
    "ols_fit",
    "hc4m_se",
    "hc4m_weights",
    "mass_univariate",
    "FLAG_CONSTANT",
    "FLAG_ZERO_SE",
]

FLAG_CONSTANT = 1  # phenotype does not vary across subjects
FLAG_ZERO_SE = 2  # residual variance numerically zero, t undefined

ESTIMATORS = ("classical", "hc4m")
HC4M_GAMMA = (1.0, 1.5)

# residual norms below this fraction of the response norm count as zero
_RSS_RTOL = 1e-12
# leverages this close to one mark an observation fitted exactly
_LEVERAGE_ATOL = 1e-10


def _sample_sd(x, axis=0):
    return np.std(x, axis=axis, ddof=1)


def standardize_columns(matrix, exempt=()):
    """Z-score columns to mean 0 and unit sample standard deviation.

    Parameters
    ----------
    matrix : array, shape (n, k)
    exempt : iterable of int
        Columns left untouched (the intercept).

    Raises
    ------
    ValidationError
        If a non-exempt column is constant.
    """
    out = np.array(matrix, dtype=float, copy=True)
    if out.ndim == 1:
        out = out[:, None]
        squeeze = True
    else:
        squeeze = False
    exempt = set(int(e) for e in exempt)
    for j in range(out.shape[1]):
        if j in exempt:
            continue
        col = out[:, j]
        sd = _sample_sd(col)
        if not sd > 0:
            raise ValidationError("zero variance predictor")
        out[:, j] = (col - col.mean()) / sd
    return out[:, 0] if squeeze else out


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Subjects x predictors design with column roles.

    ``interest_columns`` and ``nuisance_columns`` must partition the
    columns. ``intercept`` is the index of the single column allowed to be
    constant, or ``None``.
    """

    values: np.ndarray
    column_names: tuple
    interest_columns: tuple
    nuisance_columns: tuple
    intercept: int | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValidationError("design must be two-dimensional")
        n, k = values.shape
        names = tuple(str(c) for c in self.column_names)
        if len(names) != k:
            raise ValidationError(
                f"{len(names)} column names for {k} design columns")
        interest = tuple(int(i) for i in self.interest_columns)
        nuisance = tuple(int(i) for i in self.nuisance_columns)
        if sorted(interest + nuisance) != list(range(k)):
            raise ValidationError(
                "interest and nuisance columns must partition the design")
        if not interest:
            raise ValidationError("no column of interest")
        if not np.all(np.isfinite(values)):
            raise ValidationError("design contains non-finite values")
        if self.intercept is not None and self.intercept not in nuisance:
            raise ValidationError("the intercept must be a nuisance column")
        for j in range(k):
            if j != self.intercept and np.ptp(values[:, j]) == 0:
                raise ValidationError(
                    f"zero variance predictor {names[j]!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "interest_columns", interest)
        object.__setattr__(self, "nuisance_columns", nuisance)

    @classmethod
    def from_columns(cls, columns, interest, nuisance=None, intercept=True):
        """Build from a ``{name: values}`` mapping, optionally adding an
        intercept column named ``"intercept"`` in front."""
        names = list(columns)
        for name in interest:
            if name not in columns:
                raise ValidationError(f"unknown design column {name!r}")
        if nuisance is None:
            nuisance = [c for c in names if c not in interest]
        for name in nuisance:
            if name not in columns:
                raise ValidationError(f"unknown design column {name!r}")
        used = list(interest) + [c for c in nuisance if c not in interest]
        mats = [np.asarray(columns[c], dtype=float) for c in used]
        n = len(mats[0]) if mats else 0
        if intercept:
            used = ["intercept"] + used
            mats = [np.ones(n)] + mats
        values = np.column_stack(mats)
        idx = {name: i for i, name in enumerate(used)}
        return cls(values, tuple(used),
                   tuple(idx[c] for c in interest),
                   tuple(idx[c] for c in used if c not in interest),
                   0 if intercept else None)

    @property
    def n_subjects(self):
        return self.values.shape[0]

    @property
    def n_columns(self):
        return self.values.shape[1]

    def column_index(self, name_or_index):
        if isinstance(name_or_index, (int, np.integer)):
            return int(name_or_index)
        try:
            return self.column_names.index(name_or_index)
        except ValueError:
            raise ValidationError(
                f"unknown design column {name_or_index!r}") from None

    def standardized(self):
        """Copy with every non-intercept column z-scored."""
        exempt = () if self.intercept is None else (self.intercept,)
        return DesignMatrix(standardize_columns(self.values, exempt),
                            self.column_names, self.interest_columns,
                            self.nuisance_columns, self.intercept)


@dataclass(frozen=True, eq=False)
class PhenotypeMatrix:
    """Subjects x vertices phenotype values."""

    values: np.ndarray
    subject_ids: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValidationError("phenotype must be two-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValidationError("phenotype contains non-finite values")
        ids = tuple(self.subject_ids) or tuple(
            str(i) for i in range(values.shape[0]))
        if len(ids) != values.shape[0]:
            raise ValidationError("subject id count does not match rows")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "subject_ids", ids)

    @property
    def n_vertices(self):
        return self.values.shape[1]


@dataclass
class OLSFit:
    coef: np.ndarray
    residuals: np.ndarray
    se: np.ndarray
    leverage: np.ndarray


@dataclass
class FitResult:
    """Per-vertex estimates for one contrasted column."""

    beta: np.ndarray
    se: np.ndarray
    tstat: np.ndarray
    flags: np.ndarray
    residuals: np.ndarray | None = field(default=None, repr=False)

    @property
    def valid(self):
        return self.flags == 0


class LinearModel:
    """Pivoted-QR factorisation of a design, reused for many responses.

    Raises
    ------
    ValidationError
        If there are no more subjects than columns.
    NumericalError
        If the design is rank deficient.
    """

    def __init__(self, X, rank_rtol=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n, p = X.shape
        if n <= p:
            raise ValidationError(
                f"underdetermined: {n} subjects for {p} predictors")
        Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = rank_rtol if rank_rtol is not None else max(n, p) * np.finfo(
            float).eps
        if diag[0] == 0 or diag[-1] <= tol * diag[0]:
            raise NumericalError("singular design")
        # pinv = P R^-1 Q'
        pinv_piv = linalg.solve_triangular(R, Q.T)
        pinv = np.empty_like(pinv_piv)
        pinv[piv] = pinv_piv
        self.X = X
        self.n, self.p = n, p
        self.Q = Q
        self.pinv = pinv
        self.leverage = np.einsum("ij,ij->i", Q, Q)
        self.xtx_inv_diag = np.einsum("ij,ij->i", pinv, pinv)

    @property
    def df_resid(self):
        return self.n - self.p

    def coefficients(self, Y):
        return self.pinv @ Y

    def residuals(self, Y):
        return Y - self.Q @ (self.Q.T @ Y)

    def classical_se(self, resid, rows=None):
        rss = np.einsum("i...,i...->...", resid, resid)
        s2 = rss / self.df_resid
        d = self.xtx_inv_diag if rows is None else self.xtx_inv_diag[rows]
        return np.sqrt(np.multiply.outer(d, s2))

    def hc4m_se(self, resid, rows=None, gamma=HC4M_GAMMA):
        w = hc4m_weights(self.leverage, self.n, self.p, gamma)
        A = self.pinv if rows is None else self.pinv[rows]
        return np.sqrt((A * A * w) @ (resid * resid))


def hc4m_weights(leverage, n, p, gamma=HC4M_GAMMA):
    """Per-observation discount ``1 / (1 - h_ii)^delta_i`` for HC4m."""
    leverage = np.asarray(leverage, dtype=float)
    if np.any(leverage >= 1 - _LEVERAGE_ATOL):
        raise NumericalError("exact leverage point")
    ratio = n * leverage / p
    delta = np.minimum(gamma[0], ratio) + np.minimum(gamma[1], ratio)
    return 1.0 / (1.0 - leverage) ** delta


def hc4m_se(X, residuals, leverages=None, gamma=HC4M_GAMMA):
    """HC4m heteroscedasticity-consistent standard errors.

    Parameters
    ----------
    X : array, shape (n, p)
    residuals : array, shape (n,) or (n, k)
        OLS residuals of one or more responses fitted on ``X``.
    leverages : array, shape (n,), optional
        Diagonal of the hat matrix; computed from ``X`` when omitted.

    Returns
    -------
    se : array, shape (p,) or (p, k)
    """
    model = LinearModel(X)
    if leverages is not None:
        leverages = np.asarray(leverages, dtype=float)
        w = hc4m_weights(leverages, model.n, model.p, gamma)
    else:
        w = hc4m_weights(model.leverage, model.n, model.p, gamma)
    resid = np.asarray(residuals, dtype=float)
    A = model.pinv
    return np.sqrt((A * A * w) @ (resid * resid))


def ols_fit(X, y):
    """Ordinary least squares for one response (or several as columns).

    Returns an :class:`OLSFit` with coefficients, residuals, classical
    standard errors (``n - p`` denominator) and leverages.
    """
    model = LinearModel(X)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != model.n:
        raise ValidationError("response length does not match design rows")
    resid = model.residuals(y)
    return OLSFit(model.coefficients(y), resid, model.classical_se(resid),
                  model.leverage)


class ContrastFitter:
    """Computes beta, se and t of one design column for blocks of vertices.

    Shared by the observed and the permuted passes so both use exactly the
    same arithmetic.
    """

    def __init__(self, X, contrast, estimator="classical",
                 gamma=HC4M_GAMMA):
        if estimator not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {estimator!r}")
        self.model = LinearModel(X)
        self.contrast = int(contrast)
        self.estimator = estimator
        self.row = self.model.pinv[self.contrast]
        if estimator == "hc4m":
            w = hc4m_weights(self.model.leverage, self.model.n,
                             self.model.p, gamma)
            self.se_weights = self.row * self.row * w
        else:
            self.se_weights = None

    def fit(self, Y, ref_norm=None, keep_residuals=False):
        """Fit every column of ``Y``.

        ``ref_norm`` is the per-vertex norm against which a residual norm
        is judged to be zero; defaults to the norm of ``Y`` itself.
        """
        Y = np.asarray(Y, dtype=float)
        beta = self.row @ Y
        resid = self.model.residuals(Y)
        rss = np.einsum("ij,ij->j", resid, resid)
        if self.se_weights is None:
            se = np.sqrt(rss / self.model.df_resid
                         * self.model.xtx_inv_diag[self.contrast])
        else:
            se = np.sqrt(self.se_weights @ (resid * resid))
        if ref_norm is None:
            ref_norm = np.sqrt(np.einsum("ij,ij->j", Y, Y))
        flags = np.zeros(Y.shape[1], dtype=np.int64)
        zero = (rss <= (_RSS_RTOL * ref_norm) ** 2) | ~(se > 0)
        flags[zero] = FLAG_ZERO_SE
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(zero, 0.0, beta / np.where(zero, 1.0, se))
        return FitResult(beta, se, t, flags,
                         resid if keep_residuals else None)


def mass_univariate(design, Y, contrast, estimator="classical",
                    standardize=False, keep_residuals=False):
    """Fit the design at every vertex and report the contrasted column.

    Parameters
    ----------
    design : DesignMatrix or array
    Y : PhenotypeMatrix or array, shape (n_subjects, n_vertices)
    contrast : int or str
        Column of interest.
    estimator : {"classical", "hc4m"}
    standardize : bool
        Z-score the non-intercept design columns and each vertex's
        phenotype so ``beta`` is in standard-deviation units.

    Returns
    -------
    FitResult
        Vertices whose phenotype is constant get ``beta = se = t = 0`` and
        :data:`FLAG_CONSTANT`; vertices with zero residual variance get
        ``t = 0`` and :data:`FLAG_ZERO_SE`.
    """
    X, contrast = _design_values(design, contrast, standardize)
    Y = Y.values if isinstance(Y, PhenotypeMatrix) else np.asarray(
        Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != X.shape[0]:
        raise ValidationError(
            f"phenotype has {Y.shape[0]} subjects, design has {X.shape[0]}")
    Y, constant = prepare_phenotype(Y, standardize)
    fitter = ContrastFitter(X, contrast, estimator)
    res = fitter.fit(Y, keep_residuals=keep_residuals)
    _mark_constant(res, constant)
    return res


def prepare_phenotype(Y, standardize):
    """Optionally z-score each vertex; returns ``(Y, constant_mask)``."""
    constant = np.ptp(Y, axis=0) == 0
    if standardize:
        Y = np.array(Y, dtype=float, copy=True)
        live = ~constant
        Yl = Y[:, live]
        Y[:, live] = (Yl - Yl.mean(axis=0)) / _sample_sd(Yl)
        Y[:, constant] = 0.0
    return Y, constant


def _mark_constant(res, constant):
    res.beta[constant] = 0.0
    res.se[constant] = 0.0
    res.tstat[constant] = 0.0
    res.flags[constant] = FLAG_CONSTANT


def _design_values(design, contrast, standardize):
    if isinstance(design, DesignMatrix):
        j = design.column_index(contrast)
        if j not in design.interest_columns:
            raise ValidationError(
                f"contrast {design.column_names[j]!r} is not an interest "
                "column")
        if standardize:
            design = design.standardized()
        return design.values, j
    X = np.asarray(design, dtype=float)
    if standardize:
        exempt = [j for j in range(X.shape[1]) if np.ptp(X[:, j]) == 0]
        X = standardize_columns(X, exempt)
    return X, int(contrast)
