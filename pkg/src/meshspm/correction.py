"""Multiple-testing corrections for vertex-wise p-values."""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError

__all__ = ["bh_fdr", "two_stage_bh", "fwer_maxstat", "maxstat_threshold",
           "pooled_fdr", "correct"]


def _check(p, q):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValidationError("p-values must be a vector")
    if p.size and not (np.all(p > 0) and np.all(p <= 1)):
        raise ValidationError("p-values must lie in (0, 1]")
    if not 0 < q < 1:
        raise ValidationError("q must lie in (0, 1)")
    return p


def _bh_adjust(p):
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(ranked, 1.0)
    return adjusted


def bh_fdr(p, q=0.05):
    """Benjamini-Hochberg step-up adjustment.

    Returns
    -------
    adjusted : array
        ``min_{j >= rank} p_(j) * m / j``, capped at 1.
    mask : bool array
        ``adjusted <= q``.
    """
    p = _check(p, q)
    if p.size == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    adjusted = _bh_adjust(p)
    return adjusted, adjusted <= q


def two_stage_bh(p, q=0.05):
    """Adaptive two-stage step-up.

    Stage one runs BH at ``q / (1 + q)``; its ``r`` rejections give the
    null-count estimate ``m0 = m - r``. Stage two runs BH at ``q * m / m0``,
    i.e. BH-adjusted values are rescaled by ``m0 / m``. Adjusted values are
    never below the raw p-values, and the mask always contains the BH mask
    at the same ``q``.
    """
    p = _check(p, q)
    m = p.size
    if m == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    bh = _bh_adjust(p)
    r = int(np.count_nonzero(bh <= q / (1 + q)))
    m0 = max(m - r, 1)
    adjusted = np.maximum(np.minimum(bh * (m0 / m), 1.0), p)
    return adjusted, adjusted <= q


def maxstat_threshold(null_maxima, alpha=0.05):
    """Order-statistic threshold from per-permutation maxima.

    With sorted maxima ``m_(1) <= ... <= m_(N)``, returns ``m_(k)`` where
    ``k = ceil((1 - alpha) * (N + 1))`` clipped to ``N``: the smallest null
    maximum with at least ``(1 - alpha)(N + 1)`` ranks at or below it.
    """
    maxima = np.sort(np.asarray(null_maxima, dtype=float))
    n = maxima.size
    if n == 0:
        raise ValidationError("need at least one null map")
    # guard against (1 - alpha) * (N + 1) landing a hair above an integer
    k = math.ceil(round((1 - alpha) * (n + 1), 9))
    return float(maxima[min(max(k, 1), n) - 1])


def fwer_maxstat(observed, null_maps, alpha=0.05):
    """Family-wise threshold on ``|score|`` from the null maxima.

    Parameters
    ----------
    observed : array, shape (n_vertices,)
    null_maps : sequence of arrays or array, shape (N, n_vertices)
        Either whole null maps or precomputed per-map maxima of ``|score|``
        (1-D input of length N).

    Returns
    -------
    threshold : float
    mask : bool array
        ``|observed| > threshold``.
    """
    null_maps = np.asarray(null_maps, dtype=float)
    if null_maps.ndim == 2:
        maxima = np.abs(null_maps).max(axis=1)
    else:
        maxima = np.abs(null_maps)
    threshold = maxstat_threshold(maxima, alpha)
    return threshold, np.abs(np.asarray(observed, dtype=float)) > threshold


def pooled_fdr(p_maps, q=0.05):
    """BH over the concatenation of several models' p-values.

    Returns per-model ``(adjusted, mask)`` pairs.
    """
    p_maps = [np.asarray(p, dtype=float) for p in p_maps]
    if not p_maps:
        raise ValidationError("need at least one model")
    adjusted, mask = bh_fdr(np.concatenate(p_maps), q)
    out = []
    start = 0
    for p in p_maps:
        stop = start + p.size
        out.append((adjusted[start:stop], mask[start:stop]))
        start = stop
    return out


def correct(p, method="bh", q=0.05):
    """Dispatch on ``method`` in ``{"bh", "tsbh"}``."""
    if method == "bh":
        return bh_fdr(p, q)
    if method == "tsbh":
        return two_stage_bh(p, q)
    raise ValidationError(f"unknown correction {method!r}")
