"""Permutation inference with the Freedman-Lane scheme.

The phenotype is residualised against the nuisance columns once,
``R_Z Y = Y - Z (Z'Z)^-1 Z' Y``; permutation ``k`` shuffles the rows of
``R_Z Y`` and refits the full model. The row shuffle of permutation ``k`` is
drawn from a generator seeded with ``(seed, k)``, so any subset of
permutations can run anywhere and the merged exceedance counts are
identical whatever the number of workers.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .correction import bh_fdr, maxstat_threshold, pooled_fdr, two_stage_bh
from .errors import NumericalError, ValidationError
from .glm import (ContrastFitter, DesignMatrix, PhenotypeMatrix,
                  _mark_constant, prepare_phenotype, standardize_columns)
from .mesh import thresholded_components
from .tfce import TfceParams, max_cluster_extent, mesh_arrays, tfce_scores

__all__ = [
    "PermutationPlan",
    "InferenceResult",
    "ClusterExtentResult",
    "residual_forming_matrix",
    "permutation_indices",
    "freedman_lane",
    "infer_models",
    "cluster_extent_inference",
    "apply_correction",
]

logger = logging.getLogger(__name__)

CORRECTIONS = ("bh", "tsbh", "maxstat")

# permutations handed to a worker at a time; fixed so chunking never
# depends on the worker count
_CHUNK = 16


@dataclass(frozen=True)
class PermutationPlan:
    """How to build the permutation null.

    ``tfce=None`` selects plain mass univariate mode, where the statistic
    is ``|t|`` itself.
    """

    num_permutations: int = 1000
    seed: int = 0
    estimator: str = "classical"
    tfce: TfceParams | None = field(default_factory=TfceParams)
    scheme: str = "freedman_lane"

    def __post_init__(self):
        if int(self.num_permutations) < 1:
            raise ValidationError("num_permutations must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.scheme != "freedman_lane":
            raise ValidationError(f"unsupported scheme {self.scheme!r}")
        if self.estimator not in ("classical", "hc4m"):
            raise ValidationError(f"unknown estimator {self.estimator!r}")


@dataclass
class InferenceResult:
    beta: np.ndarray
    se: np.ndarray
    tstat: np.ndarray
    flags: np.ndarray
    observed: np.ndarray
    p_raw: np.ndarray
    p_adjusted: np.ndarray
    mask: np.ndarray
    null_max: np.ndarray
    plan: PermutationPlan
    correction: str = "bh"
    q: float = 0.05
    threshold: float | None = None
    timings: dict = field(default_factory=dict)

    @property
    def statistic(self):
        return "tfce" if self.plan.tfce is not None else "t"


@dataclass
class ClusterExtentResult:
    h_thr: float
    clusters: list
    signs: list
    extent_threshold: float
    significant: list
    mask: np.ndarray
    null_max: np.ndarray


def residual_forming_matrix(Z):
    """``I - Z (Z'Z)^-1 Z'`` for a full-rank nuisance design."""
    Q = _orthonormal_basis(Z)
    n = Q.shape[0]
    return np.eye(n) - Q @ Q.T


def _orthonormal_basis(Z):
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n = Z.shape[0]
    if Z.shape[1] == 0:
        return np.zeros((n, 0))
    Q, R, _ = linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0 or diag[-1] <= max(Z.shape) * np.finfo(float).eps \
            * diag[0]:
        raise NumericalError("rank-deficient nuisance design")
    return Q


def permutation_indices(seed, k, n):
    """Row order of permutation ``k`` (deterministic in ``(seed, k)``)."""
    return np.random.default_rng([int(seed), int(k)]).permutation(n)


def _chunks(n_perm):
    return [(k, min(k + _CHUNK, n_perm + 1))
            for k in range(1, n_perm + 1, _CHUNK)]


def _map_chunks(task, n_perm, workers):
    chunks = _chunks(n_perm)
    if workers <= 1 or len(chunks) == 1:
        return [task(*c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: task(*c), chunks))


class _Problem:
    """Observed fit plus everything the permuted passes share."""

    def __init__(self, design, contrast, Y, estimator, standardize):
        if isinstance(design, DesignMatrix):
            j = design.column_index(contrast)
            if j not in design.interest_columns:
                raise ValidationError(
                    f"contrast {design.column_names[j]!r} is not an "
                    "interest column")
            if standardize:
                design = design.standardized()
            X = design.values
        else:
            X = np.asarray(design, dtype=float)
            j = int(contrast)
            if standardize:
                exempt = [c for c in range(X.shape[1])
                          if np.ptp(X[:, c]) == 0]
                X = standardize_columns(X, exempt)
        Y = Y.values if isinstance(Y, PhenotypeMatrix) else np.asarray(
            Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != X.shape[0]:
            raise ValidationError(
                f"phenotype has {Y.shape[0]} subjects, design has "
                f"{X.shape[0]}")
        Y, constant = prepare_phenotype(Y, standardize)
        self.fitter = ContrastFitter(X, j, estimator)
        self.ref_norm = np.sqrt(np.einsum("ij,ij->j", Y, Y))
        self.observed = self.fitter.fit(Y, self.ref_norm)
        _mark_constant(self.observed, constant)
        # every column except the contrasted one is nuisance for the
        # permutation, so other interest columns stay out of the shuffle
        Z = np.delete(X, j, axis=1)
        Qz = _orthonormal_basis(Z)
        self.rzy = np.ascontiguousarray(Y - Qz @ (Qz.T @ Y))
        self.constant = constant
        self.n = X.shape[0]

    def tmap(self, perm):
        t = self.fitter.fit(self.rzy[perm], self.ref_norm).tstat
        t[self.constant] = 0.0
        return t


def _statistic(arrays, t, tfce):
    if tfce is None:
        return np.abs(t)
    return np.abs(tfce_scores(arrays, t, tfce))


def freedman_lane(design, contrast, Y, mesh, plan=None, correction="bh",
                  q=0.05, standardize=False, workers=1):
    """Vertex-wise permutation p-values for one contrasted column.

    Parameters
    ----------
    design : DesignMatrix or array, shape (n_subjects, n_columns)
    contrast : int or str
        Column tested; all remaining columns are treated as nuisance.
    Y : PhenotypeMatrix or array, shape (n_subjects, n_vertices)
    mesh : TriangleMesh
    plan : PermutationPlan
    correction : {"bh", "tsbh", "maxstat"}
    q : float
        FDR level, or FWER level for ``"maxstat"``.
    workers : int
        Threads used for the permutations; results do not depend on it.

    Returns
    -------
    InferenceResult
        ``p_raw = (1 + #{k : |s_k| >= |s_obs|}) / (N + 1)`` where ``s`` is
        the TFCE score (or ``t`` in plain mode).
    """
    plan = plan or PermutationPlan()
    if correction not in CORRECTIONS:
        raise ValidationError(f"unknown correction {correction!r}")
    if not 0 < q < 1:
        raise ValidationError("q must lie in (0, 1)")
    timings = {}
    t0 = time.perf_counter()
    prob = _Problem(design, contrast, Y, plan.estimator, standardize)
    if prob.observed.tstat.shape[0] != mesh.n_vertices:
        raise ValidationError(
            f"phenotype has {prob.observed.tstat.shape[0]} vertices, mesh "
            f"has {mesh.n_vertices}")
    arrays = mesh_arrays(mesh)
    tfce = plan.tfce
    if tfce is None:
        observed = prob.observed.tstat.copy()
    else:
        observed = tfce_scores(arrays, prob.observed.tstat, tfce)
    obs_abs = np.abs(observed)
    timings["observed"] = time.perf_counter() - t0

    n_perm = int(plan.num_permutations)

    def task(k_start, k_stop):
        counts = np.zeros(mesh.n_vertices, dtype=np.int64)
        maxima = np.empty(k_stop - k_start)
        for i, k in enumerate(range(k_start, k_stop)):
            perm = permutation_indices(plan.seed, k, prob.n)
            s = _statistic(arrays, prob.tmap(perm), tfce)
            counts += s >= obs_abs
            maxima[i] = s.max() if s.size else 0.0
        return counts, maxima

    t0 = time.perf_counter()
    parts = _map_chunks(task, n_perm, workers)
    counts = np.zeros(mesh.n_vertices, dtype=np.int64)
    for c, _ in parts:
        counts += c
    null_max = np.concatenate([m for _, m in parts])
    timings["permutations"] = time.perf_counter() - t0
    logger.info("%d permutations in %.2fs", n_perm, timings["permutations"])

    p_raw = (1.0 + counts) / (n_perm + 1.0)
    res = InferenceResult(
        beta=prob.observed.beta, se=prob.observed.se,
        tstat=prob.observed.tstat, flags=prob.observed.flags,
        observed=observed, p_raw=p_raw, p_adjusted=p_raw.copy(),
        mask=np.zeros(mesh.n_vertices, dtype=bool), null_max=null_max,
        plan=plan, correction=correction, q=q, timings=timings)
    apply_correction(res, correction, q)
    return res


def apply_correction(res, method, q):
    """Fill ``p_adjusted``, ``mask`` (and ``threshold``) of a result."""
    if method == "bh":
        res.p_adjusted, res.mask = bh_fdr(res.p_raw, q)
    elif method == "tsbh":
        res.p_adjusted, res.mask = two_stage_bh(res.p_raw, q)
    elif method == "maxstat":
        obs = np.abs(res.observed)
        res.threshold = maxstat_threshold(res.null_max, q)
        n_perm = res.null_max.size
        exceed = np.searchsorted(np.sort(res.null_max), obs, side="left")
        fwer_p = (1.0 + (n_perm - exceed)) / (n_perm + 1.0)
        res.p_adjusted = np.maximum(fwer_p, res.p_raw)
        res.mask = obs > res.threshold
    else:
        raise ValidationError(f"unknown correction {method!r}")
    res.correction = method
    res.q = q
    return res


def infer_models(design, contrasts, Y, mesh, plan=None, correction="bh",
                 q=0.05, standardize=False, workers=1, pooled=True):
    """Run :func:`freedman_lane` for several contrasts.

    With ``pooled=True`` and ``correction="bh"`` all models' p-values are
    corrected in a single BH pass.
    """
    results = [freedman_lane(design, c, Y, mesh, plan, correction, q,
                             standardize, workers) for c in contrasts]
    if pooled and correction == "bh" and len(results) > 1:
        for res, (adj, mask) in zip(
                results, pooled_fdr([r.p_raw for r in results], q)):
            res.p_adjusted, res.mask = adj, mask
    return results


def cluster_extent_inference(design, contrast, Y, mesh, h_thr, plan=None,
                             alpha=0.05, standardize=False, workers=1):
    """Cluster-extent thresholding with a permutation null on cluster size.

    Clusters are formed at ``t >= h`` and ``t <= -h``; the null is the
    largest cluster extent (either sign) of each Freedman-Lane permuted
    ``t`` map. Clusters larger than the ``1 - alpha`` order statistic of
    that null are significant.

    ``h_thr`` may be a scalar or a sequence; the permutations are shared
    across thresholds. Returns one :class:`ClusterExtentResult` per
    threshold (a single result for scalar input).
    """
    plan = plan or PermutationPlan(tfce=None)
    scalar = np.ndim(h_thr) == 0
    thresholds = [float(h) for h in np.atleast_1d(h_thr)]
    if not all(h > 0 for h in thresholds):
        raise ValidationError("cluster-forming threshold must be positive")
    prob = _Problem(design, contrast, Y, plan.estimator, standardize)
    t_obs = prob.observed.tstat
    if t_obs.shape[0] != mesh.n_vertices:
        raise ValidationError("phenotype vertices do not match the mesh")
    arrays = mesh_arrays(mesh)
    n_perm = int(plan.num_permutations)

    def task(k_start, k_stop):
        out = np.empty((k_stop - k_start, len(thresholds)))
        for i, k in enumerate(range(k_start, k_stop)):
            t = prob.tmap(permutation_indices(plan.seed, k, prob.n))
            for j, h in enumerate(thresholds):
                out[i, j] = max_cluster_extent(arrays, t, h)
        return out

    null = np.concatenate(_map_chunks(task, n_perm, workers), axis=0)
    results = []
    for j, h in enumerate(thresholds):
        crit = maxstat_threshold(null[:, j], alpha)
        clusters, signs = [], []
        for sign, cl in _signed_clusters(mesh, t_obs, h):
            clusters.append(cl)
            signs.append(sign)
        significant = [c.extent > crit for c in clusters]
        mask = np.zeros(mesh.n_vertices, dtype=bool)
        for c, sig in zip(clusters, significant):
            if sig:
                mask[c.vertex_ids] = True
        results.append(ClusterExtentResult(h, clusters, signs, crit,
                                           significant, mask,
                                           null[:, j].copy()))
    return results[0] if scalar else results


def _signed_clusters(mesh, t, h):
    out = [(1, c) for c in thresholded_components(mesh, t, h, "positive")]
    out += [(-1, c) for c in thresholded_components(mesh, t, -h,
                                                     "negative")]
    return out

