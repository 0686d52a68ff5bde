"""Synthetic signal injection and detection benchmarks.

Null phenotypes are seeded Gaussian noise, optionally smoothed over mesh
neighbours. A signal is added as ``I * beta_map[v] * x[s]`` where ``x`` is an
allele-dosage predictor, and pipeline variants are scored against the known
support of ``beta_map``.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import ValidationError
from .glm import DesignMatrix
from .inference import PermutationPlan, cluster_extent_inference, freedman_lane
from .mesh import make_ventricle_mesh
from .tfce import TfceParams

__all__ = [
    "SIGNALS",
    "SyntheticSignalSpec",
    "DetectionMetrics",
    "Cohort",
    "SweepConfig",
    "SweepCell",
    "SweepContext",
    "make_null_phenotype",
    "make_cohort",
    "make_beta_map",
    "allele_dosage",
    "inject_signal",
    "evaluate_detection",
    "run_cell",
    "sweep",
    "sweep_cells",
    "long_format",
    "METRIC_FIELDS",
]

logger = logging.getLogger(__name__)

# name -> (vertex coverage, sign of the coefficients)
SIGNALS = {
    "A": (0.10, 1.0),
    "B": (0.60, -1.0),
    "1": (0.25, 1.0),
    "2": (0.50, 1.0),
    "3": (0.75, 1.0),
}

METRIC_FIELDS = ("sensitivity", "specificity", "fdr")


@dataclass(frozen=True, eq=False)
class SyntheticSignalSpec:
    beta_map: np.ndarray
    intensity: float
    predictor: np.ndarray

    @property
    def coverage(self):
        return float(np.count_nonzero(self.beta_map)) / len(self.beta_map)

    @property
    def support(self):
        return np.asarray(self.beta_map) != 0


@dataclass
class DetectionMetrics:
    sensitivity: float
    specificity: float
    fdr: float
    true_mask: np.ndarray = field(repr=False)
    detected_mask: np.ndarray = field(repr=False)

    @property
    def true_positives(self):
        return int(np.count_nonzero(self.true_mask & self.detected_mask))

    @property
    def false_positives(self):
        return int(np.count_nonzero(~self.true_mask & self.detected_mask))


def evaluate_detection(detected_mask, true_mask):
    """Confusion-matrix rates of a detection mask against the truth.

    ``sensitivity = TP / (TP + FN)``, ``specificity = TN / (TN + FP)`` and
    ``fdr = FP / max(1, TP + FP)``. An empty class yields a rate of 1 for
    sensitivity/specificity (nothing to miss).
    """
    det = np.asarray(detected_mask, dtype=bool)
    truth = np.asarray(true_mask, dtype=bool)
    if det.shape != truth.shape:
        raise ValidationError("masks differ in length")
    tp = np.count_nonzero(det & truth)
    fp = np.count_nonzero(det & ~truth)
    fn = np.count_nonzero(~det & truth)
    tn = np.count_nonzero(~det & ~truth)
    sens = tp / (tp + fn) if tp + fn else 1.0
    spec = tn / (tn + fp) if tn + fp else 1.0
    fdr = fp / max(1, tp + fp)
    return DetectionMetrics(float(sens), float(spec), float(fdr), truth, det)


def _smooth(mesh, Y, passes):
    if passes <= 0:
        return Y
    adj = mesh.adjacency_matrix().astype(float)
    deg = np.asarray(adj.sum(axis=1)).ravel() + 1.0
    for _ in range(passes):
        Y = (Y + (adj @ Y.T).T) / deg
    return Y


def make_null_phenotype(n_subjects, mesh, smoothing=0, seed=0):
    """Seeded standard-normal noise, optionally neighbour-averaged.

    Parameters
    ----------
    n_subjects : int
    mesh : TriangleMesh or int
        A plain vertex count is accepted when ``smoothing == 0``.
    smoothing : int
        Number of passes replacing each value by the mean over the vertex
        and its neighbours. The result is rescaled to unit overall SD.
    """
    n_vertices = mesh if isinstance(mesh, (int, np.integer)) \
        else mesh.n_vertices
    if n_subjects < 1 or n_vertices < 1:
        raise ValidationError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n_subjects, n_vertices))
    if smoothing:
        if isinstance(mesh, (int, np.integer)):
            raise ValidationError("smoothing needs a mesh")
        Y = _smooth(mesh, Y, smoothing)
        Y /= Y.std()
    return Y


def allele_dosage(n, maf=0.3, rng=None):
    """Imputed-genotype-like dosage in ``[0, 2]``."""
    rng = np.random.default_rng(rng)
    g = rng.binomial(2, maf, size=n).astype(float)
    return np.clip(g + rng.normal(0.0, 0.1, size=n), 0.0, 2.0)


@dataclass(frozen=True, eq=False)
class Cohort:
    """Null cohort: covariates and noise phenotype for every subject."""

    snp: np.ndarray
    age: np.ndarray
    sex: np.ndarray
    Y: np.ndarray

    @property
    def n_subjects(self):
        return len(self.snp)

    def subset(self, idx):
        return Cohort(self.snp[idx], self.age[idx], self.sex[idx],
                      self.Y[idx])

    def design(self):
        return DesignMatrix.from_columns(
            {"snp": self.snp, "age": self.age, "sex": self.sex}, ["snp"])


def make_cohort(n_subjects, mesh, smoothing=0, seed=0, maf=0.3):
    """Null cohort with dosage, age and sex covariates."""
    ss = np.random.SeedSequence(seed)
    cov_seed, y_seed = ss.spawn(2)
    rng = np.random.default_rng(cov_seed)
    snp = allele_dosage(n_subjects, maf, rng)
    age = rng.normal(55.0, 12.0, size=n_subjects)
    sex = rng.integers(0, 2, size=n_subjects).astype(float)
    Y = make_null_phenotype(n_subjects, mesh, smoothing,
                            np.random.default_rng(y_seed))
    return Cohort(snp, age, sex, Y)


def make_beta_map(mesh, coverage, sign=1.0, seed=0, center=None,
                  rim=0.05):
    """Smooth patch of coefficients covering a fraction of the vertices.

    The patch is the ``ceil(coverage * n)`` vertices nearest (along mesh
    edges) to a centre vertex. Coefficients follow a Gaussian profile in
    that distance, 1 at the centre and ``rim`` at the farthest patch
    vertex, and are multiplied by ``sign``: positive maps lie in ``(0, 1]``
    and negative ones in ``[-1, 0)``.
    """
    if not 0 < coverage <= 1:
        raise ValidationError("coverage must lie in (0, 1]")
    if not 0 < rim <= 1:
        raise ValidationError("rim must lie in (0, 1]")
    n = mesh.n_vertices
    if center is None:
        candidates = np.flatnonzero(mesh.in_surface)
        center = int(np.random.default_rng(seed).choice(candidates))
    adj = mesh.adjacency_matrix().tocoo()
    lengths = np.linalg.norm(mesh.vertices[adj.row] - mesh.vertices[adj.col],
                             axis=1)
    graph = sparse.coo_matrix((lengths, (adj.row, adj.col)), shape=adj.shape)
    dist = csgraph.dijkstra(graph.tocsr(), directed=False, indices=center)
    k = int(np.ceil(round(coverage * n, 9)))
    order = np.lexsort((np.arange(n), dist))
    patch = order[:k]
    d = dist[patch]
    dmax = d.max() if d.max() > 0 else 1.0
    beta = np.zeros(n)
    beta[patch] = np.exp(np.log(rim) * (d / dmax) ** 2)
    return float(sign) * beta


def inject_signal(Y, spec):
    """``Y + I * x[:, None] * beta_map[None, :]``."""
    Y = np.asarray(Y, dtype=float)
    beta = np.asarray(spec.beta_map, dtype=float)
    x = np.asarray(spec.predictor, dtype=float)
    if Y.shape != (len(x), len(beta)):
        raise ValidationError(
            f"phenotype shape {Y.shape} does not match predictor "
            f"({len(x)}) x beta map ({len(beta)})")
    return Y + spec.intensity * np.outer(x, beta)


@dataclass(frozen=True)
class SweepCell:
    """One grid cell; together with the sweep context it fully determines
    the outcome."""

    signal: str
    n_subjects: int
    intensity: float
    variant: str
    replicate: int = 0
    E: float | None = None
    H: float | None = None
    h_thr: float | None = None


@dataclass
class SweepConfig:
    """Grid and shared settings of a benchmark sweep."""

    sample_sizes: tuple = (40, 80)
    intensities: tuple = (0.2, 0.4)
    signals: tuple = ("B",)
    variants: tuple = ("mur", "tfce")
    E_values: tuple = (0.5,)
    H_values: tuple = (2.0,)
    h_thr_values: tuple = (0.5, 1.0, 1.5, 2.0, 2.5)
    replicates: int = 1
    cohort_size: int = 400
    num_permutations: int = 500
    tfce_steps: int = 100
    min_cluster_vertices: int = 3
    q: float = 0.05
    correction: str = "bh"
    smoothing: int = 0
    seed: int = 0
    mesh_rings: int = 10
    mesh_sectors: int = 20

    def __post_init__(self):
        for v in self.variants:
            if v not in ("mur", "tfce", "cluster"):
                raise ValidationError(f"unknown variant {v!r}")
        for s in self.signals:
            if s not in SIGNALS:
                raise ValidationError(f"unknown signal {s!r}")
        if max(self.sample_sizes) > self.cohort_size:
            raise ValidationError(
                f"subsample of {max(self.sample_sizes)} exceeds the cohort "
                f"of {self.cohort_size}")
        if min(self.sample_sizes) < 6:
            raise ValidationError("sample sizes must be at least 6")


def sweep_cells(config):
    """Grid cells in deterministic order."""
    cells = []
    for signal, n, intensity, rep in itertools.product(
            config.signals, config.sample_sizes, config.intensities,
            range(config.replicates)):
        for variant in config.variants:
            if variant == "mur":
                cells.append(SweepCell(signal, n, intensity, variant, rep))
            elif variant == "tfce":
                for E, H in itertools.product(config.E_values,
                                              config.H_values):
                    cells.append(SweepCell(signal, n, intensity, variant,
                                           rep, E, H))
            else:
                for h in config.h_thr_values:
                    cells.append(SweepCell(signal, n, intensity, variant,
                                           rep, h_thr=h))
    return cells


class SweepContext:
    """Mesh, null cohort and beta maps shared by every cell of a sweep."""

    def __init__(self, config, mesh=None):
        self.config = config
        self.mesh = mesh if mesh is not None else make_ventricle_mesh(
            config.mesh_rings, config.mesh_sectors)
        self.cohort = make_cohort(config.cohort_size, self.mesh,
                                  config.smoothing, config.seed)
        self.beta_maps = {}
        for i, name in enumerate(config.signals):
            coverage, sign = SIGNALS[name]
            self.beta_maps[name] = make_beta_map(
                self.mesh, coverage, sign,
                seed=np.random.SeedSequence([config.seed, 1, i]))

    def _seed(self, cell, stream):
        c = self.config
        key = [c.seed, stream, list(c.signals).index(cell.signal),
               list(c.sample_sizes).index(cell.n_subjects),
               list(c.intensities).index(cell.intensity), cell.replicate]
        return int(np.random.SeedSequence(key).generate_state(
            1, np.uint64)[0])

    def data_seed(self, cell):
        return self._seed(cell, 2)

    def perm_seed(self, cell):
        # shared by all variants of one data draw
        return self._seed(cell, 3)

    def cell_data(self, cell):
        seed = self.data_seed(cell)
        rng = np.random.default_rng(seed)
        if cell.n_subjects > self.cohort.n_subjects:
            raise ValidationError("subsample larger than cohort")
        idx = np.sort(rng.choice(self.cohort.n_subjects, cell.n_subjects,
                                 replace=False))
        sub = self.cohort.subset(idx)
        spec = SyntheticSignalSpec(self.beta_maps[cell.signal],
                                   cell.intensity, sub.snp)
        return sub.design(), inject_signal(sub.Y, spec), spec, seed


def _detect(ctx, cell, design, Y, perm_seed):
    c = ctx.config
    if cell.variant == "cluster":
        plan = PermutationPlan(c.num_permutations, perm_seed, tfce=None)
        res = cluster_extent_inference(design, "snp", Y, ctx.mesh,
                                       cell.h_thr, plan, alpha=c.q)
        return res.mask
    tfce = None
    if cell.variant == "tfce":
        tfce = TfceParams(cell.E, cell.H, c.tfce_steps,
                          c.min_cluster_vertices)
    plan = PermutationPlan(c.num_permutations, perm_seed, tfce=tfce)
    res = freedman_lane(design, "snp", Y, ctx.mesh, plan, c.correction, c.q)
    return res.mask


def run_cell(ctx, cell):
    """Score one cell; returns a flat row dict (provenance plus metrics)."""
    design, Y, spec, seed = ctx.cell_data(cell)
    perm_seed = ctx.perm_seed(cell)
    mask = _detect(ctx, cell, design, Y, perm_seed)
    metrics = evaluate_detection(mask, spec.support)
    row = asdict(cell)
    row.update(
        coverage=spec.coverage, data_seed=seed, perm_seed=perm_seed,
        num_permutations=ctx.config.num_permutations, q=ctx.config.q,
        sweep_seed=ctx.config.seed,
        sensitivity=metrics.sensitivity, specificity=metrics.specificity,
        fdr=metrics.fdr, n_detected=int(mask.sum()),
        n_false_positive=metrics.false_positives)
    return row


def sweep(config, mesh=None, workers=1, progress=None):
    """Run every grid cell; rows come back in grid order."""
    ctx = SweepContext(config, mesh)
    cells = sweep_cells(config)

    def one(item):
        i, cell = item
        row = run_cell(ctx, cell)
        if progress is not None:
            progress(i + 1, len(cells))
        return row

    if workers <= 1:
        return [one(item) for item in enumerate(cells)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, enumerate(cells)))


def long_format(rows, metrics=METRIC_FIELDS):
    """Melt sweep rows to ``(signal, variant, E, H, h_thr, N, I, metric,
    value)`` averaged over replicates, ready for contour plots."""
    groups = {}
    for r in rows:
        key = (r["signal"], r["variant"], r["E"], r["H"], r["h_thr"],
               r["n_subjects"], r["intensity"])
        groups.setdefault(key, []).append(r)
    out = []
    for key, members in groups.items():
        for m in metrics:
            out.append(dict(zip(
                ("signal", "variant", "E", "H", "h_thr", "N", "I"), key),
                metric=m, value=float(np.mean([x[m] for x in members]))))
    return out
