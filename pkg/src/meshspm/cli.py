"""Command-line front end.

Commands: ``fit``, ``infer``, ``sweep``, ``global`` and ``diagnose``. Each
writes CSV tables, PNG figures and a ``manifest.json`` into ``--out``.
Outputs are staged and published only when the whole command succeeds.
Progress and errors go to stderr; stdout carries one machine-readable
summary line per result.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from . import io as mio
from .config import load_config
from .diagnostics import diagnostics
from .errors import (InputOutputError, MeshSPMError, NumericalError,
                     ValidationError)
from .glm import (FLAG_ZERO_SE, ContrastFitter, mass_univariate,
                  standardize_columns)
from .inference import (PermutationPlan, cluster_extent_inference,
                        infer_models)
from .synth import SweepConfig, long_format, sweep
from .tfce import TfceParams

logger = logging.getLogger("meshspm")

COMMANDS = ("fit", "infer", "sweep", "global", "diagnose")


def build_parser():
    p = argparse.ArgumentParser(prog="meshspm", description=__doc__.split(
        "\n")[0])
    p.add_argument("--version", action="version",
                   version=f"meshspm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _add_common(sp)
    return p


def _add_common(sp):
    a = sp.add_argument
    a("--config", help="INI file with a [meshspm] section")
    a("--from-manifest", help="re-run the configuration of a manifest, "
      "checking that its inputs are unchanged")
    a("--out", help="output directory")
    a("--mesh", help="PLY mesh, or vertex text file when --faces is given")
    a("--faces", help="face text file (zero-based indices)")
    a("--design", help="design CSV")
    a("--phenotype", help="phenotype CSV, one row per subject")
    a("--interest", action="append", help="column of interest (repeatable)")
    a("--nuisance", action="append", help="nuisance column (repeatable); "
      "default: all other design columns")
    a("--no-intercept", dest="intercept", action="store_const", const=False)
    a("--id-column")
    a("--standardize", dest="standardize", action="store_const", const=True)
    a("--no-standardize", dest="standardize", action="store_const",
      const=False)
    a("--estimator", choices=("ols", "hc4m"))
    a("--mode", choices=("tfce", "mur"))
    a("--tfce-e", type=float)
    a("--tfce-h", type=float)
    a("--tfce-steps", type=int)
    a("--min-cluster", type=int)
    a("--permutations", type=int)
    a("--seed", type=int)
    a("--correction", choices=("bh", "tsbh", "maxstat"))
    a("--q", type=float)
    a("--no-pooled", dest="pooled", action="store_const", const=False)
    a("--cluster-extent-thr", type=float, action="append")
    a("--response", help="per-subject scalar response column (global)")
    a("--no-figures", dest="figures", action="store_const", const=False)
    a("--sample-sizes")
    a("--intensities")
    a("--signals")
    a("--variants")
    a("--e-values")
    a("--h-values")
    a("--replicates", type=int)
    a("--cohort-size", type=int)
    a("--smoothing", type=int)
    a("--mesh-rings", type=int)
    a("--mesh-sectors", type=int)
    a("--workers", type=int)
    a("--record-timings", action="store_const", const=True,
      help="report stage timings on stderr and in the manifest (the "
      "manifest is then no longer reproducible byte for byte)")
    a("--quiet", action="store_const", const=True)


# -- helpers -----------------------------------------------------------


def _read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputOutputError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed manifest {path}: {exc}") from exc


def verify_inputs(manifest):
    """Names of inputs whose current digest differs from the manifest."""
    changed = []
    for role, entry in sorted(manifest.get("inputs", {}).items()):
        try:
            digest = mio.sha256_file(entry["path"])
        except InputOutputError:
            digest = None
        if digest != entry["sha256"]:
            changed.append(role)
    return changed


def _inputs(cfg):
    roles = {"mesh": cfg.mesh, "faces": cfg.faces, "design": cfg.design,
             "phenotype": cfg.phenotype}
    return {r: {"path": p, "sha256": mio.sha256_file(p)}
            for r, p in roles.items() if p}


def _manifest(cfg, command, inputs, outputs, status="ok", error=None,
              timings=None):
    m = {"tool": "meshspm", "version": __version__,
         "format_version": mio.FORMAT_VERSION, "command": command,
         "status": status, "seed": cfg.seed, "config": cfg.snapshot(),
         "inputs": inputs, "outputs": outputs}
    if error is not None:
        m["error"] = error
    if timings is not None:
        m["timings"] = timings
    return m


def _load_design(cfg, interest=None):
    return mio.read_design_csv(cfg.design, interest or cfg.interest,
                               cfg.nuisance, cfg.intercept, cfg.id_column)


def _load_phenotype(cfg, design_ids):
    Y = mio.read_phenotype_csv(cfg.phenotype, cfg.id_column)
    if design_ids and Y.subject_ids and tuple(design_ids) != tuple(
            Y.subject_ids):
        raise ValidationError(
            "design and phenotype subject ids differ or are out of order")
    return Y


def _check_sizes(design, Y, mesh=None):
    if Y.values.shape[0] != design.n_subjects:
        raise ValidationError(
            f"phenotype has {Y.values.shape[0]} subjects, design has "
            f"{design.n_subjects}")
    if mesh is not None and Y.n_vertices != mesh.n_vertices:
        raise ValidationError(
            f"phenotype has {Y.n_vertices} vertices, mesh has "
            f"{mesh.n_vertices}")


def _tfce_params(cfg):
    if cfg.mode == "mur":
        return None
    return TfceParams(cfg.tfce_e, cfg.tfce_h, cfg.tfce_steps,
                      cfg.min_cluster)


# -- commands ------------------------------------------------------------
# each fills the staging directory and returns the stdout summary lines


def _diag_tables(stage, report):
    mio.write_table(stage.path("collinearity.csv"), {
        "column": list(report.column_names), "vif": report.vif,
        "collinear": report.collinear})
    mio.write_table(stage.path("design_summary.csv"), {
        "quantity": ["condition_number"],
        "value": [report.condition_number]})
    if report.bp_stat is not None:
        n = report.bp_stat.size
        mio.write_table(stage.path("heteroscedasticity.csv"), {
            "vertex": np.arange(n), "bp_stat": report.bp_stat,
            "bp_p": report.bp_pvalue, "white_stat": report.white_stat,
            "white_p": report.white_pvalue,
            "white_df": np.full(n, report.white_df)})


def cmd_fit(cfg, stage, timings):
    design, ids = _load_design(cfg)
    Y = _load_phenotype(cfg, ids)
    mesh = mio.load_mesh(cfg.mesh, cfg.faces) if cfg.mesh else None
    _check_sizes(design, Y, mesh)
    t0 = time.perf_counter()
    cols = {"vertex": np.arange(Y.n_vertices)}
    fits = {}
    for name in cfg.interest:
        res = mass_univariate(design, Y, name, cfg.glm_estimator,
                              cfg.standardize)
        fits[name] = res
        cols.update({f"beta_{name}": res.beta, f"se_{name}": res.se,
                     f"t_{name}": res.tstat, f"flags_{name}": res.flags})
    report = diagnostics(design, Y)
    timings["fit"] = time.perf_counter() - t0
    mio.write_table(stage.path("fit.csv"), cols)
    _diag_tables(stage, report)
    if mesh is not None:
        props = {f"t_{n}": r.tstat for n, r in fits.items()}
        props.update({f"beta_{n}": r.beta for n, r in fits.items()})
        mio.write_ply(stage.path("fit.ply"), mesh, props)
        if cfg.figures:
            from .plotting import plot_surface_map
            for n, r in fits.items():
                plot_surface_map(mesh, r.tstat, stage.path(f"t_{n}.png"),
                                 title=f"t map: {n}")
    lines = []
    for n, r in fits.items():
        lines.append(f"fit\t{n}\tmax_abs_t={np.max(np.abs(r.tstat)):.6g}\t"
                     f"flagged={int(np.count_nonzero(r.flags))}")
    if report.collinear.any():
        logger.warning("collinear design columns: %s", ", ".join(
            c for c, b in zip(report.column_names, report.collinear) if b))
    return lines


def cmd_infer(cfg, stage, timings):
    design, ids = _load_design(cfg)
    Y = _load_phenotype(cfg, ids)
    mesh = mio.load_mesh(cfg.mesh, cfg.faces)
    _check_sizes(design, Y, mesh)
    plan = PermutationPlan(cfg.num_permutations("infer"), cfg.seed,
                           cfg.glm_estimator, _tfce_params(cfg))
    t0 = time.perf_counter()
    results = infer_models(design, cfg.interest, Y, mesh, plan,
                           cfg.correction, cfg.q, cfg.standardize,
                           cfg.workers, cfg.pooled)
    timings["inference"] = time.perf_counter() - t0
    clusters = {}
    if cfg.cluster_extent_thr:
        t0 = time.perf_counter()
        ce_plan = PermutationPlan(plan.num_permutations, cfg.seed,
                                  cfg.glm_estimator, tfce=None)
        for name in cfg.interest:
            clusters[name] = cluster_extent_inference(
                design, name, Y, mesh, list(cfg.cluster_extent_thr),
                ce_plan, cfg.q, cfg.standardize, cfg.workers)
        timings["cluster_extent"] = time.perf_counter() - t0

    area = mesh.vertex_area
    total = mesh.total_area
    summary = {k: [] for k in ("contrast", "method", "statistic",
                               "correction", "q", "threshold",
                               "n_significant", "significant_area",
                               "total_area", "S")}
    lines = []

    def add(contrast, method, statistic, correction, thr, mask):
        s_area = float(area[mask].sum())
        for k, v in zip(summary, (contrast, method, statistic, correction,
                                  cfg.q, thr, int(mask.sum()), s_area,
                                  total, s_area / total)):
            summary[k].append(v)
        lines.append(f"{method}\t{contrast}\tS={s_area / total:.6g}\t"
                     f"n_significant={int(mask.sum())}")

    for name, res in zip(cfg.interest, results):
        cols = {"vertex": np.arange(mesh.n_vertices), "beta": res.beta,
                "se": res.se, "t": res.tstat, "flags": res.flags,
                "score": res.observed, "p_raw": res.p_raw,
                "p_adjusted": res.p_adjusted, "significant": res.mask}
        method = "tfce" if plan.tfce is not None else "mur"
        add(name, method, res.statistic, res.correction, res.threshold,
            res.mask)
        props = {"t": res.tstat, "score": res.observed,
                 "p_adjusted": res.p_adjusted, "significant": res.mask}
        for ce in clusters.get(name, []):
            cols[f"cluster_h{ce.h_thr:g}"] = ce.mask
            props[f"cluster_h{ce.h_thr:g}"] = ce.mask
            add(name, f"cluster_h{ce.h_thr:g}", "extent", "maxstat",
                ce.extent_threshold, ce.mask)
        mio.write_table(stage.path(f"result_{name}.csv"), cols)
        mio.write_ply(stage.path(f"overlay_{name}.ply"), mesh, props)
        if clusters.get(name):
            rows = []
            for ce in clusters[name]:
                for i, (c, sign, sig) in enumerate(zip(
                        ce.clusters, ce.signs, ce.significant)):
                    rows.append({"h_thr": ce.h_thr, "cluster": i,
                                 "sign": sign, "n_vertices": len(c),
                                 "extent": c.extent,
                                 "critical_extent": ce.extent_threshold,
                                 "significant": sig})
            mio.write_rows(stage.path(f"clusters_{name}.csv"), rows,
                           ["h_thr", "cluster", "sign", "n_vertices",
                            "extent", "critical_extent", "significant"])
        if cfg.figures:
            from .plotting import plot_p_histogram, plot_surface_map
            plot_p_histogram(res.p_raw, stage.path(f"p_hist_{name}.png"),
                             title=f"raw p-values: {name}")
            plot_surface_map(mesh, res.tstat,
                             stage.path(f"map_{name}.png"), mask=res.mask,
                             title=f"t map: {name}, S="
                             f"{area[res.mask].sum() / total:.3f}")
    mio.write_table(stage.path("summary.csv"), summary)
    return lines


def _sweep_config(cfg):
    return SweepConfig(
        sample_sizes=tuple(cfg.sample_sizes),
        intensities=tuple(cfg.intensities), signals=tuple(cfg.signals),
        variants=tuple(cfg.variants), E_values=tuple(cfg.e_values),
        H_values=tuple(cfg.h_values),
        h_thr_values=tuple(cfg.cluster_extent_thr) or (0.5, 1.0, 1.5, 2.0,
                                                        2.5),
        replicates=cfg.replicates, cohort_size=cfg.cohort_size,
        num_permutations=cfg.num_permutations("sweep"),
        tfce_steps=cfg.tfce_steps, min_cluster_vertices=cfg.min_cluster,
        q=cfg.q, correction=cfg.correction, smoothing=cfg.smoothing,
        seed=cfg.seed, mesh_rings=cfg.mesh_rings,
        mesh_sectors=cfg.mesh_sectors)


def best_tfce_cells(long_rows, metric="sensitivity", E=0.5, H=2.0):
    """Per signal: best (E, H) by grid-averaged ``metric`` and how the
    reference (E, H) compares."""
    out = []
    for s in sorted({r["signal"] for r in long_rows
                     if r["variant"] == "tfce"}):
        means = {}
        for r in long_rows:
            if r["signal"] == s and r["variant"] == "tfce" and \
                    r["metric"] == metric:
                means.setdefault((r["E"], r["H"]), []).append(r["value"])
        means = {k: float(np.mean(v)) for k, v in means.items()}
        best = max(sorted(means), key=lambda k: means[k])
        ref = means.get((E, H))
        out.append({"signal": s, "best_E": best[0], "best_H": best[1],
                    f"best_{metric}": means[best], "ref_E": E, "ref_H": H,
                    f"ref_{metric}": ref,
                    "ref_relative_gap": None if ref is None or
                    means[best] == 0 else (means[best] - ref) / means[best]})
    return out


def cmd_sweep(cfg, stage, timings):
    sc = _sweep_config(cfg)

    def progress(i, n):
        logger.info("sweep cell %d/%d", i, n)

    t0 = time.perf_counter()
    rows = sweep(sc, workers=cfg.workers, progress=progress)
    timings["sweep"] = time.perf_counter() - t0
    mio.write_rows(stage.path("sweep.csv"), rows)
    lf = long_format(rows)
    mio.write_rows(stage.path("sweep_long.csv"), lf,
                   ["signal", "variant", "E", "H", "h_thr", "N", "I",
                    "metric", "value"])
    best = best_tfce_cells(lf)
    if best:
        mio.write_rows(stage.path("tfce_best.csv"), best)
    if cfg.figures:
        from .plotting import plot_difference, plot_eh_map, \
            plot_sweep_contours
        for metric in ("sensitivity", "fdr"):
            plot_sweep_contours(lf, stage.path(f"contours_{metric}.png"),
                                metric)
        if "mur" in sc.variants and "tfce" in sc.variants:
            plot_difference(lf, stage.path("difference_sensitivity.png"),
                            E=sc.E_values[0], H=sc.H_values[0])
        if "tfce" in sc.variants and (len(sc.E_values) > 1
                                      or len(sc.H_values) > 1):
            plot_eh_map(lf, stage.path("eh_sensitivity.png"))
    return [f"sweep\trows={len(rows)}"]


def global_regression(design, y, predictors, estimator="classical",
                      standardize=True):
    """One regression per predictor of a scalar response.

    Each model keeps the design's nuisance columns and adds a single
    predictor. p-values are two-sided from the t distribution with
    ``n - p`` degrees of freedom.

    Returns
    -------
    list of dict with keys name, beta, se, t, p, df, n
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValidationError("response contains non-finite values")
    rows = []
    nuis = [j for j in design.nuisance_columns]
    for name in predictors:
        j = design.column_index(name)
        cols = nuis + [j]
        X = design.values[:, cols]
        yy = y
        if standardize:
            exempt = () if design.intercept is None else (
                cols.index(design.intercept),)
            X = standardize_columns(X, exempt)
            if np.ptp(y) > 0:
                yy = (y - y.mean()) / y.std(ddof=1)
        fitter = ContrastFitter(X, len(cols) - 1, estimator)
        res = fitter.fit(yy[:, None])
        df = X.shape[0] - X.shape[1]
        beta = float(res.beta[0])
        t = float(res.tstat[0])
        if res.flags[0] & FLAG_ZERO_SE and beta != 0:
            # exact fit: the effect is certain
            t = float(np.copysign(np.inf, beta))
        rows.append({"name": name, "beta": beta, "se": float(res.se[0]),
                     "t": t, "p": float(2 * stats.t.sf(abs(t), df)),
                     "df": df, "n": X.shape[0]})
    return rows


def cmd_global(cfg, stage, timings):
    header, _ = mio.read_table(cfg.design)
    if cfg.response in header:
        _, rows = mio.read_table(cfg.design)
        j = header.index(cfg.response)
        try:
            y = np.array([float(r[j]) for r in rows])
        except ValueError:
            raise ValidationError(
                f"response {cfg.response!r} is not numeric") from None
        nuisance = cfg.nuisance
        if nuisance is None:
            nuisance = [h for h in header if h not in cfg.interest
                        and h not in (cfg.response, cfg.id_column)]
        design, _ = mio.read_design_csv(cfg.design, cfg.interest, nuisance,
                                        cfg.intercept, cfg.id_column)
    elif cfg.phenotype:
        design, ids = _load_design(cfg)
        ph_header, ph_rows = mio.read_table(cfg.phenotype)
        if cfg.response not in ph_header:
            raise ValidationError(f"no response column {cfg.response!r}")
        j = ph_header.index(cfg.response)
        y = np.array([float(r[j]) for r in ph_rows])
        if cfg.id_column in ph_header and ids:
            k = ph_header.index(cfg.id_column)
            if tuple(r[k] for r in ph_rows) != tuple(ids):
                raise ValidationError("design and phenotype subject ids "
                                      "differ or are out of order")
    else:
        raise ValidationError(f"no response column {cfg.response!r}")
    if y.size != design.n_subjects:
        raise ValidationError("response length does not match the design")
    t0 = time.perf_counter()
    rows = global_regression(design, y, cfg.interest, cfg.glm_estimator,
                             cfg.standardize)
    timings["global"] = time.perf_counter() - t0
    mio.write_rows(stage.path("global.csv"), rows,
                   ["name", "beta", "se", "t", "p", "df", "n"])
    return [f"global\t{r['name']}\tbeta={r['beta']:.6g}\tp={r['p']:.6g}"
            for r in rows]


def cmd_diagnose(cfg, stage, timings):
    header, _ = mio.read_table(cfg.design)
    interest = cfg.interest or [h for h in header if h != cfg.id_column][:1]
    design, ids = _load_design(cfg, interest)
    Y = None
    if cfg.phenotype:
        Y = _load_phenotype(cfg, ids)
        _check_sizes(design, Y)
    t0 = time.perf_counter()
    report = diagnostics(design, Y)
    timings["diagnostics"] = time.perf_counter() - t0
    _diag_tables(stage, report)
    lines = [f"diagnose\tcondition_number={report.condition_number:.6g}\t"
             f"collinear={int(report.collinear.sum())}"]
    if Y is not None and report.bp_pvalue is not None and cfg.figures:
        from .plotting import plot_p_histogram
        plot_p_histogram(report.bp_pvalue, stage.path("bp_p_hist.png"),
                         title="Breusch-Pagan p-values")
    return lines


_RUNNERS = {"fit": cmd_fit, "infer": cmd_infer, "sweep": cmd_sweep,
            "global": cmd_global, "diagnose": cmd_diagnose}


def run(command, cfg):
    """Execute ``command``; returns the stdout summary lines.

    Validation happens before anything is written. Once outputs are being
    produced, a failure leaves only a manifest with ``status: failed``.
    """
    cfg.validate(command)
    inputs = _inputs(cfg)
    if cfg.from_manifest:
        manifest = _read_manifest(cfg.from_manifest)
        changed = verify_inputs(manifest)
        if changed:
            raise ValidationError("inputs changed since the manifest was "
                                  "written: " + ", ".join(changed))
    timings = {}
    out = Path(cfg.out)
    with mio.StagedOutput(out) as stage:
        try:
            lines = _RUNNERS[command](cfg, stage, timings)
            outputs = {n: mio.sha256_file(stage.path(n))
                       for n in stage.files()}
            mio.write_json(stage.path("manifest.json"), _manifest(
                cfg, command, inputs, outputs,
                timings=timings if cfg.record_timings else None))
            stage.publish()
        except MeshSPMError as exc:
            if not isinstance(exc, ValidationError) or stage.files():
                _write_failed(out, cfg, command, inputs, exc)
            raise
        except (np.linalg.LinAlgError, FloatingPointError,
                ArithmeticError) as exc:
            err = NumericalError(f"numerical failure: {exc}")
            _write_failed(out, cfg, command, inputs, err)
            raise err from exc
    if cfg.record_timings:
        for k, v in timings.items():
            logger.warning("timing %s: %.3fs", k, v)
    return lines


def _write_failed(out, cfg, command, inputs, exc):
    try:
        out.mkdir(parents=True, exist_ok=True)
        mio.write_json(out / "manifest.json", _manifest(
            cfg, command, inputs, {}, status="failed",
            error={"type": type(exc).__name__, "message": str(exc)}))
    except MeshSPMError:
        pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="meshspm: %(message)s")
    try:
        manifest_cfg = None
        if flags.get("from_manifest"):
            manifest_cfg = _read_manifest(flags["from_manifest"]).get(
                "config")
        cfg = load_config(flags, manifest_config=manifest_cfg)
        if cfg.quiet:
            logger.setLevel(logging.WARNING)
        lines = run(args.command, cfg)
    except MeshSPMError as exc:
        err = {"error": type(exc).__name__, "message": str(exc),
               "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
