import hashlib
import json
import os

import numpy as np
import pytest
from scipy import stats

import oracles
from conftest import write_dataset
from meshspm import io as mio
from meshspm.cli import global_regression, main, run
from meshspm.config import RunConfig
from meshspm.glm import DesignMatrix, mass_univariate


def tree_digest(folder):
    h = hashlib.sha256()
    for name in sorted(os.listdir(folder)):
        h.update(name.encode())
        h.update(mio.sha256_file(os.path.join(folder, name)).encode())
    return h.hexdigest()


def _infer_args(paths, out, *extra):
    return ["infer", "--mesh", paths["mesh"], "--design", paths["design"],
            "--phenotype", paths["phenotype"], "--interest", "snp",
            "--out", str(out), "--quiet", *extra]


# -- fit -----------------------------------------------------------------


def test_fit_toy_three_vertex(tmp_path):
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    mio.write_ply(tmp_path / "tri.ply",
                  type("M", (), {"n_vertices": 3, "vertices": np.array(v),
                                 "triangles": np.array([[0, 1, 2]])}))
    rng = np.random.default_rng(0)
    n = 12
    x = rng.standard_normal(n)
    age = rng.standard_normal(n)
    Y = rng.standard_normal((n, 3)) + np.outer(x, [1, 0, -1])
    mio.write_table(tmp_path / "d.csv", {"subject_id": list(range(n)),
                                         "x": x, "age": age})
    mio.write_table(tmp_path / "y.csv", {f"v{j}": Y[:, j] for j in range(3)})
    code = main(["fit", "--mesh", str(tmp_path / "tri.ply"), "--design",
                 str(tmp_path / "d.csv"), "--phenotype",
                 str(tmp_path / "y.csv"), "--interest", "x",
                 "--no-standardize", "--out", str(tmp_path / "out")])
    assert code == 0
    header, rows = mio.read_table(tmp_path / "out" / "fit.csv")
    got = {h: np.array([float(r[i]) for r in rows])
           for i, h in enumerate(header)}
    X = np.column_stack([np.ones(n), x, age])
    for j in range(3):
        beta, _, se = oracles.ols_normal_equations(X, Y[:, j])
        assert got["beta_x"][j] == pytest.approx(beta[1], rel=1e-10)
        assert got["se_x"][j] == pytest.approx(se[1], rel=1e-10)
        assert got["t_x"][j] == pytest.approx(beta[1] / se[1], rel=1e-10)
    assert (tmp_path / "out" / "heteroscedasticity.csv").exists()
    assert (tmp_path / "out" / "t_x.png").exists()


def test_missing_interest_column_no_outputs(dataset, tmp_path, capsys):
    paths, _, _ = dataset()
    out = tmp_path / "out"
    args = _infer_args(paths, out)
    args[args.index("snp")] = "bmi"
    assert main(args) == 2
    assert not out.exists()
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ValidationError" and err["exit_code"] == 2
    assert main(["fit", "--design", paths["design"], "--phenotype",
                 paths["phenotype"], "--interest", "bmi", "--out",
                 str(out)]) == 2
    assert not out.exists()


def test_fit_rerun_byte_identical(dataset, tmp_path):
    paths, _, _ = dataset(intensity=0.5)
    digests = []
    for i in range(2):
        out = tmp_path / f"o{i}"
        assert main(["fit", "--mesh", paths["mesh"], "--design",
                     paths["design"], "--phenotype", paths["phenotype"],
                     "--interest", "snp", "--out", str(out)]) == 0
        digests.append(tree_digest(out))
    assert digests[0] == digests[1]


def test_exit_codes(dataset, tmp_path):
    paths, _, _ = dataset()
    out = tmp_path / "out"
    # unreadable input -> I/O error
    args = _infer_args({**paths, "mesh": str(tmp_path / "nope.ply")}, out)
    assert main(args) == 4
    # singular design -> numerical failure with a failed manifest
    header, rows = mio.read_table(paths["design"])
    cols = {h: [r[i] for r in rows] for i, h in enumerate(header)}
    cols["age2"] = [str(2 * float(a)) for a in cols["age"]]
    mio.write_table(tmp_path / "sing.csv", cols)
    args = _infer_args({**paths, "design": str(tmp_path / "sing.csv")}, out)
    assert main(args) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert os.listdir(out) == ["manifest.json"]
    # bad q -> validation error
    assert main(_infer_args(paths, tmp_path / "o2", "--q", "2")) == 2


# -- infer ---------------------------------------------------------------


def test_infer_outputs_and_manifest(dataset, tmp_path, capsys):
    paths, _, _ = dataset(intensity=1.0)
    out = tmp_path / "out"
    assert main(_infer_args(paths, out, "--permutations", "50",
                            "--cluster-extent-thr", "1",
                            "--cluster-extent-thr", "2")) == 0
    stdout = capsys.readouterr().out.strip().splitlines()
    assert stdout[0].startswith("tfce\tsnp\tS=")
    assert len(stdout) == 3
    names = set(os.listdir(out))
    assert {"result_snp.csv", "overlay_snp.ply", "summary.csv",
            "clusters_snp.csv", "p_hist_snp.png", "map_snp.png",
            "manifest.json"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["config"]["permutations"] == 50
    assert "timings" not in manifest
    for name, digest in manifest["outputs"].items():
        assert mio.sha256_file(out / name) == digest
    assert set(manifest["outputs"]) == names - {"manifest.json"}
    mesh, props = mio.read_ply(out / "overlay_snp.ply")
    assert {"t", "score", "p_adjusted", "significant", "cluster_h1",
            "cluster_h2"} <= set(props)


def test_manifest_rerun_and_tamper_detection(dataset, tmp_path):
    paths, _, _ = dataset(intensity=0.5)
    first = tmp_path / "a"
    assert main(_infer_args(paths, first, "--permutations", "30",
                            "--seed", "4")) == 0
    second = tmp_path / "b"
    assert main(["infer", "--from-manifest", str(first / "manifest.json"),
                 "--out", str(second), "--quiet"]) == 0
    assert tree_digest(first) == tree_digest(second)
    text = open(paths["design"]).read().replace("s000", "s999")
    open(paths["design"], "w").write(text)
    third = tmp_path / "c"
    assert main(["infer", "--from-manifest", str(first / "manifest.json"),
                 "--out", str(third), "--quiet"]) == 2
    assert not third.exists()


def test_record_timings_only_on_request(dataset, tmp_path):
    paths, _, _ = dataset()
    out = tmp_path / "out"
    assert main(_infer_args(paths, out, "--permutations", "10",
                            "--record-timings", "--no-figures")) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert "inference" in manifest["timings"]


def test_env_and_config_file(dataset, tmp_path, monkeypatch):
    paths, _, _ = dataset()
    ini = tmp_path / "run.ini"
    ini.write_text("[meshspm]\n" + "".join(
        f"{k} = {v}\n" for k, v in paths.items()) +
        "interest = snp\npermutations = 20\nfigures = no\n")
    monkeypatch.setenv("MESHSPM_SEED", "7")
    out = tmp_path / "out"
    assert main(["infer", "--config", str(ini), "--out", str(out),
                 "--permutations", "15", "--quiet"]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["seed"] == 7 and cfg["permutations"] == 15
    assert not any(n.endswith(".png") for n in os.listdir(out))


def _s(lines, method="tfce"):
    for line in lines:
        if line.startswith(method + "\t"):
            return float(line.split("\t")[2][2:])
    raise AssertionError(lines)


def test_null_runs_rarely_significant(tmp_path):
    zero = 0
    for seed in range(20):
        paths, _, _ = write_dataset(tmp_path / f"d{seed}", 100, 0.0,
                                    seed=seed)
        cfg = RunConfig(**paths, out=str(tmp_path / f"o{seed}"),
                        interest=["snp"], permutations=200, seed=seed,
                        figures=False, workers=1)
        zero += _s(run("infer", cfg)) == 0
    assert zero >= 18


@pytest.mark.parametrize("seed", range(4))
def test_compact_signal_area_close_to_truth(tmp_path, seed):
    paths, support, mesh = write_dataset(tmp_path / "d", 100, 4.0, 0.1,
                                         seed=seed)
    true_s = mesh.vertex_area[support].sum() / mesh.total_area
    got = {}
    for mode in ("tfce", "mur"):
        cfg = RunConfig(**paths, out=str(tmp_path / mode), interest=["snp"],
                        permutations=1000, seed=seed, mode=mode,
                        figures=False, workers=1)
        got[mode] = _s(run("infer", cfg), mode)
    assert abs(got["tfce"] - true_s) <= 0.05
    assert got["tfce"] >= got["mur"]


# -- sweep ---------------------------------------------------------------


def test_sweep_smoke(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["sweep", "--sample-sizes", "20,30", "--intensities",
                 "0.5,1.0", "--variants", "tfce", "--cohort-size", "40",
                 "--permutations", "20", "--out", str(out), "--quiet"]) == 0
    rows = mio.read_table(out / "sweep.csv")[1]
    assert len(rows) == 4
    header = mio.read_table(out / "sweep.csv")[0]
    for field in ("signal", "n_subjects", "intensity", "variant",
                  "replicate", "E", "H", "data_seed", "perm_seed",
                  "sweep_seed", "num_permutations"):
        assert field in header
    assert (out / "contours_sensitivity.png").exists()


@pytest.mark.xfail(strict=True, reason=(
    "on the synthetic benchmark larger E wins clearly; the reference "
    "(E=0.5, H=2) is 60-75% below the best cell (see decisions ledger)"))
def test_sweep_eh_grid_reference_near_best(tmp_path):
    # same layout as the E/H study: signals 1-3, N=80, I in 0.2..0.4
    out = tmp_path / "out"
    assert main(["sweep", "--signals", "1,2,3", "--sample-sizes", "80",
                 "--intensities", "0.2,0.3,0.4", "--variants", "tfce",
                 "--e-values", "0.25,0.5,1", "--h-values", "1,2,3",
                 "--permutations", "200", "--replicates", "2",
                 "--out", str(out), "--quiet"]) == 0
    assert (out / "eh_sensitivity.png").exists()
    header, rows = mio.read_table(out / "tfce_best.csv")
    assert len(rows) == 3
    for row in rows:
        best = dict(zip(header, row))
        assert float(best["ref_relative_gap"]) <= 0.10, best


# -- global --------------------------------------------------------------


def test_global_noiseless(tmp_path):
    x = np.linspace(0, 2, 15)
    z = np.random.default_rng(0).standard_normal(15)
    mio.write_table(tmp_path / "d.csv", {"x": x, "z": z, "y": 3 + 2 * x})
    out = tmp_path / "out"
    assert main(["global", "--design", str(tmp_path / "d.csv"),
                 "--response", "y", "--interest", "x", "--nuisance", "z",
                 "--no-standardize", "--out", str(out), "--quiet"]) == 0
    header, rows = mio.read_table(out / "global.csv")
    row = dict(zip(header, rows[0]))
    assert float(row["beta"]) == pytest.approx(2.0, rel=1e-12)
    assert float(row["p"]) < 1e-12


def test_global_table_shape(tmp_path):
    rng = np.random.default_rng(1)
    n = 80
    cols = {f"rs{i}": rng.integers(0, 3, n) * 1.0 for i in range(6)}
    cols["age"] = rng.normal(50, 5, n)
    cols["lvm"] = rng.standard_normal(n) + 0.3 * cols["rs2"]
    mio.write_table(tmp_path / "d.csv", cols)
    out = tmp_path / "out"
    args = ["global", "--design", str(tmp_path / "d.csv"), "--response",
            "lvm", "--nuisance", "age", "--out", str(out), "--quiet"]
    for i in range(6):
        args += ["--interest", f"rs{i}"]
    assert main(args) == 0
    header, rows = mio.read_table(out / "global.csv")
    assert len(rows) == 6 and header[:2] == ["name", "beta"] and "p" in header
    assert [r[0] for r in rows] == [f"rs{i}" for i in range(6)]


def test_global_permuted_labels_uniform():
    rng = np.random.default_rng(2)
    n = 50
    age = rng.standard_normal(n)
    y = rng.standard_normal(n) + age
    x = rng.standard_normal(n)
    ps = []
    for _ in range(400):
        d = DesignMatrix.from_columns({"x": rng.permutation(x), "age": age},
                                      ["x"])
        ps.append(global_regression(d, y, ["x"])[0]["p"])
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_global_matches_mass_univariate():
    rng = np.random.default_rng(3)
    n = 30
    d = DesignMatrix.from_columns({"x": rng.standard_normal(n),
                                   "age": rng.standard_normal(n)}, ["x"])
    y = rng.standard_normal(n)
    row = global_regression(d, y, ["x"], standardize=False)[0]
    res = mass_univariate(d, y[:, None], "x")
    assert row["t"] == pytest.approx(res.tstat[0], rel=1e-12)
    assert row["p"] == pytest.approx(
        2 * stats.t.sf(abs(res.tstat[0]), n - 3), rel=1e-12)


# -- diagnose ------------------------------------------------------------


def test_diagnose(dataset, tmp_path, capsys):
    paths, _, _ = dataset()
    out = tmp_path / "out"
    assert main(["diagnose", "--design", paths["design"], "--phenotype",
                 paths["phenotype"], "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("diagnose\tcondition_number")
    assert {"collinearity.csv", "heteroscedasticity.csv",
            "design_summary.csv", "manifest.json"} <= set(os.listdir(out))
