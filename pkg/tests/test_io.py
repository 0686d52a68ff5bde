import numpy as np
import pytest

from meshspm import io as mio
from meshspm.errors import InputOutputError, ValidationError
from meshspm.mesh import make_ventricle_mesh


def test_ply_roundtrip(tmp_path):
    mesh = make_ventricle_mesh(4, 6)
    t = np.linspace(-1, 1, mesh.n_vertices) / 3
    mask = t > 0
    path = tmp_path / "m.ply"
    mio.write_ply(path, mesh, {"t": t, "significant": mask})
    back, props = mio.read_ply(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(props["t"], t)
    np.testing.assert_array_equal(props["significant"].astype(bool), mask)
    assert "property int significant" in path.read_text()


def test_ply_rejects_binary_and_quads(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(ValidationError, match="ASCII"):
        mio.read_ply(p)
    p.write_text("ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\n"
                 "property float y\nproperty float z\nelement face 1\n"
                 "property list uchar int vertex_indices\nend_header\n"
                 "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(ValidationError, match="triangular"):
        mio.read_ply(p)


def test_text_mesh(tmp_path):
    (tmp_path / "v.txt").write_text("0 0 0\n1 0 0\n0 1 0\n")
    (tmp_path / "f.txt").write_text("0 1 2\n")
    mesh = mio.load_mesh(tmp_path / "v.txt", tmp_path / "f.txt")
    assert mesh.n_vertices == 3
    with pytest.raises(ValidationError):
        mio.load_mesh(tmp_path / "v.txt")


def test_missing_file():
    with pytest.raises(InputOutputError):
        mio.read_table("/nonexistent/file.csv")


def test_table_roundtrip_exact(tmp_path):
    x = np.random.default_rng(0).standard_normal(10) * 1e-7
    mio.write_table(tmp_path / "a.csv", {"id": [f"s{i}" for i in range(10)],
                                         "x": x, "k": np.arange(10)})
    header, rows = mio.read_table(tmp_path / "a.csv")
    assert header == ["id", "x", "k"]
    np.testing.assert_array_equal([float(r[1]) for r in rows], x)


def test_design_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("subject_id,snp,age\na,0,50\nb,1,61\nc,2,55\nd,1,70\n")
    d, ids = mio.read_design_csv(p, ["snp"])
    assert ids == ("a", "b", "c", "d")
    assert d.column_names == ("intercept", "snp", "age")
    with pytest.raises(ValidationError, match="no design column"):
        mio.read_design_csv(p, ["bmi"])
    p.write_text("subject_id,snp,age\na,0,x\nb,1,61\n")
    with pytest.raises(ValidationError, match="not numeric"):
        mio.read_design_csv(p, ["snp"])
    p.write_text("subject_id,snp,age\na,0\n")
    with pytest.raises(ValidationError, match="fields"):
        mio.read_design_csv(p, ["snp"])


def test_phenotype_csv(tmp_path):
    p = tmp_path / "y.csv"
    p.write_text("subject_id,v0,v1\na,1.5,2\nb,3,4\n")
    Y = mio.read_phenotype_csv(p)
    np.testing.assert_array_equal(Y.values, [[1.5, 2], [3, 4]])
    assert Y.subject_ids == ("a", "b")


def test_staged_output_discards_on_error(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(RuntimeError):
        with mio.StagedOutput(out) as st:
            mio.write_table(st.path("x.csv"), {"a": [1]})
            raise RuntimeError("boom")
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir()]
