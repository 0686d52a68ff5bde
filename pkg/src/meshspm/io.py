"""Reading and writing meshes, tables and run manifests.

Tables are UTF-8 CSV with a header row. Floats are written with ``repr`` so
they round-trip exactly and identical results give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputOutputError, ValidationError
from .glm import DesignMatrix, PhenotypeMatrix
from .mesh import TriangleMesh

__all__ = [
    "read_ply",
    "write_ply",
    "read_mesh_txt",
    "load_mesh",
    "read_table",
    "write_table",
    "read_design_csv",
    "read_phenotype_csv",
    "write_rows",
    "write_json",
    "sha256_file",
    "StagedOutput",
]

FORMAT_VERSION = 1


def _open_text(path):
    try:
        return open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc


def read_ply(path):
    """Read an ASCII PLY triangle mesh.

    Returns
    -------
    mesh : TriangleMesh
    properties : dict
        Extra per-vertex scalar properties by name.
    """
    with _open_text(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    elements = []
    fmt = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]),
                             "props": []})
        elif tok[0] == "property":
            if not elements:
                raise ValidationError(f"{path}: property before element")
            elements[-1]["props"].append(tok[1:])
        elif tok[0] == "end_header":
            break
    if fmt != "ascii":
        raise ValidationError(f"{path}: only ASCII PLY is supported")
    body = lines[i:]
    pos = 0
    vertices = None
    faces = None
    props = {}
    for el in elements:
        rows = body[pos:pos + el["count"]]
        pos += el["count"]
        if len(rows) < el["count"]:
            raise ValidationError(f"{path}: truncated {el['name']} data")
        if el["name"] == "vertex":
            names = [p[-1] for p in el["props"]]
            if any(p[0] == "list" for p in el["props"]):
                raise ValidationError(f"{path}: list vertex property")
            try:
                data = np.array([[float(x) for x in r.split()[:len(names)]]
                                 for r in rows]).reshape(-1, len(names))
            except ValueError as exc:
                raise ValidationError(f"{path}: bad vertex row") from exc
            for axis in "xyz":
                if axis not in names:
                    raise ValidationError(f"{path}: vertex lacks {axis}")
            vertices = data[:, [names.index(a) for a in "xyz"]]
            props = {n: data[:, j] for j, n in enumerate(names)
                     if n not in ("x", "y", "z")}
        elif el["name"] == "face":
            tris = []
            for r in rows:
                tok = r.split()
                if not tok or int(tok[0]) != 3:
                    raise ValidationError(
                        f"{path}: only triangular faces are supported")
                tris.append([int(t) for t in tok[1:4]])
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if vertices is None or faces is None:
        raise ValidationError(f"{path}: needs vertex and face elements")
    return TriangleMesh(vertices, faces), props


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def write_ply(path, mesh, vertex_properties=None):
    """Write an ASCII PLY with optional per-vertex scalar properties.

    Boolean and integer arrays become ``int`` properties, everything else
    ``double``.
    """
    vertex_properties = vertex_properties or {}
    cols = []
    header = ["ply", "format ascii 1.0", "comment meshspm",
              f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    for name, values in vertex_properties.items():
        values = np.asarray(values)
        kind = "int" if values.dtype.kind in "biu" else "double"
        header.append(f"property {kind} {name}")
        cols.append(values)
    header += [f"element face {len(mesh.triangles)}",
               "property list uchar int vertex_indices", "end_header"]
    out = ["\n".join(header)]
    for i in range(mesh.n_vertices):
        vals = [_fmt(float(v)) for v in mesh.vertices[i]]
        vals += [_fmt(c[i].item()) for c in cols]
        out.append(" ".join(vals))
    for tri in mesh.triangles:
        out.append("3 " + " ".join(str(int(v)) for v in tri))
    _write_text(path, "\n".join(out) + "\n")


def read_mesh_txt(vertices_path, faces_path):
    """Two-file text mesh: ``x y z`` per line and zero-based ``i j k``."""
    try:
        verts = np.loadtxt(vertices_path, ndmin=2)
        faces = np.loadtxt(faces_path, ndmin=2, dtype=np.int64)
    except OSError as exc:
        raise InputOutputError(str(exc)) from exc
    except ValueError as exc:
        raise ValidationError(f"malformed mesh text file: {exc}") from exc
    if verts.shape[1] != 3 or faces.shape[1] != 3:
        raise ValidationError("mesh text files need three columns")
    return TriangleMesh(verts, faces)


def load_mesh(path, faces=None):
    """PLY file, or a vertices/faces text pair when ``faces`` is given."""
    if faces is not None:
        return read_mesh_txt(path, faces)
    if str(path).lower().endswith(".ply"):
        return read_ply(path)[0]
    raise ValidationError(
        f"{path}: expected a .ply file or a vertices/faces text pair")


def read_table(path):
    """Header and string rows of a CSV file."""
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty table") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    for r in rows:
        if len(r) != len(header):
            raise ValidationError(
                f"{path}: row has {len(r)} fields, header has {len(header)}")
    return header, rows


def _numeric(path, header, rows, columns):
    out = {}
    for name in columns:
        j = header.index(name)
        try:
            out[name] = np.array([float(r[j]) for r in rows])
        except ValueError:
            raise ValidationError(
                f"{path}: column {name!r} is not numeric") from None
    return out


def read_design_csv(path, interest, nuisance=None, intercept=True,
                    id_column="subject_id"):
    """Design matrix from CSV; returns ``(DesignMatrix, subject_ids)``.

    ``nuisance=None`` uses every numeric column other than the ids and the
    interest columns.
    """
    header, rows = read_table(path)
    ids = ()
    if id_column in header:
        j = header.index(id_column)
        ids = tuple(r[j] for r in rows)
    available = [h for h in header if h != id_column]
    for name in list(interest) + list(nuisance or []):
        if name not in available:
            raise ValidationError(f"{path}: no design column {name!r}")
    if nuisance is None:
        nuisance = [h for h in available if h not in interest]
    cols = _numeric(path, header, rows, list(interest) + list(nuisance))
    design = DesignMatrix.from_columns(cols, list(interest), list(nuisance),
                                       intercept=intercept)
    return design, ids


def read_phenotype_csv(path, id_column="subject_id"):
    """Wide phenotype table: one row per subject, one column per vertex."""
    header, rows = read_table(path)
    ids = ()
    value_cols = list(range(len(header)))
    if id_column in header:
        j = header.index(id_column)
        ids = tuple(r[j] for r in rows)
        value_cols.remove(j)
    try:
        values = np.array([[float(r[j]) for j in value_cols] for r in rows])
    except ValueError:
        raise ValidationError(f"{path}: non-numeric phenotype value") \
            from None
    return PhenotypeMatrix(values.reshape(len(rows), len(value_cols)), ids)


def write_table(path, columns):
    """Write ``{name: sequence}`` as CSV (columns in dict order)."""
    names = list(columns)
    data = [np.asarray(columns[n]) if not isinstance(columns[n], list)
            else columns[n] for n in names]
    n = len(data[0]) if data else 0
    lines = [",".join(names)]
    for i in range(n):
        lines.append(",".join(_fmt(_item(d[i])) for d in data))
    _write_text(path, "\n".join(lines) + "\n")


def write_rows(path, rows, fields=None):
    """Write a list of dicts as CSV."""
    fields = fields or (list(rows[0]) if rows else [])
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(_fmt(_item(r.get(f))) for f in fields))
    _write_text(path, "\n".join(lines) + "\n")


def _item(x):
    return x.item() if isinstance(x, np.generic) else x


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path):
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


class StagedOutput:
    """Collects outputs in a scratch directory and publishes them at once.

    On success every staged file is moved into ``out_dir``. On failure the
    scratch directory is discarded and, if requested, a manifest marking
    the run as failed is written instead.
    """

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.stage = None

    def __enter__(self):
        parent = self.out_dir.resolve().parent
        try:
            parent.mkdir(parents=True, exist_ok=True)
            self.stage = Path(tempfile.mkdtemp(prefix=".meshspm-",
                                               dir=parent))
        except OSError as exc:
            raise InputOutputError(
                f"cannot create output directory: {exc}") from exc
        return self

    def path(self, name):
        return self.stage / name

    def files(self):
        return sorted(p.name for p in self.stage.iterdir() if p.is_file())

    def publish(self):
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for name in self.files():
                os.replace(self.stage / name, self.out_dir / name)
        except OSError as exc:
            raise InputOutputError(f"cannot publish outputs: {exc}") from exc

    def __exit__(self, exc_type, exc, tb):
        if self.stage is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
        return False
