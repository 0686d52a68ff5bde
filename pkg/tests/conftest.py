import numpy as np
import pytest

from meshspm import io as mio
from meshspm.mesh import make_ventricle_mesh
from meshspm.synth import (SyntheticSignalSpec, inject_signal, make_beta_map,
                           make_cohort)


def write_dataset(folder, n_subjects=60, intensity=0.0, coverage=0.1,
                  seed=0, mesh=None, extra=None):
    """Synthetic cohort on disk: ``mesh.ply``, ``design.csv`` and
    ``pheno.csv``. Returns the paths and the true signal support."""
    folder.mkdir(parents=True, exist_ok=True)
    mesh = mesh or make_ventricle_mesh(10, 20)
    c = make_cohort(n_subjects, mesh, seed=seed)
    beta = make_beta_map(mesh, coverage, 1.0, seed=seed + 1)
    Y = inject_signal(c.Y, SyntheticSignalSpec(beta, intensity, c.snp))
    ids = [f"s{i:03d}" for i in range(n_subjects)]
    cols = {"subject_id": ids, "snp": c.snp, "age": c.age, "sex": c.sex}
    cols.update(extra or {})
    paths = {"mesh": folder / "mesh.ply", "design": folder / "design.csv",
             "phenotype": folder / "pheno.csv"}
    mio.write_ply(paths["mesh"], mesh)
    mio.write_table(paths["design"], cols)
    ph = {"subject_id": ids}
    ph.update({f"v{j}": Y[:, j] for j in range(Y.shape[1])})
    mio.write_table(paths["phenotype"], ph)
    return {k: str(v) for k, v in paths.items()}, beta != 0, mesh


@pytest.fixture
def dataset(tmp_path):
    return lambda **kw: write_dataset(tmp_path / "data", **kw)
