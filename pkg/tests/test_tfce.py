import numpy as np
import pytest

import oracles
from meshspm.errors import ValidationError
from meshspm.mesh import TriangleMesh, make_strip_mesh, make_ventricle_mesh
from meshspm.tfce import (TfceParams, max_cluster_extent, mesh_arrays,
                          tfce_transform, threshold_grid)


def _naive(mesh, t, params):
    nb = [list(x) for x in mesh.neighbors]
    return oracles.tfce(t, mesh.vertex_area, nb, mesh.in_surface,
                        params.num_steps, params.E, params.H,
                        params.min_cluster_vertices)


def test_threshold_grid():
    grid, dh = threshold_grid(3.0, 4)
    assert dh == 0.75
    np.testing.assert_array_equal(grid, [0.75, 1.5, 2.25, 3.0])
    grid, dh = threshold_grid(0.7, 3)
    assert grid[-1] == 0.7 and grid[0] > 0


def test_zero_map_scores_zero():
    mesh = make_ventricle_mesh(5, 8)
    res = tfce_transform(mesh, np.zeros(mesh.n_vertices))
    np.testing.assert_array_equal(res.scores, 0)


def test_isolated_peak_scores_zero():
    mesh = make_ventricle_mesh(10, 20)
    t = np.zeros(mesh.n_vertices)
    t[57] = 5.0
    res = tfce_transform(mesh, t)
    np.testing.assert_array_equal(res.scores, 0)


def test_two_vertex_cluster_scores_zero_three_scores():
    mesh = make_strip_mesh(10)
    t = np.zeros(10)
    t[[2, 3]] = 4.0
    assert not tfce_transform(mesh, t).scores.any()
    t[4] = 4.0
    assert (tfce_transform(mesh, t).scores[[2, 3, 4]] > 0).all()


def test_uniform_map_closed_form():
    mesh = make_ventricle_mesh(6, 10)
    c, K = 2.0, 20
    params = TfceParams(0.5, 2.0, K, 3)
    res = tfce_transform(mesh, np.full(mesh.n_vertices, c), params)
    grid, dh = threshold_grid(c, K)
    A = 0.0
    for a in mesh.vertex_area:
        A += a
    expected = 0.0
    for h in grid:
        expected += A ** 0.5 * h ** 2.0 * dh
    np.testing.assert_array_equal(res.scores, expected)
    np.testing.assert_array_equal(res.scores, _naive(
        mesh, np.full(mesh.n_vertices, c), params))


@pytest.mark.parametrize("seed", range(6))
def test_matches_naive_oracle_bitwise(seed):
    rng = np.random.default_rng(100 + seed)
    v, tri = oracles.random_mesh(rng, 150)
    mesh = TriangleMesh(v, tri)
    params = TfceParams(float(rng.choice([0.5, 1.0, 0.25])),
                        float(rng.choice([2.0, 1.5])),
                        int(rng.integers(3, 15)), int(rng.integers(1, 4)))
    t = rng.standard_normal(mesh.n_vertices) * 2 + rng.normal()
    got = tfce_transform(mesh, t, params).scores
    np.testing.assert_array_equal(got, _naive(mesh, t, params))


def test_signed_and_antisymmetric():
    rng = np.random.default_rng(1)
    mesh = make_ventricle_mesh(8, 12)
    t = rng.standard_normal(mesh.n_vertices) * 2
    s = tfce_transform(mesh, t).scores
    np.testing.assert_array_equal(tfce_transform(mesh, -t).scores, -s)
    assert np.all(s[t < 0] <= 0) and np.all(s[t > 0] >= 0)


def test_isolated_vertex_never_scores():
    v = np.vstack([make_strip_mesh(10).vertices, [[50, 50, 50]]])
    mesh = TriangleMesh(v, make_strip_mesh(10).triangles)
    t = np.full(11, 3.0)
    t[10] = 100.0
    s = tfce_transform(mesh, t, TfceParams(min_cluster_vertices=1)).scores
    assert s[10] == 0 and (s[:10] > 0).all()


def test_monotone_in_height():
    rng = np.random.default_rng(4)
    mesh = make_ventricle_mesh(8, 12)
    t = np.abs(rng.standard_normal(mesh.n_vertices)) * 2
    params = TfceParams(num_steps=50)
    base = tfce_transform(mesh, t, params).scores
    # raise a vertex that is not the maximum so the grid is unchanged
    j = int(np.argsort(t)[len(t) // 2])
    t2 = t.copy()
    t2[j] = min(t.max(), t[j] + 0.5)
    raised = tfce_transform(mesh, t2, params).scores
    assert np.all(raised >= base)


def test_support_control():
    mesh = make_strip_mesh(20)
    t = np.zeros(20)
    t[[3, 4, 5, 6]] = 3.0
    s = tfce_transform(mesh, t).scores
    far = [v for v in range(20) if v not in (1, 2, 3, 4, 5, 6, 7, 8)]
    assert not s[far].any()


def test_validation():
    mesh = make_strip_mesh(10)
    with pytest.raises(ValidationError):
        tfce_transform(mesh, np.zeros(9))
    with pytest.raises(ValidationError):
        tfce_transform(mesh, np.full(10, np.nan))
    with pytest.raises(ValidationError):
        TfceParams(E=-1)
    with pytest.raises(ValidationError):
        TfceParams(num_steps=0)


def test_max_cluster_extent_both_signs():
    mesh = make_strip_mesh(12)
    t = np.zeros(12)
    t[[0, 1]] = 3
    t[[6, 7, 8, 9]] = -3
    arrays = mesh_arrays(mesh)
    assert max_cluster_extent(arrays, t, 1.0) == pytest.approx(
        mesh.vertex_area[6:10].sum())
