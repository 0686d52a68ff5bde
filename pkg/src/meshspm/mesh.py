"""Triangle meshes: per-vertex areas, edge adjacency and thresholded clusters.

A vertex owns one third of the area of every triangle it belongs to, so the
vertex areas partition the surface exactly. Two vertices are neighbours when
they share a triangle edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import ValidationError

__all__ = [
    "TriangleMesh",
    "VertexCluster",
    "compute_vertex_areas",
    "build_adjacency",
    "thresholded_components",
    "graph_distance",
    "make_ventricle_mesh",
    "make_strip_mesh",
]


def _triangle_areas(vertices, triangles):
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def compute_vertex_areas(vertices, triangles):
    """Barycentric vertex areas (one third of each incident triangle).

    Parameters
    ----------
    vertices : array, shape (n_vertices, 3)
    triangles : int array, shape (n_triangles, 3)

    Returns
    -------
    area : array, shape (n_vertices,)
        Zero for vertices that belong to no triangle, and degenerate
        triangles contribute nothing.
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0:
        raise ValidationError("no triangles")
    if not np.all(np.isfinite(vertices)):
        raise ValidationError("invalid geometry")
    tri_area = _triangle_areas(vertices, triangles)
    area = np.zeros(len(vertices))
    third = tri_area / 3.0
    for corner in range(3):
        np.add.at(area, triangles[:, corner], third)
    return area


def build_adjacency(n_vertices, triangles):
    """Sorted, deduplicated neighbour lists from triangle edges."""
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    edges = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    edges = edges[edges[:, 0] != edges[:, 1]]
    edges = np.concatenate([edges, edges[:, ::-1]])
    adj = sparse.coo_matrix(
        (np.ones(len(edges), dtype=np.int8), (edges[:, 0], edges[:, 1])),
        shape=(n_vertices, n_vertices)).tocsr()
    adj.sum_duplicates()
    adj.sort_indices()
    return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].copy()
            for i in range(n_vertices)]


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh with lazily derived areas and adjacency.

    Parameters
    ----------
    vertices : array, shape (n_vertices, 3)
        Coordinates in mm.
    triangles : int array, shape (n_triangles, 3)
        Zero-based vertex indices.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0
                               or triangles.max() >= len(vertices)):
            raise ValidationError("triangle index out of range")
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @cached_property
    def vertex_area(self):
        area = compute_vertex_areas(self.vertices, self.triangles)
        area.setflags(write=False)
        return area

    @cached_property
    def total_area(self):
        return float(_triangle_areas(self.vertices, self.triangles).sum())

    @cached_property
    def neighbors(self):
        return build_adjacency(self.n_vertices, self.triangles)

    @cached_property
    def csr(self):
        """Adjacency as ``(indptr, indices)`` int64 arrays."""
        counts = np.array([len(nb) for nb in self.neighbors], dtype=np.int64)
        indptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        if self.n_vertices:
            indices = np.concatenate(self.neighbors).astype(np.int64)
        else:
            indices = np.zeros(0, dtype=np.int64)
        indptr.setflags(write=False)
        indices.setflags(write=False)
        return indptr, indices

    @cached_property
    def in_surface(self):
        """Vertices referenced by at least one triangle."""
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.triangles.ravel()] = True
        used.setflags(write=False)
        return used

    def adjacency_matrix(self):
        indptr, indices = self.csr
        return sparse.csr_matrix(
            (np.ones(len(indices), dtype=np.int8), indices, indptr),
            shape=(self.n_vertices, self.n_vertices))


@dataclass(frozen=True)
class VertexCluster:
    """Connected set of vertices and its summed vertex area."""

    vertex_ids: np.ndarray
    extent: float

    def __len__(self):
        return len(self.vertex_ids)


def thresholded_components(mesh, stat, h, direction="positive"):
    """Connected components of the vertices passing a threshold.

    Selects ``stat >= h`` (``direction="positive"``) or ``stat <= h``
    (``"negative"``). Vertices belonging to no triangle never join a
    cluster. Clusters are ordered by their smallest member index and the
    extent is the member areas summed in ascending index order.
    """
    stat = np.asarray(stat, dtype=float)
    if stat.shape != (mesh.n_vertices,):
        raise ValidationError(
            f"stat has {stat.size} values for {mesh.n_vertices} vertices")
    if not np.isfinite(h):
        raise ValidationError("threshold must be finite")
    if direction == "positive":
        active = stat >= h
    elif direction == "negative":
        active = stat <= h
    else:
        raise ValidationError(f"unknown direction {direction!r}")
    active &= mesh.in_surface
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return []
    sub = mesh.adjacency_matrix()[idx][:, idx]
    n_comp, labels = csgraph.connected_components(sub, directed=False)
    area = mesh.vertex_area
    clusters = []
    # idx is ascending, so the first occurrence of each label is its
    # smallest member
    _, first = np.unique(labels, return_index=True)
    for lab in labels[np.sort(first)]:
        members = idx[labels == lab]
        extent = 0.0
        for v in members:
            extent += area[v]
        clusters.append(VertexCluster(members, extent))
    return clusters


def graph_distance(mesh, sources):
    """Hop count from the nearest source vertex (``inf`` if unreachable)."""
    sources = np.asarray(sources)
    if sources.dtype == bool:
        sources = np.flatnonzero(sources)
    dist = np.full(mesh.n_vertices, np.inf)
    if len(sources) == 0:
        return dist
    adj = mesh.adjacency_matrix().astype(np.int32)
    frontier = np.zeros(mesh.n_vertices, dtype=bool)
    frontier[sources] = True
    step = 0
    while frontier.any():
        dist[frontier] = step
        reached = (adj @ frontier.astype(np.int32)) > 0
        frontier = reached & np.isinf(dist)
        step += 1
    return dist


def make_ventricle_mesh(n_rings=10, n_sectors=20, length=90.0, radius=30.0):
    """Truncated prolate half-ellipsoid, a stand-in for a ventricular shell.

    The apex is a single vertex, followed by ``n_rings`` rings of
    ``n_sectors`` vertices each, so the mesh has
    ``1 + n_rings * n_sectors`` vertices. The base ring is left open.
    """
    if n_rings < 1 or n_sectors < 3:
        raise ValidationError("need n_rings >= 1 and n_sectors >= 3")
    # polar angle from apex; stop short of the equator to leave a basal rim
    theta = np.linspace(0.0, 0.85 * np.pi / 2, n_rings + 1)[1:]
    phi = np.arange(n_sectors) * 2 * np.pi / n_sectors
    verts = [[0.0, 0.0, -length]]
    for r, th in enumerate(theta):
        # stagger alternate rings to avoid long thin triangles
        offset = 0.5 * (r % 2) * 2 * np.pi / n_sectors
        ph = phi + offset
        verts.extend(np.column_stack([
            radius * np.sin(th) * np.cos(ph),
            radius * np.sin(th) * np.sin(ph),
            np.full(n_sectors, -length * np.cos(th))]))
    tris = []
    for s in range(n_sectors):
        tris.append([0, 1 + s, 1 + (s + 1) % n_sectors])
    for r in range(n_rings - 1):
        lo = 1 + r * n_sectors
        hi = lo + n_sectors
        for s in range(n_sectors):
            s1 = (s + 1) % n_sectors
            if r % 2 == 0:
                tris.append([lo + s, hi + s, lo + s1])
                tris.append([lo + s1, hi + s, hi + s1])
            else:
                tris.append([lo + s, hi + s, hi + s1])
                tris.append([lo + s, hi + s1, lo + s1])
    return TriangleMesh(np.asarray(verts), np.asarray(tris))


def make_strip_mesh(n_vertices, width=1.0):
    """Zig-zag triangle strip on two rows; vertex ``i`` neighbours ``i±1, i±2``.

    Useful for hand-checkable cluster tests.
    """
    if n_vertices < 3:
        raise ValidationError("a strip needs at least 3 vertices")
    idx = np.arange(n_vertices)
    verts = np.column_stack([idx * width / 2, (idx % 2) * width,
                             np.zeros(n_vertices)])
    tris = np.column_stack([idx[:-2], idx[1:-1], idx[2:]])
    return TriangleMesh(verts, tris)
