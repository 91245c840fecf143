"""Delaunay triangulation of spot locations and the linear FEM basis.

Mesh nodes are the spot coordinates themselves, so the basis evaluated at
the spots is the identity.  Off-node evaluation (point location plus
barycentric weights) is used for rendering smoothed surfaces.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import CollinearInput, DuplicatePoint, InputError

# relative tolerance for cocircularity / Delaunay checks
CIRCLE_RTOL = 1e-9
# barycentric slack accepted as "inside"
BARY_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class SpotGrid:
    spot_ids: tuple
    coords: np.ndarray

    def __post_init__(self):
        ids = tuple(str(s) for s in self.spot_ids)
        coords = np.array(self.coords, dtype=float, copy=True)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InputError(f"coords must be an (n, 2) array, got shape {coords.shape}")
        if len(ids) != len(coords):
            raise InputError(f"{len(ids)} spot ids but {len(coords)} coordinates")
        if len(ids) < 3:
            raise InputError(f"need at least 3 spots, got {len(ids)}")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(s for s in ids if s in seen or seen.add(s))
            raise InputError(f"duplicate spot id {dup!r}")
        if not np.all(np.isfinite(coords)):
            raise InputError("non-finite spot coordinate")
        _check_duplicates(coords, ids)
        coords.setflags(write=False)
        object.__setattr__(self, "spot_ids", ids)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self):
        return len(self.spot_ids)

    def subset(self, index):
        index = np.asarray(index)
        return SpotGrid(tuple(self.spot_ids[i] for i in index), self.coords[index])


def _check_duplicates(coords, ids=None):
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    s = coords[order]
    same = np.all(s[1:] == s[:-1], axis=1)
    if same.any():
        k = int(np.argmax(same))
        a, b = int(order[k]), int(order[k + 1])
        a, b = min(a, b), max(a, b)
        if ids is not None:
            name = f"spots {ids[a]!r} and {ids[b]!r}"
        else:
            name = f"points {a} and {b}"
        raise DuplicatePoint(f"{name} share coordinates {tuple(coords[a])}")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulated domain.  ``triangles`` are counterclockwise node triples."""

    nodes: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float, copy=True)
        tris = np.array(self.triangles, dtype=np.int64, copy=True)
        nodes.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)

    @property
    def K(self):
        return len(self.nodes)

    @cached_property
    def areas(self):
        return signed_areas(self.nodes, self.triangles)

    @cached_property
    def edges(self):
        """Unique undirected edges as sorted (a, b) pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def neighbors(self):
        """``neighbors[t, k]`` is the triangle across the edge opposite vertex k, or -1."""
        return _triangle_neighbors(self.triangles)

    @cached_property
    def vertex_triangles(self):
        """For each node, the sorted indices of its incident triangles."""
        out = [[] for _ in range(self.K)]
        for ti, tri in enumerate(self.triangles.tolist()):
            for v in tri:
                out[v].append(ti)
        return tuple(np.array(v, dtype=np.int64) for v in out)

    @cached_property
    def _kdtree(self):
        return cKDTree(self.nodes)

    def is_connected(self):
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        e = self.edges
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.K, self.K))
        ncomp, _ = connected_components(adj, directed=False)
        return ncomp == 1


def signed_areas(nodes, triangles):
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _triangle_neighbors(triangles):
    T = len(triangles)
    nbr = np.full((T, 3), -1, dtype=np.int64)
    # edge opposite vertex k of triangle t
    owner = {}
    for t, (a, b, c) in enumerate(triangles.tolist()):
        for k, (u, v) in enumerate(((b, c), (c, a), (a, b))):
            key = (u, v) if u < v else (v, u)
            other = owner.pop(key, None)
            if other is None:
                owner[key] = (t, k)
            else:
                t2, k2 = other
                nbr[t, k] = t2
                nbr[t2, k2] = t
    return nbr


def circumcircle(a, b, c):
    """Circumcenter and radius of the triangle (a, b, c)."""
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    r = np.hypot(ax - ux, ay - uy)
    return np.array([ux, uy]), r


def _incircle_state(nodes, tri, p):
    """+1 strictly inside circumcircle of ``tri``, 0 cocircular, -1 outside."""
    center, r = circumcircle(*nodes[list(tri)])
    dist = np.hypot(*(nodes[p] - center))
    if dist < r * (1.0 - CIRCLE_RTOL):
        return 1
    if dist > r * (1.0 + CIRCLE_RTOL):
        return -1
    return 0


def build_delaunay(grid) -> Mesh:
    """Delaunay triangulation of the spot coordinates (nodes = spots).

    Qhull produces the Delaunay subdivision; cells whose vertices are
    cocircular (e.g. the squares of a regular grid) are then re-triangulated
    as a fan from their lowest-index vertex, and triangles are put in a
    canonical order.  The result depends only on the input coordinates and
    their order.
    """
    pts = grid.coords if isinstance(grid, SpotGrid) else np.asarray(grid, dtype=float)
    n = len(pts)
    if n < 3:
        raise InputError(f"need at least 3 points, got {n}")
    _check_duplicates(pts)
    centered = pts - pts.mean(axis=0)
    scale = np.abs(centered).max()
    sv = np.linalg.svd(centered / scale, compute_uv=False)
    if sv[1] <= 1e-12 * sv[0] * np.sqrt(n):
        raise CollinearInput("all points lie on a line")

    tri = Delaunay(pts).simplices.astype(np.int64)
    area = signed_areas(pts, tri)
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    area = np.abs(area)
    total = area.sum()
    tri = tri[area > 1e-14 * total]

    tri = _refan_cocircular_cells(pts, tri)
    tri = _canonical_order(tri)
    return Mesh(pts, tri)


def _refan_cocircular_cells(pts, tri):
    nbr = _triangle_neighbors(tri)
    T = len(tri)
    parent = list(range(T))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    any_merge = False
    for t in range(T):
        for k in range(3):
            u = nbr[t, k]
            if u <= t:
                continue
            # vertex of u not on the shared edge
            shared = set(tri[t].tolist())
            far = [v for v in tri[u].tolist() if v not in shared][0]
            if _incircle_state(pts, tri[t], far) == 0:
                a, b = find(t), find(u)
                if a != b:
                    parent[max(a, b)] = min(a, b)
                    any_merge = True
    if not any_merge:
        return tri

    groups = {}
    for t in range(T):
        groups.setdefault(find(t), []).append(t)
    out = []
    for members in groups.values():
        if len(members) == 1:
            out.append(tri[members[0]])
            continue
        verts = np.unique(tri[members])
        c = pts[verts].mean(axis=0)
        ang = np.arctan2(pts[verts, 1] - c[1], pts[verts, 0] - c[0])
        ring = verts[np.argsort(ang, kind="stable")].tolist()
        s = ring.index(min(ring))
        ring = ring[s:] + ring[:s]
        for i in range(1, len(ring) - 1):
            out.append([ring[0], ring[i], ring[i + 1]])
    return np.array(out, dtype=np.int64)


def _canonical_order(tri):
    tri = np.asarray(tri, dtype=np.int64)
    # rotate each (ccw) triple so its smallest index comes first
    shift = np.argmin(tri, axis=1)
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    tri = np.take_along_axis(tri, idx, axis=1)
    order = np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))
    return tri[order]


def is_delaunay(mesh, rtol=CIRCLE_RTOL):
    """Exhaustive empty-circumcircle check (O(T * K)); for tests on small meshes."""
    nodes = mesh.nodes
    for tri in mesh.triangles:
        center, r = circumcircle(*nodes[tri])
        d = np.hypot(nodes[:, 0] - center[0], nodes[:, 1] - center[1])
        d[tri] = np.inf
        if np.any(d < r * (1.0 - rtol)):
            return False
    return True


def _barycentric(nodes, tri, p):
    a, b, c = nodes[tri[..., 0]], nodes[tri[..., 1]], nodes[tri[..., 2]]
    v0 = b - a
    v1 = c - a
    v2 = p - a
    den = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]
    l1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / den
    l2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / den
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def _clean_bary(lam):
    lam = np.clip(lam, 0.0, 1.0)
    return lam / lam.sum(axis=-1, keepdims=True)


def locate_point(mesh, p):
    """Return ``(triangle index, barycentric coordinates)`` or ``None`` when p is outside."""
    tri, bary = locate_points(mesh, np.asarray(p, dtype=float)[None, :])
    if tri[0] < 0:
        return None
    return int(tri[0]), bary[0]


def locate_points(mesh, points):
    """Vectorised point location.

    Returns ``(tri, bary)``; ``tri[j] == -1`` marks a point outside the hull
    (its barycentric row is zero).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = len(points)
    nodes = mesh.nodes
    tris = mesh.triangles
    out_tri = np.full(m, -1, dtype=np.int64)
    out_bary = np.zeros((m, 3))
    if m == 0:
        return out_tri, out_bary

    _, nearest = mesh._kdtree.query(points)
    vt = mesh.vertex_triangles
    maxdeg = max(len(v) for v in vt)
    cand = np.full((mesh.K, maxdeg), -1, dtype=np.int64)
    for v, ts in enumerate(vt):
        cand[v, : len(ts)] = ts

    # first pass: triangles incident to the nearest node
    c = cand[nearest]
    valid = c >= 0
    lam = _barycentric(nodes, tris[np.where(valid, c, 0)], points[:, None, :])
    inside = valid & np.all(lam >= -BARY_EPS, axis=-1)
    hit = inside.any(axis=1)
    first = np.argmax(inside, axis=1)
    rows = np.nonzero(hit)[0]
    out_tri[rows] = c[rows, first[rows]]
    out_bary[rows] = _clean_bary(lam[rows, first[rows]])

    # remaining points: visibility walk from the first candidate
    nbr = mesh.neighbors
    T = len(tris)
    for j in np.nonzero(~hit)[0]:
        t = int(c[j, 0])
        p = points[j]
        for _ in range(T + 1):
            lj = _barycentric(nodes, tris[t], p)
            k = int(np.argmin(lj))
            if lj[k] >= -BARY_EPS:
                out_tri[j] = t
                out_bary[j] = _clean_bary(lj)
                break
            nxt = int(nbr[t, k])
            if nxt < 0:
                # crossed a hull edge: outside the convex domain
                break
            t = nxt
        else:  # pragma: no cover - walk cannot cycle on a Delaunay mesh
            lam_all = _barycentric(nodes, tris, p[None, :])
            ok = np.nonzero(np.all(lam_all >= -BARY_EPS, axis=1))[0]
            if len(ok):
                out_tri[j] = ok[0]
                out_bary[j] = _clean_bary(lam_all[ok[0]])
    return out_tri, out_bary


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """Dense basis evaluation; ``values[j, i] = phi_i(points[j])``."""

    values: np.ndarray
    outside: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


def evaluate_basis(mesh, points) -> BasisMatrix:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri, bary = locate_points(mesh, points)
    phi = np.zeros((len(points), mesh.K))
    ok = tri >= 0
    rows = np.nonzero(ok)[0]
    for k in range(3):
        np.add.at(phi, (rows, mesh.triangles[tri[rows], k]), bary[rows, k])
    return BasisMatrix(phi, ~ok)


def interpolate(mesh, nodal_values, points):
    """Evaluate the piecewise-linear field with the given nodal values.

    Points outside the hull get NaN.
    """
    nodal_values = np.asarray(nodal_values, dtype=float)
    tri, bary = locate_points(mesh, points)
    out = np.full(len(tri), np.nan)
    ok = tri >= 0
    verts = mesh.triangles[tri[ok]]
    out[ok] = np.sum(nodal_values[verts] * bary[ok], axis=1)
    return out
