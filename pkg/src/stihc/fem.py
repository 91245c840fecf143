"""Linear finite-element matrices and the squared-Laplacian roughness penalty.

Piecewise-linear elements have zero Laplacian inside every triangle, so the
roughness functional is discretised in mixed form:

    P = L^T R0^{-1} L + kappa * R1

R0 is the mass matrix and R1 the stiffness matrix.  With ``boundary="free"``
(the default) L = R1 - B, where B carries the boundary flux of each hull
element, so ``R0^{-1} L c`` is a consistent estimate of -Laplacian(f) up to
the boundary and no boundary condition is imposed on f.  With
``boundary="neumann"`` L = R1, which additionally penalises outward flux.

The free operator annihilates linear fields; the small gradient term
kappa * R1 (kappa = h^2 / D^4, h the mean edge length, D the hull diameter)
restricts the null space to constants and vanishes under refinement.
For a nodal coefficient vector c, ``c @ P @ c`` approximates the integral of
(Laplacian f)^2 over the domain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, splu

from .errors import DegenerateTriangle, SingularMass

# penalties up to this many nodes are materialised as dense arrays
DENSE_LIMIT = 6000

_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0


@dataclass(frozen=True, eq=False)
class PenaltyMatrices:
    mass: sp.csc_matrix
    stiffness: sp.csc_matrix
    penalty: object  # dense ndarray, or a LinearOperator above DENSE_LIMIT
    laplacian: sp.csc_matrix = None
    kappa: float = 0.0


def _element_geometry(mesh):
    nodes = mesh.nodes
    tri = mesh.triangles
    area = mesh.areas
    total = np.abs(area).sum()
    bad = np.abs(area) < 1e-12 * total
    if bad.any():
        t = int(np.argmax(bad))
        raise DegenerateTriangle(f"triangle {t} {tri[t].tolist()} has area {area[t]:.3g}")
    return nodes, tri, area


def _scatter(tri, local, K):
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    m = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(K, K)).tocsc()
    m.sum_duplicates()
    return m


def local_mass(area):
    return np.asarray(area)[..., None, None] * _MASS_REF


def _barycentric_gradients(p0, p1, p2):
    p0, p1, p2 = (np.atleast_2d(p) for p in (p0, p1, p2))
    d1 = p1 - p0
    d2 = p2 - p0
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    # (y_b - y_c, x_c - x_b) / 2A, cyclically
    gx = np.stack([p1[:, 1] - p2[:, 1], p2[:, 1] - p0[:, 1], p0[:, 1] - p1[:, 1]], axis=1)
    gy = np.stack([p2[:, 0] - p1[:, 0], p0[:, 0] - p2[:, 0], p1[:, 0] - p0[:, 0]], axis=1)
    return gx / area2[:, None], gy / area2[:, None]


def local_stiffness(p0, p1, p2):
    """Element stiffness blocks A * grad(phi_a) . grad(phi_b) for (ccw) triangles."""
    p0, p1, p2 = (np.atleast_2d(p) for p in (p0, p1, p2))
    d1 = p1 - p0
    d2 = p2 - p0
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    gx, gy = _barycentric_gradients(p0, p1, p2)
    return 0.5 * area2[:, None, None] * (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :])


def assemble_mass(mesh):
    _, tri, area = _element_geometry(mesh)
    return _scatter(tri, local_mass(area), mesh.K)


def assemble_stiffness(mesh):
    nodes, tri, _ = _element_geometry(mesh)
    local = local_stiffness(nodes[tri[:, 0]], nodes[tri[:, 1]], nodes[tri[:, 2]])
    return _scatter(tri, local, mesh.K)


def assemble_boundary_flux(mesh):
    """B[i, j] = integral over hull edges of phi_i * (grad phi_j . n).

    The gradient is the constant gradient of the single element owning each
    hull edge.
    """
    nodes, tri, _ = _element_geometry(mesh)
    gx, gy = _barycentric_gradients(nodes[tri[:, 0]], nodes[tri[:, 1]], nodes[tri[:, 2]])
    t, k = np.nonzero(mesh.neighbors < 0)
    a = tri[t, (k + 1) % 3]
    b = tri[t, (k + 2) % 3]
    e = nodes[b] - nodes[a]
    length = np.hypot(e[:, 0], e[:, 1])
    # ccw triangles: outward normal of edge a->b is (dy, -dx) / |e|
    nx = e[:, 1] / length
    ny = -e[:, 0] / length
    dn = gx[t] * nx[:, None] + gy[t] * ny[:, None]  # (E, 3)
    w = 0.5 * length[:, None] * dn
    rows = np.concatenate([np.repeat(a, 3), np.repeat(b, 3)])
    cols = np.concatenate([tri[t].ravel(), tri[t].ravel()])
    vals = np.concatenate([w.ravel(), w.ravel()])
    m = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.K, mesh.K)).tocsc()
    m.sum_duplicates()
    return m


def stabilization_weight(mesh):
    e = mesh.edges
    d = mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]]
    h = np.mean(np.hypot(d[:, 0], d[:, 1]))
    span = mesh.nodes.max(axis=0) - mesh.nodes.min(axis=0)
    diam = float(np.hypot(*span))
    return float(h**2 / diam**4)


def assemble_penalty(R0, R1, dense_limit=DENSE_LIMIT, laplacian=None, kappa=0.0):
    """Mixed-form penalty ``L^T R0^{-1} L + kappa R1`` with L defaulting to R1."""
    K = R0.shape[0]
    try:
        lu = splu(sp.csc_matrix(R0))
    except RuntimeError as exc:
        raise SingularMass(f"mass matrix factorization failed: {exc}") from exc
    diag = lu.U.diagonal()
    if not np.all(np.isfinite(diag)) or np.any(np.abs(diag) <= 1e-300):
        raise SingularMass("mass matrix is singular")
    R1 = sp.csc_matrix(R1)
    L = R1 if laplacian is None else sp.csc_matrix(laplacian)
    Lt = sp.csc_matrix(L.T)

    if K <= dense_limit:
        P = np.asarray(Lt @ lu.solve(L.toarray()))
        if kappa:
            P = P + kappa * R1.toarray()
        return 0.5 * (P + P.T)

    def matvec(v):
        v = np.asarray(v, dtype=float).ravel()
        out = Lt @ lu.solve(L @ v)
        if kappa:
            out = out + kappa * (R1 @ v)
        return out

    return LinearOperator((K, K), matvec=matvec, rmatvec=matvec, dtype=float)


BOUNDARY_MODES = ("free", "neumann")


def assemble(mesh, boundary="free", dense_limit=DENSE_LIMIT) -> PenaltyMatrices:
    if boundary not in BOUNDARY_MODES:
        raise ValueError(f"boundary must be one of {BOUNDARY_MODES}, got {boundary!r}")
    R0 = assemble_mass(mesh)
    R1 = assemble_stiffness(mesh)
    if boundary == "neumann":
        return PenaltyMatrices(R0, R1, assemble_penalty(R0, R1, dense_limit), R1, 0.0)
    L = sp.csc_matrix(R1 - assemble_boundary_flux(mesh))
    kappa = stabilization_weight(mesh)
    P = assemble_penalty(R0, R1, dense_limit, laplacian=L, kappa=kappa)
    return PenaltyMatrices(R0, R1, P, L, kappa)


def write_matrix_market(path, matrix):
    """Debug dump in MatrixMarket coordinate format."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(matrix), precision=17)
