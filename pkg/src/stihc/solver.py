"""Penalized IRLS fits of per-gene spatial fields and unified-lambda GCV selection.

Each gene's field is ``eta = Phi @ c`` with a canonical link.  For fixed
lambda the coefficients minimise

    deviance(y, g^{-1}(Phi c)) + lam * c^T P c

whose stationarity condition is the IRLS fixed point
``Phi^T W (z - Phi c) = lam * P c``.  A single lambda is chosen for the whole
gene set by minimising the summed GCV score ``n * D / (n - edf)^2``.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    GeneFitError,
    InputError,
    InvalidResponse,
    NonFiniteResponse,
    NumericalError,
    SaturatedFit,
    SingularSystem,
    StihcError,
    StihcWarning,
)

ETA_MAX = 700.0


@dataclass(frozen=True)
class Family:
    """Exponential family with its canonical link."""

    name: str

    def link(self, mu):
        if self.name == "poisson":
            return np.log(mu)
        return np.asarray(mu, dtype=float)

    def linkinv(self, eta):
        if self.name == "poisson":
            return np.exp(np.minimum(eta, ETA_MAX))
        return np.asarray(eta, dtype=float)

    def variance(self, mu):
        if self.name == "poisson":
            return np.asarray(mu, dtype=float)
        return np.ones_like(mu, dtype=float)

    def deviance(self, y, mu):
        if self.name == "poisson":
            with np.errstate(divide="ignore", invalid="ignore"):
                term = np.where(y > 0, y * np.log(y / mu), 0.0)
            return float(2.0 * np.sum(term - (y - mu)))
        r = y - mu
        return float(r @ r)

    def initial_mu(self, y):
        if self.name == "poisson":
            return y + 0.5
        return np.array(y, dtype=float)

    def validate(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise NonFiniteResponse("response contains NaN or infinite values")
        if self.name == "poisson":
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise InvalidResponse("poisson family needs nonnegative integer counts")
            if not np.any(y > 0):
                raise InvalidResponse("poisson family needs at least one positive count")
        return y


POISSON = Family("poisson")
GAUSSIAN = Family("gaussian")
FAMILIES = {"poisson": POISSON, "gaussian": GAUSSIAN}


def get_family(family):
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[str(family).lower()]
    except KeyError:
        raise InputError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None


@dataclass(frozen=True, eq=False)
class FitResult:
    coefficients: np.ndarray
    fitted_means: np.ndarray
    deviance: float
    edf: float
    gcv: float
    iterations: int
    converged: bool
    lam: float
    penalized_deviance: float
    history: tuple = ()


@dataclass(frozen=True, eq=False)
class LambdaSelection:
    grid: np.ndarray
    per_gene_gcv: np.ndarray
    total_gcv: np.ndarray
    lambda_opt: float
    index_opt: int
    per_gene_edf: np.ndarray
    per_gene_deviance: np.ndarray
    eligible: np.ndarray
    converged: np.ndarray = field(default=None)


def _as_phi(phi):
    if phi is None:
        return None
    values = getattr(phi, "values", phi)
    return np.asarray(values, dtype=float)


def _as_dense_penalty(P):
    if isinstance(P, Penalty):
        return P.matrix
    if isinstance(P, np.ndarray):
        return P
    penalty = getattr(P, "penalty", None)
    if isinstance(penalty, np.ndarray):
        return penalty
    raise NumericalError(
        "penalty is not materialised as a dense matrix (mesh too large for exact fitting)"
    )


def _factor(A):
    try:
        cf = sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"penalized system is not positive definite: {exc}") from exc
    d = np.abs(np.diag(cf[0]))
    if not np.all(np.isfinite(d)) or d.min() <= 1e-13 * d.max():
        raise SingularSystem("penalized system is numerically singular")
    return cf


class Penalty:
    """Dense penalty with its constant null vector deflated exactly.

    A Householder reflector H maps the normalised constant vector to e_1, so
    ``H P H`` has (up to rounding, which is discarded) a zero first row and
    column.  Solving ``(B + lam P) c = r`` in reflected coordinates treats the
    constant mode through a scalar Schur complement, which stays accurate
    when lam * ||P|| dwarfs B (the lam -> infinity limit is the weighted mean).
    Penalties that do not annihilate constants are used as given.
    """

    def __init__(self, P):
        if isinstance(P, Penalty):
            P = P.matrix
        P = _as_dense_penalty(P)
        P = np.asarray(P, dtype=float)
        K = P.shape[0]
        self.matrix = P
        self.K = K
        u = np.full(K, 1.0 / math.sqrt(K))
        scale = max(np.abs(P).max(), 1e-300)
        self.deflate = K > 1 and np.abs(P @ u).max() <= 1e-9 * scale
        if self.deflate:
            v = u.copy()
            v[0] -= 1.0
            self._v = v
            self._vv = float(v @ v)
            Ph = self.reflect(P)
            Ph[0, :] = 0.0
            Ph[:, 0] = 0.0
            self.reflected = 0.5 * (Ph + Ph.T)
        else:
            self.reflected = P

    def reflect(self, X):
        """H X (vectors) or H X H (square matrices)."""
        if not self.deflate:
            return X
        v, vv = self._v, self._vv
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return X - v * (2.0 * (v @ X) / vv)
        HX = X - np.outer(v, (2.0 / vv) * (v @ X))
        if X.shape == (self.K, self.K):
            return HX - np.outer(HX @ v, (2.0 / vv) * v)
        return HX

    def reflect_rows(self, X):
        """H applied to the leading axis only (e.g. a K x m right-hand side)."""
        if not self.deflate:
            return X
        v, vv = self._v, self._vv
        return X - np.outer(v, (2.0 / vv) * (v @ X))

    def quad(self, c):
        """c^T P c, with the constant component of c excluded exactly."""
        if not self.deflate:
            return float(c @ self.matrix @ c)
        ch = self.reflect(np.asarray(c, dtype=float))[1:]
        return max(float(ch @ self.reflected[1:, 1:] @ ch), 0.0)

    def system(self, B, lam):
        return _PenalizedSystem(self, B, lam)


class _PenalizedSystem:
    """Factorisation of ``B + lam P`` for a Penalty."""

    def __init__(self, penalty, B, lam):
        self.penalty = penalty
        B = np.asarray(B, dtype=float)
        if not penalty.deflate:
            self.cf = _factor(B + lam * penalty.matrix)
            return
        A = penalty.reflect(B) + lam * penalty.reflected
        A = 0.5 * (A + A.T)
        self.A = A
        if penalty.K == 1:
            self.cf = None
            self.s = A[0, 0]
            return
        self.cf = _factor(A[1:, 1:])
        t = sla.cho_solve(self.cf, A[1:, 0], check_finite=False)
        s = A[0, 0] - A[0, 1:] @ t
        if not s > 1e-13 * max(abs(A[0, 0]), 1e-300):
            raise SingularSystem("penalized system is singular along the constant mode")
        self.t = t
        self.s = s

    def solve(self, r):
        p = self.penalty
        r = np.asarray(r, dtype=float)
        if not p.deflate:
            return sla.cho_solve(self.cf, r, check_finite=False)
        rh = p.reflect_rows(r) if r.ndim == 2 else p.reflect(r)
        if p.K == 1:
            return rh / self.s
        A = self.A
        y1 = sla.cho_solve(self.cf, rh[1:], check_finite=False)
        a = (rh[0] - A[0, 1:] @ y1) / self.s
        b = y1 - np.multiply.outer(self.t, a) if rh.ndim == 2 else y1 - self.t * a
        ch = np.concatenate([np.atleast_1d(a)[None, :] if rh.ndim == 2 else [a], b])
        return p.reflect_rows(ch) if rh.ndim == 2 else p.reflect(ch)

    def trace_solve(self, B):
        """trace((B_sys)^{-1} B) for a symmetric K x K matrix B."""
        return float(np.trace(self.solve(np.asarray(B, dtype=float))))


def gcv_score(fit, n=None):
    """Generalized cross-validation score ``n * D / (n - edf)^2``.

    ``fit`` is a :class:`FitResult` or a ``(deviance, edf)`` pair.
    """
    if isinstance(fit, FitResult):
        deviance, edf = fit.deviance, fit.edf
        if n is None:
            n = len(fit.fitted_means)
    else:
        deviance, edf = fit
    denom = n - edf
    if denom <= 0:
        raise SaturatedFit(f"edf {edf:.6g} >= n {n}: saturated fit has no GCV score")
    return n * deviance / denom**2


def _gcv_or_nan(deviance, edf, n):
    try:
        return gcv_score((deviance, edf), n)
    except SaturatedFit:
        return math.nan


def irls_fit(
    phi,
    P,
    y,
    family,
    lam,
    *,
    max_iter=50,
    coef_rtol=1e-6,
    dev_rtol=1e-8,
    max_halvings=10,
    c0=None,
):
    """Penalized IRLS for one response vector.

    ``phi`` is the n x K basis (``None`` for the identity, i.e. nodes at the
    observation sites).  Step-halving keeps the penalized deviance from
    increasing between accepted iterates.  Non-convergence is reported through
    ``converged=False``, not raised.
    """
    family = get_family(family)
    y = family.validate(y)
    phi = _as_phi(phi)
    pen = P if isinstance(P, Penalty) else Penalty(P)
    P = pen.matrix
    if lam < 0:
        raise InputError(f"lambda must be nonnegative, got {lam}")
    n = len(y)
    K = P.shape[0]
    if phi is None and n != K:
        raise InputError(f"identity basis needs n == K, got n={n}, K={K}")
    if phi is not None and phi.shape != (n, K):
        raise InputError(f"basis shape {phi.shape} does not match (n={n}, K={K})")

    def eta_of(c):
        return c if phi is None else phi @ c

    def gram(w):
        return np.diag(w) if phi is None else phi.T @ (w[:, None] * phi)

    def rhs(w, z):
        return w * z if phi is None else phi.T @ (w * z)

    def objective(c):
        mu = family.linkinv(eta_of(c))
        return family.deviance(y, mu) + lam * pen.quad(c), mu

    if c0 is None:
        mu = family.initial_mu(y)
        eta = family.link(mu)
        c = None
        obj = math.inf
    else:
        c = np.asarray(c0, dtype=float)
        obj, mu = objective(c)
        eta = eta_of(c)

    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = family.variance(mu)
        z = eta + (y - mu) / w
        c_new = pen.system(gram(w), lam).solve(rhs(w, z))
        obj_new, mu_new = objective(c_new)
        if c is not None:
            halvings = 0
            while not obj_new <= obj * (1 + 1e-12) + 1e-300 and halvings < max_halvings:
                c_new = 0.5 * (c + c_new)
                obj_new, mu_new = objective(c_new)
                halvings += 1
            if not obj_new <= obj * (1 + 1e-12) + 1e-300:
                # no descent possible along this direction: keep the current iterate
                converged = True
                break
        if c is None:
            dc = math.inf
        else:
            dc = np.linalg.norm(c_new - c) / max(np.linalg.norm(c_new), 1e-300)
        dobj = abs(obj - obj_new) / max(abs(obj_new), 1.0) if math.isfinite(obj) else math.inf
        c, obj, mu = c_new, obj_new, mu_new
        eta = eta_of(c)
        history.append(obj)
        if family.name == "gaussian" or dc < coef_rtol or dobj < dev_rtol:
            converged = True
            break

    # smoothing-operator trace at the converged weights
    w = family.variance(mu)
    B = gram(w)
    edf = pen.system(B, lam).trace_solve(B)
    deviance = family.deviance(y, mu)
    return FitResult(
        coefficients=c,
        fitted_means=mu,
        deviance=deviance,
        edf=edf,
        gcv=_gcv_or_nan(deviance, edf, n),
        iterations=it,
        converged=converged,
        lam=float(lam),
        penalized_deviance=obj,
        history=tuple(history),
    )


DEFAULT_LAMBDA_RANGE = (1e-6, 1e6)


def default_lambda_grid(P, n, size=20, lo=DEFAULT_LAMBDA_RANGE[0], hi=DEFAULT_LAMBDA_RANGE[1]):
    """Log-spaced grid scaled by n / trace(P)."""
    P = _as_dense_penalty(P)
    tr = float(np.trace(P))
    return np.logspace(math.log10(lo), math.log10(hi), size) * (n / tr)


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise InputError("lambda grid must be a nonempty sequence")
    if np.any(grid <= 0) or not np.all(np.isfinite(grid)):
        raise InputError("lambda grid values must be positive and finite")
    if np.any(np.diff(grid) <= 0):
        raise InputError("lambda grid must be strictly increasing")
    return grid


def _pick(total):
    ok = np.isfinite(total)
    if not ok.any():
        raise NumericalError("no lambda in the grid produced a valid fit for every gene")
    best = np.min(total[ok])
    # lowest lambda among minimisers
    return int(np.nonzero(ok & (total <= best))[0][0])


class SpectralGaussian:
    """Closed-form Gaussian fits for every lambda via one eigendecomposition.

    With ``B = Phi^T Phi`` and the generalized eigenpairs ``P V = B V E``
    (``V^T B V = I``), the penalized least-squares solution is
    ``c = V (I + lam E)^{-1} V^T Phi^T y`` and ``edf = sum 1 / (1 + lam e)``.
    Eigenvalues are clipped at zero (P is PSD up to rounding).
    """

    def __init__(self, phi, P):
        self.phi = _as_phi(phi)
        pen = P if isinstance(P, Penalty) else Penalty(P)
        K = pen.K
        B = None if self.phi is None else self.phi.T @ self.phi
        try:
            if not pen.deflate:
                e, V = np.linalg.eigh(pen.matrix) if B is None else sla.eigh(pen.matrix, B)
            else:
                # exact zero mode for the constants, eigenpairs of the complement
                H1 = pen.reflect_rows(np.eye(K)[:, 1:])
                u = np.full(K, 1.0 / math.sqrt(K))
                P22 = pen.reflected[1:, 1:]
                if B is None:
                    e2, W = np.linalg.eigh(P22)
                    V = np.column_stack([u, H1 @ W])
                else:
                    Bu = B @ u
                    uBu = float(u @ Bu)
                    Z = H1 - np.outer(u, (Bu @ H1) / uBu)
                    e2, W = sla.eigh(P22, Z.T @ B @ Z)
                    V = np.column_stack([u / math.sqrt(uBu), Z @ W])
                e = np.concatenate([[0.0], e2])
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"basis Gram matrix is singular: {exc}") from exc
        self.eigenvalues = np.clip(e, 0.0, None)
        self.vectors = V

    def project(self, Y):
        Y = np.atleast_2d(Y)
        rhs = Y if self.phi is None else Y @ self.phi
        return rhs @ self.vectors

    def shrink(self, lam):
        return 1.0 / (1.0 + lam * self.eigenvalues)

    def coefficients(self, proj, lam):
        return (proj * self.shrink(lam)) @ self.vectors.T

    def edf(self, lam):
        return float(np.sum(self.shrink(lam)))

    def deviance(self, Y, proj, lam):
        Y = np.atleast_2d(Y)
        if self.phi is None:
            # orthonormal eigenbasis: residual lives in the same coordinates
            r = proj * (1.0 - self.shrink(lam))
            return np.einsum("ij,ij->i", r, r)
        fitted = self.coefficients(proj, lam) @ self.phi.T
        r = Y - fitted
        return np.einsum("ij,ij->i", r, r)


def select_lambda(phi, P, Y, family, grid=None, *, genes=None, threads=1, **fit_options):
    """Fit every gene at every grid lambda and pick the unified lambda.

    Returns ``(LambdaSelection, C)`` where ``C`` (G x K) holds each gene's
    coefficients at ``lambda_opt``.  A gene that fails at some lambda makes
    that lambda ineligible; failing everywhere raises with the gene name.
    """
    family = get_family(family)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    G, n = Y.shape
    if genes is None:
        genes = [str(i) for i in range(G)]
    for i in range(G):
        try:
            family.validate(Y[i])
        except StihcError as exc:
            raise GeneFitError(genes[i], exc) from exc
    if grid is None:
        grid = default_lambda_grid(P, n)
    grid = _check_grid(grid)
    L = len(grid)

    P = P if isinstance(P, Penalty) else Penalty(P)
    spec = None
    if family.name == "gaussian":
        try:
            spec = SpectralGaussian(phi, P)
        except SingularSystem:
            # nodes without nearby observations: Phi^T Phi is singular, but
            # B + lam P may not be, so fit per lambda instead
            spec = None
    if spec is not None:
        proj = spec.project(Y)
        dev = np.empty((G, L))
        edf = np.empty((G, L))
        for k, lam in enumerate(grid):
            dev[:, k] = spec.deviance(Y, proj, lam)
            edf[:, k] = spec.edf(lam)
        gcv = np.full((G, L), np.nan)
        ok = n - edf > 0
        gcv[ok] = n * dev[ok] / (n - edf[ok]) ** 2
        total = _total(gcv)
        k_opt = _pick(total)
        C = spec.coefficients(proj, grid[k_opt])
        sel = LambdaSelection(
            grid, gcv, total, float(grid[k_opt]), k_opt, edf, dev, np.isfinite(total),
            np.ones(G, dtype=bool),
        )
        return sel, C

    def fit_gene(i):
        out = []
        c_prev = None
        for lam in grid:
            try:
                fit = irls_fit(phi, P, Y[i], family, lam, c0=c_prev, **fit_options)
            except NumericalError as exc:
                out.append(exc)
                c_prev = None
                continue
            out.append(fit)
            c_prev = fit.coefficients
        return out

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fit_gene, range(G)))
    else:
        results = [fit_gene(i) for i in range(G)]

    gcv = np.full((G, L), np.nan)
    dev = np.full((G, L), np.nan)
    edf = np.full((G, L), np.nan)
    for i, row in enumerate(results):
        for k, fit in enumerate(row):
            if isinstance(fit, FitResult):
                gcv[i, k] = fit.gcv
                dev[i, k] = fit.deviance
                edf[i, k] = fit.edf
    total = _total(gcv)
    if not np.isfinite(total).any():
        # surface the first failure with its gene attached
        for i, row in enumerate(results):
            for fit in row:
                if isinstance(fit, Exception):
                    raise GeneFitError(genes[i], fit) from fit
    k_opt = _pick(total)
    fits = [row[k_opt] for row in results]
    converged = np.array([f.converged for f in fits])
    if not converged.all():
        bad = [genes[i] for i in np.nonzero(~converged)[0]]
        warnings.warn(
            f"IRLS hit the iteration limit for {len(bad)} gene(s) at the selected lambda: "
            + ", ".join(bad[:5]),
            StihcWarning,
            stacklevel=2,
        )
    C = np.vstack([f.coefficients for f in fits])
    sel = LambdaSelection(
        grid, gcv, total, float(grid[k_opt]), k_opt, edf, dev, np.isfinite(total), converged
    )
    return sel, C


def _total(gcv):
    # fixed-order reduction; a NaN in any gene makes that lambda ineligible
    total = np.sum(gcv, axis=0)
    total[~np.isfinite(total)] = np.inf
    return total
