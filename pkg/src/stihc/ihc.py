"""Iterative hierarchical clustering of coefficient rows into co-expression modules.

For every correlation threshold alpha on a grid spanning the observed
Spearman correlations, genes are clustered by average linkage cut at height
``1 - alpha``, then merged (clusters whose centres correlate at >= alpha) and
pruned (members correlating below alpha with their centre become singletons)
until the partition stops changing; finally merging alone is repeated until
all centre-centre correlations are below alpha.  The alpha whose partition has
the highest mean silhouette wins.

Everything here is rank based: a cluster's centre, as seen by the merge and
prune steps, is the mean of its members' rank profiles, so replacing a
coefficient row by any strictly increasing transform of itself changes
nothing.  ``Partition.centers`` still reports the arithmetic mean of the
coefficient rows, which is what gets rendered.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, StihcWarning
from .metrics import mean_silhouette

TIE_TOL = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    U: int = 20
    max_inner_iterations: int = 100
    singleton_silhouette: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.U < 2:
            raise InputError(f"U must be at least 2, got {self.U}")
        if self.max_inner_iterations < 1:
            raise InputError("max_inner_iterations must be positive")


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """``values = 1 - rho`` with rho the Spearman correlation of coefficient rows.

    Rows with no rank variation (constant rows) are flagged in ``degenerate``;
    their correlation with everything else is taken as 0.
    """

    values: np.ndarray
    rho: np.ndarray
    degenerate: np.ndarray


@dataclass(frozen=True, eq=False)
class Partition:
    labels: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray
    converged: bool = True
    rounds: int = 0

    @property
    def n_clusters(self):
        return len(self.sizes)

    @property
    def groups(self):
        return groups_from_labels(self.labels)


@dataclass(frozen=True, eq=False)
class AlphaDiagnostic:
    alpha: float
    n_clusters: int
    mean_silhouette: float
    converged: bool
    partition: Partition = field(repr=False)


@dataclass(frozen=True, eq=False)
class ClusterResult:
    partition: Partition
    alpha_opt: float
    diagnostics: tuple
    distance: DistanceMatrix
    degenerate_grid: bool = False
    fallback: bool = False

    @property
    def labels(self):
        return self.partition.labels


# ---------------------------------------------------------------------------
# rank machinery


def _standardize(ranks):
    """Centre and scale rank rows to unit norm; returns (Z, degenerate mask)."""
    Z = ranks - ranks.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(Z, axis=1)
    K = ranks.shape[1]
    degenerate = norm <= 1e-12 * K
    Z[degenerate] = 0.0
    Z[~degenerate] /= norm[~degenerate, None]
    return Z, degenerate


def _rank_rows(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise InputError("coefficient matrix contains non-finite values")
    return rankdata(X, axis=1, method="average")


def _correlation(Z, degenerate):
    rho = np.clip(Z @ Z.T, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    if degenerate.any():
        rho[degenerate, :] = 0.0
        rho[:, degenerate] = 0.0
        rho[degenerate, degenerate] = 1.0
    return rho


def spearman_corr(X):
    Z, degenerate = _standardize(_rank_rows(X))
    return _correlation(Z, degenerate), degenerate


def spearman_distance(C) -> DistanceMatrix:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] < 2 or C.shape[1] < 2:
        raise InputError(f"need at least 2 rows and 2 columns, got shape {C.shape}")
    rho, degenerate = spearman_corr(C)
    d = np.clip(1.0 - rho, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, rho, degenerate)


class _Ranked:
    """Rank profiles of the coefficient rows, shared by all steps."""

    def __init__(self, C):
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.R = _rank_rows(self.C)
        self.Z, self.degenerate = _standardize(self.R)

    def center_z(self, groups):
        """Standardised rank profiles of the cluster centres."""
        M = np.vstack([self.R[list(g)].mean(axis=0) for g in groups])
        return _standardize(rankdata(M, axis=1, method="average"))


# ---------------------------------------------------------------------------
# partitions as canonical tuples of sorted member tuples


def canonical(groups):
    return tuple(sorted(tuple(sorted(int(i) for i in g)) for g in groups if len(g)))


def groups_from_labels(labels):
    labels = np.asarray(labels)
    out = {}
    for i, lab in enumerate(labels.tolist()):
        out.setdefault(lab, []).append(i)
    return canonical(out.values())


def labels_from_groups(groups, n):
    labels = np.full(n, -1, dtype=np.int64)
    for k, g in enumerate(canonical(groups)):
        labels[list(g)] = k
    if np.any(labels < 0):
        raise ValueError("groups do not cover every item")
    return labels


def make_partition(C, groups, converged=True, rounds=0) -> Partition:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    groups = canonical(groups)
    labels = labels_from_groups(groups, len(C))
    centers = np.vstack([C[list(g)].mean(axis=0) for g in groups])
    sizes = np.array([len(g) for g in groups], dtype=np.int64)
    return Partition(labels, centers, sizes, converged, rounds)


# ---------------------------------------------------------------------------
# average linkage with a height cut


def _average_linkage_groups(D, cut):
    """Agglomerate while the closest pair is at average-linkage distance <= cut.

    Ties (within TIE_TOL) go to the pair whose smallest members are
    lexicographically smallest.  Slot i always holds the cluster whose
    smallest member is i, so the first row-major hit is that pair.
    """
    D = np.asarray(D, dtype=float)
    n = len(D)
    members = [[i] for i in range(n)]
    if n < 2:
        return canonical(members)
    dist = D.copy()
    np.fill_diagonal(dist, np.inf)
    size = np.ones(n)
    flat = dist.ravel()  # view
    for _ in range(n - 1):
        m = flat.min()
        if not m <= cut + TIE_TOL:
            break
        k = int(np.argmax(flat <= m + TIE_TOL))
        i, j = divmod(k, n)
        if i > j:
            i, j = j, i
        new = (size[i] * dist[i] + size[j] * dist[j]) / (size[i] + size[j])
        dist[i, :] = new
        dist[:, i] = new
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        size[i] += size[j]
        members[i].extend(members[j])
        members[j] = []
    return canonical(members)


def _check_alpha(alpha):
    alpha = float(alpha)
    if not -1.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [-1, 1], got {alpha}")
    return alpha


def threshold_cluster(D, alpha):
    """Average-linkage clustering cut at height ``1 - alpha``; returns labels.

    Labels are contiguous and ordered by each cluster's smallest member.
    """
    alpha = _check_alpha(alpha)
    D = np.asarray(getattr(D, "values", D), dtype=float)
    groups = _average_linkage_groups(D, 1.0 - alpha)
    return labels_from_groups(groups, len(D))


# ---------------------------------------------------------------------------
# merge / prune on groups


def _merge(ranked, groups, alpha):
    if len(groups) < 2:
        return groups
    Zc, deg = ranked.center_z(groups)
    rho = _correlation(Zc, deg)
    d = np.clip(1.0 - rho, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    merged = _average_linkage_groups(d, 1.0 - alpha)
    if len(merged) == len(groups):
        return groups
    return canonical([sum((list(groups[k]) for k in mg), []) for mg in merged])


def _prune(ranked, groups, alpha):
    multi = [g for g in groups if len(g) > 1]
    if not multi:
        return groups
    Zc, deg = ranked.center_z(multi)
    out = [g for g in groups if len(g) == 1]
    changed = False
    for g, zc, dg in zip(multi, Zc, deg):
        idx = np.array(g)
        rho = np.zeros(len(g)) if dg else ranked.Z[idx] @ zc
        keep = rho >= alpha
        if keep.all():
            out.append(g)
            continue
        changed = True
        if keep.any():
            out.append(tuple(idx[keep].tolist()))
        out.extend((int(i),) for i in idx[~keep])
    return canonical(out) if changed else groups


def _local_ranked(ranked, idx):
    sub = _Ranked.__new__(_Ranked)
    sub.C = ranked.C[idx]
    sub.R = ranked.R[idx]
    sub.Z = ranked.Z[idx]
    sub.degenerate = ranked.degenerate[idx]
    return sub


def merge_step(C, partition, alpha) -> Partition:
    alpha = _check_alpha(alpha)
    ranked = C if isinstance(C, _Ranked) else _Ranked(C)
    groups = _merge(ranked, canonical(partition.groups), alpha)
    return make_partition(ranked.C, groups)


def prune_step(C, partition, alpha) -> Partition:
    alpha = _check_alpha(alpha)
    ranked = C if isinstance(C, _Ranked) else _Ranked(C)
    groups = _prune(ranked, canonical(partition.groups), alpha)
    return make_partition(ranked.C, groups)


def ihc_at_alpha(C, alpha, config=None, *, _ranked=None, _distance=None) -> Partition:
    """Cluster, then merge/prune to a fixed point, then merge until separated.

    Constant rows are set aside as singletons.  A repeated (non-consecutive)
    partition is a cycle; cycles and the round cap stop the loop with
    ``converged=False`` and the current partition is kept.
    """
    alpha = _check_alpha(alpha)
    config = config or ClusterConfig()
    ranked = _ranked or _Ranked(C)
    G = len(ranked.C)
    D = _distance if _distance is not None else spearman_distance(ranked.C)
    idx = np.nonzero(~ranked.degenerate)[0]
    forced = [(int(i),) for i in np.nonzero(ranked.degenerate)[0]]
    if len(idx) == 0:
        return make_partition(ranked.C, forced)

    local = _local_ranked(ranked, idx)
    groups = _average_linkage_groups(D.values[np.ix_(idx, idx)], 1.0 - alpha)
    seen = {groups}
    converged = False
    rounds = 0
    for rounds in range(1, config.max_inner_iterations + 1):
        nxt = _prune(local, _merge(local, groups, alpha), alpha)
        if nxt == groups:
            converged = True
            break
        if nxt in seen:
            groups = nxt
            break
        seen.add(nxt)
        groups = nxt

    for _ in range(config.max_inner_iterations):
        nxt = _merge(local, groups, alpha)
        if nxt == groups:
            break
        groups = nxt
    else:
        converged = False

    full = [tuple(int(idx[i]) for i in g) for g in groups] + forced
    return make_partition(ranked.C, full, converged, rounds)


def _score(partition, D, G, singleton_value):
    m = partition.n_clusters
    if m == 1:
        return -np.inf, np.nan
    sil = mean_silhouette(D.values, partition.labels, singleton_value)
    if m == G:
        return -np.inf, sil
    return sil, sil


def stihc_cluster(C, config=None) -> ClusterResult:
    """Run the clustering over an alpha grid and keep the best-silhouette partition."""
    config = config or ClusterConfig()
    ranked = _Ranked(C)
    G = len(ranked.C)
    if G < 3:
        raise InputError(f"need at least 3 genes to cluster, got {G}")
    D = spearman_distance(ranked.C)
    nd = np.nonzero(~ranked.degenerate)[0]
    if ranked.degenerate.any():
        warnings.warn(
            f"{int(ranked.degenerate.sum())} constant coefficient row(s) kept as singletons",
            StihcWarning,
            stacklevel=2,
        )

    degenerate_grid = False
    if len(nd) >= 2:
        sub = D.rho[np.ix_(nd, nd)]
        off = sub[~np.eye(len(nd), dtype=bool)]
        a_min, a_max = float(off.min()), float(off.max())
    else:
        a_min = a_max = 1.0
    if a_max - a_min <= TIE_TOL:
        degenerate_grid = True
        warnings.warn(
            f"all pairwise correlations equal {a_max:.6g}; alpha grid collapses to one value",
            StihcWarning,
            stacklevel=2,
        )
        alphas = np.array([a_max])
    else:
        alphas = np.linspace(a_min, a_max, config.U)

    def run(alpha):
        return ihc_at_alpha(ranked.C, alpha, config, _ranked=ranked, _distance=D)

    if config.threads and config.threads > 1 and len(alphas) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(run, alphas))
    else:
        parts = [run(a) for a in alphas]

    diags = []
    scores = np.empty(len(alphas))
    for k, (alpha, part) in enumerate(zip(alphas, parts)):
        scores[k], sil = _score(part, D, G, config.singleton_silhouette)
        diags.append(AlphaDiagnostic(float(alpha), part.n_clusters, sil, part.converged, part))

    fallback = False
    if np.isfinite(scores).any():
        best = scores.max()
        k_opt = int(np.nonzero(scores >= best - TIE_TOL)[0][0])
    else:
        # every alpha gave one cluster or all singletons: keep the finest
        fallback = True
        counts = np.array([p.n_clusters for p in parts])
        k_opt = int(np.nonzero(counts == counts.max())[0][0])
        if not degenerate_grid:
            warnings.warn(
                "every alpha produced a degenerate partition (one cluster or all singletons)",
                StihcWarning,
                stacklevel=2,
            )
    return ClusterResult(parts[k_opt], float(alphas[k_opt]), tuple(diags), D, degenerate_grid, fallback)
