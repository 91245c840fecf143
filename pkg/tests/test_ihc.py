import itertools
import warnings

import numpy as np
import pytest
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.stats import spearmanr

from stihc.errors import InputError, StihcWarning
from stihc.ihc import (
    ClusterConfig,
    canonical,
    ihc_at_alpha,
    make_partition,
    merge_step,
    prune_step,
    spearman_distance,
    stihc_cluster,
    threshold_cluster,
)
from stihc.metrics import adjusted_rand_index

# mutually uncorrelated rank patterns (found by exhaustive search over permutations of 7)
UNCORRELATED = np.array([[1, 2, 3, 4, 5, 6, 7], [1, 4, 6, 7, 5, 3, 2], [2, 7, 5, 3, 1, 6, 4]], float)


def planted(groups=(5, 5, 5), K=60, noise=0.3, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(len(groups), K))
    rows, truth = [], []
    for g, size in enumerate(groups):
        for _ in range(size):
            rows.append(base[g] + noise * rng.normal(size=K))
            truth.append(g)
    return np.array(rows), np.array(truth)


def same_partition(a, b):
    return adjusted_rand_index(a, b) == 1.0 and len(set(a)) == len(set(b))


class TestSpearmanDistance:
    def test_monotone_agreement(self):
        d = spearman_distance(np.array([[1, 2, 3.0], [10, 20, 30]]))
        assert d.values[0, 1] == pytest.approx(0.0, abs=1e-15)

    def test_reversed(self):
        d = spearman_distance(np.array([[1, 2, 3.0], [3, 2, 1]]))
        assert d.values[0, 1] == pytest.approx(2.0, abs=1e-15)

    def test_rank_difference_formula(self):
        d = spearman_distance(np.array([[1, 2, 3, 4.0], [1, 3, 2, 4]]))
        assert d.rho[0, 1] == pytest.approx(0.8, abs=1e-15)
        assert d.values[0, 1] == pytest.approx(0.2, abs=1e-15)

    def test_against_scipy_with_ties(self):
        rng = np.random.default_rng(0)
        C = rng.integers(0, 5, size=(8, 30)).astype(float)
        ref = spearmanr(C, axis=1).statistic
        np.testing.assert_allclose(spearman_distance(C).rho, ref, atol=1e-12)

    def test_properties(self):
        d = spearman_distance(np.random.default_rng(1).normal(size=(10, 20))).values
        assert np.all(np.diag(d) == 0)
        assert np.array_equal(d, d.T)
        assert d.min() >= 0 and d.max() <= 2

    def test_constant_row_flagged(self):
        d = spearman_distance(np.array([[1, 2, 3.0], [5, 5, 5], [3, 1, 2]]))
        assert d.degenerate.tolist() == [False, True, False]
        assert d.rho[0, 1] == 0.0


class TestThresholdCluster:
    def test_all_singletons_above_max(self):
        D = spearman_distance(np.random.default_rng(2).normal(size=(6, 15)))
        alpha = D.rho[~np.eye(6, dtype=bool)].max() + 0.01
        assert len(set(threshold_cluster(D, alpha))) == 6

    def test_one_cluster_below_min(self):
        D = spearman_distance(np.random.default_rng(3).normal(size=(6, 15)))
        alpha = D.rho[~np.eye(6, dtype=bool)].min()
        assert len(set(threshold_cluster(D, alpha))) == 1

    def test_two_pairs(self):
        D = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0.0]])
        assert threshold_cluster(D, 0.5).tolist() == [0, 0, 1, 1]

    def test_two_pairs_by_enumeration(self):
        # every cut of every dendrogram: only {{0,1},{2,3}} keeps all within-cluster merges <= 0.5
        D = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0.0]])
        ok = []
        for labels in itertools.product(range(4), repeat=4):
            groups = canonical([[i for i in range(4) if labels[i] == c] for c in set(labels)])
            within = all(D[i, j] <= 0.5 for g in groups for i in g for j in g)
            if within:
                ok.append(groups)
        coarsest = min(ok, key=len)
        assert coarsest == ((0, 1), (2, 3))

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_scipy_average_linkage(self, seed):
        rng = np.random.default_rng(seed)
        C = rng.normal(size=(25, 40))
        D = spearman_distance(C).values
        alpha = rng.uniform(-0.2, 0.4)
        ref = fcluster(linkage(squareform(D, checks=False), "average"), 1 - alpha, "distance")
        assert same_partition(threshold_cluster(D, alpha), ref)

    def test_rejects_alpha_out_of_range(self):
        with pytest.raises(InputError):
            threshold_cluster(np.zeros((3, 3)), 1.5)

    def test_labels_ordered_by_first_member(self):
        D = np.array([[0, 1.5, 0.1], [1.5, 0, 1.5], [0.1, 1.5, 0.0]])
        assert threshold_cluster(D, 0.5).tolist() == [0, 1, 0]


class TestMergePrune:
    def test_identical_centers_merge(self):
        C = np.array([[1, 2, 3, 4.0], [2, 4, 6, 8], [4, 3, 2, 1], [1, 2, 3, 4.5]])
        part = make_partition(C, [(0,), (1,), (2,), (3,)])
        merged = merge_step(C, part, 0.99)
        assert merged.groups == ((0, 1, 3), (2,))

    def test_no_merge_when_uncorrelated(self):
        part = make_partition(UNCORRELATED, [(0,), (1,), (2,)])
        assert merge_step(UNCORRELATED, part, 0.5).groups == part.groups

    def test_single_cluster_unchanged(self):
        C = np.random.default_rng(0).normal(size=(4, 10))
        part = make_partition(C, [(0, 1, 2, 3)])
        assert merge_step(C, part, 0.5).groups == part.groups

    def test_prune_expels_anticorrelated(self):
        C = np.array([[1, 2, 3, 4, 5.0], [1, 2, 3, 5, 4], [5, 4, 3, 2, 1]])
        part = make_partition(C, [(0, 1, 2)])
        pruned = prune_step(C, part, 0.5)
        assert pruned.groups == ((0, 1), (2,))
        # derived directly: the rank-space centre of the three rows
        ranks = np.array([[1, 2, 3, 4, 5], [1, 2, 3, 5, 4], [5, 4, 3, 2, 1.0]])
        center = ranks.mean(axis=0)
        rho = [spearmanr(r, center).statistic for r in ranks]
        assert rho[2] < 0.5 <= min(rho[:2])

    def test_prune_all_fine(self):
        C = np.array([[1, 2, 3, 4.0], [1, 2, 4, 3], [10, 20, 30, 40]])
        part = make_partition(C, [(0, 1, 2)])
        assert prune_step(C, part, 0.5).groups == part.groups

    def test_prune_singletons_untouched(self):
        C = np.random.default_rng(1).normal(size=(3, 6))
        part = make_partition(C, [(0,), (1,), (2,)])
        assert prune_step(C, part, 0.99).groups == part.groups

    def test_centers_are_arithmetic_means(self):
        C = np.random.default_rng(2).normal(size=(4, 5))
        part = make_partition(C, [(0, 2), (1, 3)])
        np.testing.assert_allclose(part.centers[0], C[[0, 2]].mean(axis=0))
        assert part.sizes.tolist() == [2, 2]


class TestIhcAtAlpha:
    def test_duplicated_rows_two_groups(self):
        base = np.random.default_rng(4).normal(size=(2, 20))
        C = np.vstack([base[0], base[0] * 2, base[1], base[1] + 3, base[0] - 1])
        rho = spearman_distance(C).rho[0, 2]
        alpha = (1 + max(rho, 0)) / 2
        part = ihc_at_alpha(C, alpha)
        assert part.groups == ((0, 1, 4), (2, 3))
        assert part.converged and part.rounds == 1
        # fixed point: the same labels come straight out of the threshold step
        assert same_partition(threshold_cluster(spearman_distance(C), alpha), part.labels)

    def test_identical_rows_single_cluster(self):
        row = np.random.default_rng(5).normal(size=12)
        C = np.tile(row, (6, 1))
        for alpha in (-0.5, 0.3, 1.0):
            assert ihc_at_alpha(C, alpha).n_clusters == 1

    def test_final_centres_separated(self):
        C, _ = planted((6, 6, 6, 6), noise=1.0, seed=3)
        alpha = 0.3
        part = ihc_at_alpha(C, alpha)
        multi = [g for g in part.groups]
        if len(multi) > 1:
            from stihc.ihc import _Ranked, _correlation

            r = _Ranked(C)
            Zc, deg = r.center_z(multi)
            rho = _correlation(Zc, deg)
            assert rho[~np.eye(len(multi), dtype=bool)].max() < alpha

    def test_constant_rows_forced_singletons(self):
        C, _ = planted((4, 4), seed=6)
        C = np.vstack([C, np.full(C.shape[1], 2.0)])
        part = ihc_at_alpha(C, 0.2)
        assert (8,) in part.groups

    def test_iteration_cap_flag(self):
        C, _ = planted((5, 5, 5), noise=2.0, seed=7)
        part = ihc_at_alpha(C, 0.05, ClusterConfig(max_inner_iterations=1))
        assert part.rounds <= 1


class TestStihcCluster:
    def test_three_duplicated_groups(self):
        base = np.random.default_rng(8).normal(size=(3, 30))
        C = np.vstack([base[g] * s + o for g in range(3) for s, o in [(1, 0), (2, 1), (0.5, -3)]])
        res = stihc_cluster(C)
        assert res.partition.n_clusters == 3
        chosen = [d for d in res.diagnostics if d.alpha == res.alpha_opt][0]
        assert chosen.mean_silhouette == pytest.approx(1.0)

    def test_recovers_planted_modules(self):
        C, truth = planted((6, 2, 16, 25), noise=0.6, seed=9)
        res = stihc_cluster(C)
        assert adjusted_rand_index(res.labels, truth) == 1.0

    def test_alpha_grid_and_selection(self):
        C, _ = planted((5, 5, 5), noise=0.8, seed=10)
        res = stihc_cluster(C, ClusterConfig(U=7))
        rho = res.distance.rho[~np.eye(15, dtype=bool)]
        alphas = [d.alpha for d in res.diagnostics]
        assert alphas[0] == pytest.approx(rho.min()) and alphas[-1] == pytest.approx(rho.max())
        assert len(alphas) == 7
        eligible = [d.mean_silhouette for d in res.diagnostics if 1 < d.n_clusters < 15]
        chosen = [d for d in res.diagnostics if d.alpha == res.alpha_opt][0]
        assert chosen.mean_silhouette == pytest.approx(max(eligible))
        # lowest alpha among ties
        first = [d.alpha for d in res.diagnostics
                 if 1 < d.n_clusters < 15 and d.mean_silhouette >= max(eligible) - 1e-12][0]
        assert res.alpha_opt == first

    def test_silhouette_bounds(self):
        C, _ = planted((4, 4, 4), noise=1.5, seed=11)
        for d in stihc_cluster(C).diagnostics:
            assert np.isnan(d.mean_silhouette) or -1 <= d.mean_silhouette <= 1

    def test_uncorrelated_rows_fall_back(self):
        assert np.allclose(spearman_distance(UNCORRELATED).rho[~np.eye(3, dtype=bool)], 0, atol=1e-12)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = stihc_cluster(UNCORRELATED)
        assert res.fallback and res.degenerate_grid
        assert any(issubclass(w.category, StihcWarning) for w in caught)
        assert res.partition.n_clusters in (1, 3)
        assert len(res.diagnostics) == 1

    def test_needs_three_genes(self):
        with pytest.raises(InputError):
            stihc_cluster(np.random.default_rng(0).normal(size=(2, 5)))

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariance(self, seed):
        C, _ = planted((8, 5, 12), noise=0.9, seed=20 + seed)
        perm = np.random.default_rng(seed).permutation(len(C))
        a = stihc_cluster(C).labels
        b = stihc_cluster(C[perm]).labels
        assert same_partition(a[perm], b)

    def test_deterministic_and_thread_independent(self):
        C, _ = planted((7, 3, 9, 11), noise=1.0, seed=30)
        runs = [stihc_cluster(C, ClusterConfig(threads=t)).labels for t in (1, 1, 4)]
        assert all(np.array_equal(runs[0], r) for r in runs[1:])

    @pytest.mark.parametrize("seed", range(5))
    def test_rank_invariance(self, seed):
        C, _ = planted((6, 4, 10), noise=0.8, seed=40 + seed)
        T = np.vstack([np.exp(r) if i % 3 == 0 else (r**3 if i % 3 == 1 else 5 * r + 2)
                       for i, r in enumerate(C)])
        assert np.array_equal(stihc_cluster(C).labels, stihc_cluster(T).labels)

    def test_config_validation(self):
        with pytest.raises(InputError):
            ClusterConfig(U=1)
