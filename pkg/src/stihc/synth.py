"""Synthetic spatial expression with planted co-expression modules.

Each module has a mean field built from 2D Gaussian bumps over a baseline.
A gene's count at a spot is drawn from a negative binomial (or Poisson) with
mean ``scale_gene * field(spot)``, where ``scale_gene`` is uniform in
[0.8, 1.25].  Randomness is counter based: the draw for (seed, gene, spot)
is a fixed function of those three values, obtained by inverse-CDF sampling
of the spot-th uniform from a Philox stream keyed by (seed, gene).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InputError, TooFewSpots
from .io import ExpressionMatrix
from .mesh import SpotGrid

SCALE_RANGE = (0.8, 1.25)
MAX_PATTERN_CORRELATION = 0.5

# stream tags keep the per-purpose Philox keys apart
_COUNTS, _SCALE, _SUBSAMPLE = 0, 1, 2


@dataclass(frozen=True)
class PatternSpec:
    """Mean field ``baseline + sum_k amp_k * exp(-0.5 * |(s - c_k) / w_k|^2)``.

    ``widths`` holds one (wx, wy) pair per bump (axis-aligned anisotropy).
    """

    name: str
    centers: tuple
    widths: tuple
    amplitudes: tuple
    baseline: float
    size: int = 1

    def __post_init__(self):
        if not (len(self.centers) == len(self.widths) == len(self.amplitudes)):
            raise InputError(f"pattern {self.name!r}: bump parameter lengths differ")
        if self.baseline <= 0 or any(a < 0 for a in self.amplitudes):
            raise InputError(f"pattern {self.name!r}: baseline must be positive, amplitudes nonnegative")
        if self.size < 1:
            raise InputError(f"pattern {self.name!r}: module size must be at least 1")

    def evaluate(self, coords):
        coords = np.asarray(coords, dtype=float)
        out = np.full(len(coords), float(self.baseline))
        for (cx, cy), (wx, wy), amp in zip(self.centers, self.widths, self.amplitudes):
            q = ((coords[:, 0] - cx) / wx) ** 2 + ((coords[:, 1] - cy) / wy) ** 2
            out += amp * np.exp(-0.5 * q)
        return out

    def with_size(self, size):
        return PatternSpec(self.name, self.centers, self.widths, self.amplitudes, self.baseline, size)


# Four layouts on the default (unit-width) slice: a corner bump, a thin ridge
# along the top edge, a central blob and a broad diffuse field.
DEFAULT_PATTERNS = (
    PatternSpec("corner", ((0.16, 0.16),), ((0.10, 0.10),), (6.0,), 0.5),
    PatternSpec("ridge", ((0.55, 0.80),), ((0.24, 0.045),), (8.0,), 0.5),
    PatternSpec("blob", ((0.50, 0.42),), ((0.11, 0.11),), (6.0,), 0.5),
    PatternSpec("broad", ((0.92, 0.18),), ((0.30, 0.30),), (4.0,), 0.8),
)

SCENARIO_SIZES = {
    "balanced": (25, 25, 25, 25),
    "imbalanced": (6, 2, 16, 25),
    "sparse": (6, 2, 16, 25),
}
SPARSE_SPOTS = 260


@dataclass(frozen=True)
class Scenario:
    name: str = "balanced"
    module_sizes: tuple = None
    patterns: tuple = DEFAULT_PATTERNS
    grid_side: int = 52
    n_spots: int = 2696
    n_keep: int = None
    noise: str = "nb"
    dispersion: float = 10.0
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.name not in SCENARIO_SIZES:
            raise InputError(f"unknown scenario {self.name!r}; expected one of {sorted(SCENARIO_SIZES)}")
        if self.module_sizes is None:
            object.__setattr__(self, "module_sizes", SCENARIO_SIZES[self.name])
        if self.n_keep is None and self.name == "sparse":
            object.__setattr__(self, "n_keep", SPARSE_SPOTS)
        if len(self.module_sizes) != len(self.patterns):
            raise InputError("one module size per pattern is required")
        if self.noise not in ("nb", "poisson"):
            raise InputError(f"noise must be 'nb' or 'poisson', got {self.noise!r}")
        if self.noise == "nb" and not self.dispersion > 0:
            raise InputError("negative binomial dispersion must be positive")
        if self.n_spots > self.grid_side**2 or self.n_spots < 3:
            raise InputError(f"cannot take {self.n_spots} spots from a {self.grid_side}^2 grid")

    def modules(self):
        return tuple(p.with_size(s) for p, s in zip(self.patterns, self.module_sizes))


def hex_grid(side=52, n_spots=2696):
    """Offset hexagonal lattice, row-major, trimmed to ``n_spots`` spots.

    Odd rows are shifted by half a spacing; the lattice is scaled so x spans [0, 1].
    """
    row, col = np.divmod(np.arange(side * side), side)
    spacing = 1.0 / (side - 0.5)
    x = (col + 0.5 * (row % 2)) * spacing
    y = row * (np.sqrt(3.0) / 2.0) * spacing
    coords = np.column_stack([x, y])[:n_spots]
    ids = tuple(f"spot_{i:04d}" for i in range(n_spots))
    return SpotGrid(ids, coords)


def _stream(seed, gene, tag):
    ss = np.random.SeedSequence([int(seed), int(gene), int(tag)])
    return np.random.Generator(np.random.Philox(ss))


def _uniforms(seed, gene, tag, n):
    # j-th double of the stream belongs to spot j; shift off zero for the inverse CDF
    return _stream(seed, gene, tag).random(n) + 2.0**-54


def draw_counts(mean, uniforms, noise="nb", dispersion=10.0):
    mean = np.asarray(mean, dtype=float)
    if noise == "poisson":
        return stats.poisson.ppf(uniforms, mean)
    p = dispersion / (dispersion + mean)
    return stats.nbinom.ppf(uniforms, dispersion, p)


def pattern_correlations(patterns, coords):
    from .ihc import spearman_corr

    fields = np.vstack([p.evaluate(coords) for p in patterns])
    rho, _ = spearman_corr(fields)
    return rho


def generate_dataset(scenario: Scenario):
    """Return ``(ExpressionMatrix, SpotGrid, truth)``; truth maps gene -> module name."""
    grid = hex_grid(scenario.grid_side, scenario.n_spots)
    modules = scenario.modules()
    rho = pattern_correlations(modules, grid.coords)
    off = rho[~np.eye(len(modules), dtype=bool)]
    if len(off) and off.max() >= MAX_PATTERN_CORRELATION:
        raise InputError(
            f"module patterns correlate at {off.max():.3f} >= {MAX_PATTERN_CORRELATION}; "
            "patterns must be distinguishable"
        )

    genes, rows, truth = [], [], {}
    gene_index = 0
    for module in modules:
        field_values = module.evaluate(grid.coords)
        for k in range(module.size):
            name = f"{module.name}_{k + 1:02d}"
            lo, hi = SCALE_RANGE
            scale = lo + (hi - lo) * _stream(scenario.seed, gene_index, _SCALE).random()
            u = _uniforms(scenario.seed, gene_index, _COUNTS, grid.n)
            rows.append(draw_counts(scale * field_values, u, scenario.noise, scenario.dispersion))
            genes.append(name)
            truth[name] = module.name
            gene_index += 1
    expr = ExpressionMatrix(tuple(genes), grid.spot_ids, np.vstack(rows))
    if scenario.n_keep is not None and scenario.n_keep < grid.n:
        expr, grid = subsample_spots(expr, grid, scenario.n_keep, scenario.seed)
    return expr, grid, truth


def subsample_spots(expr, grid, n_keep, seed):
    """Uniform subset of spots without replacement (original order kept)."""
    n = grid.n
    if n_keep < 3:
        raise TooFewSpots(f"need at least 3 spots, asked for {n_keep}")
    if n_keep > n:
        raise TooFewSpots(f"cannot keep {n_keep} of {n} spots")
    if n_keep == n:
        return expr, grid
    rng = _stream(seed, 0, _SUBSAMPLE)
    keep = np.sort(rng.choice(n, size=n_keep, replace=False))
    sub_grid = grid.subset(keep)
    col = {s: j for j, s in enumerate(expr.spots)}
    cols = np.array([col[s] for s in sub_grid.spot_ids])
    return ExpressionMatrix(expr.genes, sub_grid.spot_ids, expr.values[:, cols]), sub_grid


def truth_labels(genes, truth):
    """Integer labels for ``genes`` from a gene -> module mapping."""
    names = sorted(set(truth[g] for g in genes))
    index = {m: k for k, m in enumerate(names)}
    return np.array([index[truth[g]] for g in genes])
