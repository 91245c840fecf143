"""File formats and SVG rendering.

Counts are a TSV with a ``gene`` header column followed by one column per
spot id.  Coordinates are a CSV ``spot_id,x,y``.  Floats are written with
17 significant digits so a write/load round trip is exact.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyAfterFilter,
    InputError,
    LengthMismatch,
    NegativeValue,
    ParseError,
    StihcWarning,
    UnknownSpot,
)
from .mesh import SpotGrid


@dataclass(frozen=True, eq=False)
class ExpressionMatrix:
    genes: tuple
    spots: tuple
    values: np.ndarray  # genes x spots

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "genes", tuple(self.genes))
        object.__setattr__(self, "spots", tuple(self.spots))
        object.__setattr__(self, "values", values)
        if values.shape != (len(self.genes), len(self.spots)):
            raise LengthMismatch(
                f"values have shape {values.shape}, expected ({len(self.genes)}, {len(self.spots)})"
            )
        if not np.all(np.isfinite(values)):
            raise InputError("expression values must be finite")
        if len(set(self.genes)) != len(self.genes):
            raise InputError("duplicate gene names")

    @property
    def shape(self):
        return self.values.shape

    def select_genes(self, mask):
        mask = np.asarray(mask, dtype=bool)
        genes = tuple(g for g, keep in zip(self.genes, mask) if keep)
        return ExpressionMatrix(genes, self.spots, self.values[mask])


def fmt(x):
    return repr(float(x)) if np.isfinite(x) else str(x)


def _num(text, path, line):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", path, line) from None
    if not np.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", path, line)
    return value


def _open(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path)
    return path.open(newline="")


def read_coords(path) -> SpotGrid:
    ids, xy = [], []
    with _open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["spot_id", "x", "y"]:
            raise ParseError("header must be spot_id,x,y", path, 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, found {len(row)}", path, line)
            ids.append(row[0].strip())
            xy.append((_num(row[1], path, line), _num(row[2], path, line)))
    if not ids:
        raise EmptyAfterFilter(f"{path}: no spots")
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate spot_id", path)
    return SpotGrid(tuple(ids), np.array(xy, dtype=float))


def read_counts(path) -> ExpressionMatrix:
    genes, rows = [], []
    with _open(path) as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if not header or header[0].strip() != "gene":
            raise ParseError("first header column must be 'gene'", path, 1)
        spots = tuple(h.strip() for h in header[1:])
        if not spots:
            raise ParseError("no spot columns", path, 1)
        if len(set(spots)) != len(spots):
            raise ParseError("duplicate spot column", path, 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(spots) + 1:
                raise ParseError(f"expected {len(spots) + 1} fields, found {len(row)}", path, line)
            genes.append(row[0].strip())
            rows.append([_num(v, path, line) for v in row[1:]])
    if len(set(genes)) != len(genes):
        raise ParseError("duplicate gene name", path)
    values = np.array(rows, dtype=float).reshape(len(genes), len(spots))
    return ExpressionMatrix(tuple(genes), spots, values)


def load_dataset(counts_path, coords_path):
    """Load counts and coordinates, aligned to the coordinate file's spot order.

    Coordinate spots absent from the counts are dropped.  Genes with zero
    total expression are removed with a warning.
    """
    grid = read_coords(coords_path)
    expr = read_counts(counts_path)
    position = {s: j for j, s in enumerate(grid.spot_ids)}
    missing = [s for s in expr.spots if s not in position]
    if missing:
        raise UnknownSpot(f"{len(missing)} spot(s) not in coordinates, first: {missing[0]!r}")
    present = set(expr.spots)
    keep = np.array([j for j, s in enumerate(grid.spot_ids) if s in present])
    if len(keep) < grid.n:
        grid = grid.subset(keep)
    col = {s: j for j, s in enumerate(expr.spots)}
    order = np.array([col[s] for s in grid.spot_ids])
    expr = ExpressionMatrix(expr.genes, grid.spot_ids, expr.values[:, order])

    zero = np.abs(expr.values).sum(axis=1) == 0
    if zero.any():
        dropped = [g for g, z in zip(expr.genes, zero) if z]
        warnings.warn(f"dropping {len(dropped)} gene(s) with zero expression: {', '.join(dropped[:5])}",
                      StihcWarning, stacklevel=2)
        expr = expr.select_genes(~zero)
    if not expr.genes:
        raise EmptyAfterFilter("no genes left after dropping all-zero rows")
    return expr, grid


def write_counts(path, expr: ExpressionMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["gene", *expr.spots])
        for g, row in zip(expr.genes, expr.values):
            w.writerow([g, *(_int_or_float(v) for v in row)])


def _int_or_float(v):
    # counts stay readable; anything non-integral keeps full precision
    return str(int(v)) if float(v).is_integer() and abs(v) < 2**53 else fmt(v)


def write_coords(path, grid: SpotGrid):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id", "x", "y"])
        for s, (x, y) in zip(grid.spot_ids, grid.coords):
            w.writerow([s, fmt(x), fmt(y)])


def write_dataset(out_dir, expr, grid, truth=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_counts(out / "counts.tsv", expr)
    write_coords(out / "coords.csv", grid)
    if truth is not None:
        write_labels(out / "truth.csv", expr.genes, [truth[g] for g in expr.genes], "module")
    return out


def log1p_normalize(expr: ExpressionMatrix) -> ExpressionMatrix:
    if np.any(expr.values < 0):
        raise NegativeValue("log1p normalization needs nonnegative values")
    return ExpressionMatrix(expr.genes, expr.spots, np.log1p(expr.values))


# ---- small CSV tables -------------------------------------------------------


def write_labels(path, genes, labels, column="cluster"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene", column])
        for g, lab in zip(genes, labels):
            w.writerow([g, lab])


def read_labels(path):
    """Return ``{gene: label}`` from a two-column CSV with a ``gene`` header."""
    out = {}
    with _open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) != 2 or header[0].strip() != "gene":
            raise ParseError("header must be gene,<label>", path, 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, found {len(row)}", path, reader.line_num)
            gene = row[0].strip()
            if gene in out:
                raise ParseError(f"duplicate gene {gene!r}", path, reader.line_num)
            out[gene] = row[1].strip()
    return out


def write_coefficients(path, genes, C):
    C = np.asarray(C, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene", *(f"c_{k + 1}" for k in range(C.shape[1]))])
        for g, row in zip(genes, C):
            w.writerow([g, *(fmt(v) for v in row)])


def read_coefficients(path):
    genes, rows = [], []
    with _open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "gene" or len(header) < 2:
            raise ParseError("header must be gene,c_1,...", path, 1)
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", path, reader.line_num)
            genes.append(row[0].strip())
            rows.append([_num(v, path, reader.line_num) for v in row[1:]])
    return tuple(genes), np.array(rows, dtype=float).reshape(len(genes), len(header) - 1)


def write_diagnostics(path, diagnostics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "n_clusters", "mean_silhouette", "converged"])
        for d in diagnostics:
            w.writerow([fmt(d.alpha), d.n_clusters, fmt(d.mean_silhouette), int(bool(d.converged))])


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in metrics.items():
            w.writerow([name, value if isinstance(value, (int, np.integer)) else fmt(value)])


def write_lambda_table(path, sel):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "total_gcv", "selected"])
        for k, (lam, total) in enumerate(zip(sel.grid, sel.total_gcv)):
            w.writerow([fmt(lam), fmt(total), int(k == sel.index_opt)])


# ---- SVG ---------------------------------------------------------------------

# two-stop ramp: low -> pale yellow, high -> dark red
RAMP_LOW = (255, 247, 188)
RAMP_HIGH = (153, 0, 13)
SURFACE_RESOLUTION = 200
_CANVAS = 400.0
_MARGIN = 10.0


def ramp_color(t):
    t = float(np.clip(t, 0.0, 1.0))
    rgb = [round(lo + t * (hi - lo)) for lo, hi in zip(RAMP_LOW, RAMP_HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _normalize(values):
    lo, hi = float(np.min(values)), float(np.max(values))
    if not hi > lo:
        return np.zeros_like(values, dtype=float), lo, hi
    return (values - lo) / (hi - lo), lo, hi


class _Frame:
    def __init__(self, nodes):
        self.lo = nodes.min(axis=0)
        span = nodes.max(axis=0) - self.lo
        self.scale = (_CANVAS - 2 * _MARGIN) / max(float(span.max()), 1e-300)
        self.width = span[0] * self.scale + 2 * _MARGIN
        self.height = span[1] * self.scale + 2 * _MARGIN

    def xy(self, p):
        # flip y so the picture has y pointing up
        x = _MARGIN + (p[..., 0] - self.lo[0]) * self.scale
        y = self.height - _MARGIN - (p[..., 1] - self.lo[1]) * self.scale
        return x, y


def _svg_header(frame, title, lo, hi):
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{frame.width:.2f}" height="{frame.height:.2f}" '
        f'viewBox="0 0 {frame.width:.2f} {frame.height:.2f}">',
        f"<title>{title}</title>",
        f'<desc>min={lo:.6g} max={hi:.6g}</desc>',
    ]


def spot_svg(nodes, values, title="", radius=None):
    nodes = np.asarray(nodes, dtype=float)
    frame = _Frame(nodes)
    t, lo, hi = _normalize(np.asarray(values, dtype=float))
    if radius is None:
        from scipy.spatial import cKDTree

        d, _ = cKDTree(nodes).query(nodes, k=2) if len(nodes) > 1 else (np.ones((1, 2)), None)
        radius = 0.5 * float(np.median(d[:, 1])) * frame.scale
    x, y = frame.xy(nodes)
    out = _svg_header(frame, title, lo, hi)
    for xi, yi, ti in zip(x, y, t):
        out.append(f'<circle cx="{xi:.2f}" cy="{yi:.2f}" r="{radius:.2f}" fill="{ramp_color(ti)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def surface_svg(mesh, nodal_values, title="", resolution=SURFACE_RESOLUTION, inverse_link=None):
    """Raster of the piecewise-linear field over the hull; cells outside are left blank."""
    from .mesh import interpolate

    nodes = mesh.nodes
    frame = _Frame(nodes)
    lo_xy = nodes.min(axis=0)
    hi_xy = nodes.max(axis=0)
    xs = lo_xy[0] + (np.arange(resolution) + 0.5) / resolution * (hi_xy[0] - lo_xy[0])
    ys = lo_xy[1] + (np.arange(resolution) + 0.5) / resolution * (hi_xy[1] - lo_xy[1])
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    eta = interpolate(mesh, nodal_values, pts)
    inside = np.isfinite(eta)
    field = np.full_like(eta, np.nan)
    field[inside] = inverse_link(eta[inside]) if inverse_link else eta[inside]
    t = np.zeros_like(field)
    lo = hi = 0.0
    if inside.any():
        t[inside], lo, hi = _normalize(field[inside])
    cw = (hi_xy[0] - lo_xy[0]) / resolution * frame.scale
    ch = (hi_xy[1] - lo_xy[1]) / resolution * frame.scale
    x, y = frame.xy(pts)
    out = _svg_header(frame, title, lo, hi)
    for xi, yi, ti, ok in zip(x, y, t, inside):
        if ok:
            out.append(
                f'<rect x="{xi - cw / 2:.2f}" y="{yi - ch / 2:.2f}" width="{cw:.3f}" '
                f'height="{ch:.3f}" fill="{ramp_color(ti)}"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_cluster_means(mesh, C, partition, family, out_dir, surfaces=False, phi=None):
    """One SVG per cluster of ``g^-1(Phi mu_p)`` at the spots; optional surface raster.

    ``mu_p`` is the arithmetic mean of the member coefficient rows.  Returns
    the written paths in cluster order.
    """
    from .solver import get_family

    fam = get_family(family)
    C = np.asarray(C, dtype=float)
    if C.shape[1] != mesh.K:
        raise LengthMismatch(f"coefficients have {C.shape[1]} columns but the mesh has {mesh.K} nodes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for p, members in enumerate(partition.groups):
        mu = C[list(members)].mean(axis=0)
        eta = mu if phi is None else np.asarray(phi @ mu).ravel()
        title = f"cluster {p + 1} ({len(members)} genes)"
        path = out / f"cluster_{p + 1:03d}.svg"
        path.write_text(spot_svg(mesh.nodes, fam.linkinv(eta), title))
        paths.append(path)
        if surfaces:
            spath = out / f"cluster_{p + 1:03d}_surface.svg"
            spath.write_text(surface_svg(mesh, mu, title, inverse_link=fam.linkinv))
            paths.append(spath)
    return paths
