"""Command-line interface.

Subcommands: simulate, fit, cluster, eval, render, pipeline.  Settings come
from built-in defaults, then an optional JSON config file (``--config``),
then explicit command-line flags.  The resolved configuration is written
next to the outputs as ``config.json`` and can be fed back with ``--config``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 internal limit.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .errors import InputError, LengthMismatch, ParseError, StihcError
from .fem import BOUNDARY_MODES, assemble
from .ihc import ClusterConfig, make_partition, spearman_distance, stihc_cluster
from .mesh import SpotGrid, build_delaunay
from .metrics import adjusted_rand_index, davies_bouldin, mean_silhouette
from .solver import DEFAULT_LAMBDA_RANGE, default_lambda_grid, get_family, select_lambda
from .synth import SCENARIO_SIZES, Scenario, generate_dataset


def available_threads():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


@dataclass
class RunConfig:
    family: str = "gaussian"
    normalize: str = "log1p"
    boundary: str = "free"
    lambda_size: int = 20
    lambda_lo: float = DEFAULT_LAMBDA_RANGE[0]
    lambda_hi: float = DEFAULT_LAMBDA_RANGE[1]
    lambdas: list = None  # explicit grid (absolute values), overrides the three above
    U: int = 20
    max_inner_iterations: int = 100
    seed: int = 0
    threads: int = None
    surfaces: bool = False
    render: bool = True
    counts: str = None
    coords: str = None
    truth: str = None
    out: str = None

    def validate(self):
        get_family(self.family)
        if self.normalize not in ("log1p", "none"):
            raise InputError(f"normalize must be 'log1p' or 'none', got {self.normalize!r}")
        if self.boundary not in BOUNDARY_MODES:
            raise InputError(f"boundary must be one of {BOUNDARY_MODES}")
        if self.family == "poisson" and self.normalize != "none":
            raise InputError("the poisson family models raw counts; use normalize='none'")
        if self.lambdas is not None:
            grid = np.asarray(self.lambdas, dtype=float)
            if grid.ndim != 1 or len(grid) == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
                raise InputError("lambdas must be a nonempty, strictly increasing list of positive values")
        elif not (self.lambda_size >= 1 and 0 < self.lambda_lo <= self.lambda_hi):
            raise InputError("lambda grid needs size >= 1 and 0 < lo <= hi")
        if self.threads is not None and self.threads < 1:
            raise InputError("threads must be at least 1")
        ClusterConfig(U=self.U, max_inner_iterations=self.max_inner_iterations)
        return self

    def cluster_config(self):
        return ClusterConfig(U=self.U, max_inner_iterations=self.max_inner_iterations,
                             threads=self.threads or 1)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("config file not found", path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(data, dict):
        raise ParseError("config must be a JSON object", path)
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}")
    return data


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    if cfg.threads is None:
        cfg.threads = available_threads()
    return cfg.validate()


# ---- library-level steps ----------------------------------------------------


@dataclass
class FitOutput:
    expr: sio.ExpressionMatrix
    grid: SpotGrid
    mesh: object
    selection: object
    coefficients: np.ndarray


def lambda_grid(cfg, P, n):
    if cfg.lambdas is not None:
        return np.asarray(cfg.lambdas, dtype=float)
    return default_lambda_grid(P, n, cfg.lambda_size, cfg.lambda_lo, cfg.lambda_hi)


def fit_dataset(expr, grid, cfg) -> FitOutput:
    data = sio.log1p_normalize(expr) if cfg.normalize == "log1p" else expr
    mesh = build_delaunay(grid)
    P = assemble(mesh, boundary=cfg.boundary).penalty
    sel, C = select_lambda(None, P, data.values, cfg.family, lambda_grid(cfg, P, grid.n),
                           genes=list(expr.genes), threads=cfg.threads or 1)
    return FitOutput(expr, grid, mesh, sel, C)


def evaluate(labels, C, truth_labels=None, D=None):
    """Metrics for a partition: ARI (when truth is given), DBI and mean silhouette."""
    labels = np.asarray(labels)
    out = {}
    if truth_labels is not None:
        out["ari"] = adjusted_rand_index(labels, truth_labels)
    n_clusters = len(np.unique(labels))
    out["n_clusters"] = n_clusters
    if 1 < n_clusters:
        out["dbi"] = davies_bouldin(C, labels)
        D = spearman_distance(C).values if D is None else D
        out["mean_silhouette"] = mean_silhouette(D, labels)
    return out


def _align(genes, mapping, what):
    missing = [g for g in genes if g not in mapping]
    extra = [g for g in mapping if g not in set(genes)]
    if missing or extra:
        raise LengthMismatch(
            f"{what} gene set differs: {len(missing)} missing, {len(extra)} extra"
            + (f" (e.g. {(missing or extra)[0]!r})" if missing or extra else "")
        )
    return [mapping[g] for g in genes]


def _cluster_names(partition):
    return [f"C{lab + 1}" for lab in partition.labels]


def _print_metrics(metrics, stream=None):
    stream = stream or sys.stdout
    for k, v in metrics.items():
        print(f"{k}\t{v:.6g}" if isinstance(v, float) else f"{k}\t{v}", file=stream)


# ---- subcommands ------------------------------------------------------------


def cmd_simulate(args):
    scenario = Scenario(args.scenario, seed=args.seed, noise=args.noise, dispersion=args.dispersion,
                        n_keep=args.n_keep)
    expr, grid, truth = generate_dataset(scenario)
    sio.write_dataset(args.out, expr, grid, truth)
    print(f"wrote {len(expr.genes)} genes x {grid.n} spots to {args.out}")
    return 0


def cmd_fit(args):
    cfg = resolve_config(args)
    expr, grid = sio.load_dataset(cfg.counts, cfg.coords)
    fit = fit_dataset(expr, grid, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.write_coefficients(out / "coefficients.csv", expr.genes, fit.coefficients)
    sio.write_lambda_table(out / "lambda.csv", fit.selection)
    (out / "config.json").write_text(cfg.to_json())
    print(f"lambda_opt\t{fit.selection.lambda_opt:.6g}")
    return 0


def cmd_cluster(args):
    cfg = resolve_config(args)
    genes, C = sio.read_coefficients(args.coefficients)
    result = stihc_cluster(C, cfg.cluster_config())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.write_labels(out / "clusters.csv", genes, _cluster_names(result.partition))
    sio.write_diagnostics(out / "diagnostics.csv", result.diagnostics)
    print(f"alpha_opt\t{result.alpha_opt:.6g}\nn_clusters\t{result.partition.n_clusters}")
    return 0


def cmd_eval(args):
    pred = sio.read_labels(args.pred)
    genes = tuple(pred)
    labels = [pred[g] for g in genes]
    truth = _align(genes, sio.read_labels(args.truth), "truth") if args.truth else None
    if args.coefficients:
        cgenes, C = sio.read_coefficients(args.coefficients)
        row = {g: i for i, g in enumerate(cgenes)}
        C = C[_align(genes, row, "coefficient")]
        metrics = evaluate(labels, C, truth)
    elif truth is not None:
        metrics = {"ari": adjusted_rand_index(labels, truth)}
    else:
        raise InputError("eval needs --truth and/or --coefficients")
    if args.out:
        sio.write_metrics(args.out, metrics)
    _print_metrics(metrics)
    return 0


def cmd_render(args):
    cfg = resolve_config(args)
    grid = sio.read_coords(cfg.coords)
    genes, C = sio.read_coefficients(args.coefficients)
    labels = _align(genes, sio.read_labels(args.clusters), "cluster")
    names = sorted(set(labels), key=lambda s: (len(s), s))
    index = {name: k for k, name in enumerate(names)}
    groups = [[] for _ in names]
    for i, lab in enumerate(labels):
        groups[index[lab]].append(i)
    partition = make_partition(C, groups)
    mesh = build_delaunay(grid)
    paths = sio.render_cluster_means(mesh, C, partition, cfg.family, cfg.out, surfaces=cfg.surfaces)
    print(f"wrote {len(paths)} figure(s) to {cfg.out}")
    return 0


def run_pipeline(cfg: RunConfig):
    """Run the full workflow in memory; returns a dict of outputs (nothing is written)."""
    expr, grid = sio.load_dataset(cfg.counts, cfg.coords)
    truth = None
    if cfg.truth:
        truth = _align(expr.genes, sio.read_labels(cfg.truth), "truth")
    fit = fit_dataset(expr, grid, cfg)
    result = stihc_cluster(fit.coefficients, cfg.cluster_config())
    metrics = {"lambda_opt": fit.selection.lambda_opt, "alpha_opt": result.alpha_opt}
    metrics.update(evaluate(result.labels, fit.coefficients, truth, result.distance.values))
    return {"fit": fit, "result": result, "metrics": metrics}


def write_pipeline(cfg, run):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fit, result = run["fit"], run["result"]
    genes = fit.expr.genes
    (out / "config.json").write_text(cfg.to_json())
    sio.write_labels(out / "clusters.csv", genes, _cluster_names(result.partition))
    sio.write_diagnostics(out / "diagnostics.csv", result.diagnostics)
    sio.write_coefficients(out / "coefficients.csv", genes, fit.coefficients)
    sio.write_lambda_table(out / "lambda.csv", fit.selection)
    sio.write_metrics(out / "metrics.csv", run["metrics"])
    if cfg.render:
        sio.render_cluster_means(fit.mesh, fit.coefficients, result.partition, cfg.family,
                                 out / "figures", surfaces=cfg.surfaces)


def cmd_pipeline(args):
    cfg = resolve_config(args)
    run = run_pipeline(cfg)
    write_pipeline(cfg, run)
    _print_metrics(run["metrics"])
    return 0


# ---- argument parsing -------------------------------------------------------


def _add_common(p, *, inputs=False, model=False, clustering=False):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--threads", type=int, help="worker threads (default: available CPUs)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output directory")
    if inputs:
        p.add_argument("--counts", help="counts TSV (gene column + one column per spot)")
        p.add_argument("--coords", help="coordinates CSV (spot_id,x,y)")
    if model:
        p.add_argument("--family", choices=("gaussian", "poisson"))
        p.add_argument("--normalize", choices=("log1p", "none"))
        p.add_argument("--boundary", choices=BOUNDARY_MODES)
        p.add_argument("--lambda-size", dest="lambda_size", type=int)
        p.add_argument("--lambda-lo", dest="lambda_lo", type=float, help="grid start, times n/trace(P)")
        p.add_argument("--lambda-hi", dest="lambda_hi", type=float, help="grid end, times n/trace(P)")
        p.add_argument("--lambdas", type=lambda s: [float(v) for v in s.split(",")],
                       help="explicit comma-separated lambda grid")
    if clustering:
        p.add_argument("--U", dest="U", type=int, help="alpha grid size")
        p.add_argument("--max-inner-iterations", dest="max_inner_iterations", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="stihc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--version", action="version", version=f"stihc {__version__}")
        return p

    p = add("simulate", "generate a synthetic dataset with planted modules")
    p.add_argument("--scenario", choices=sorted(SCENARIO_SIZES), default="balanced")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", choices=("nb", "poisson"), default="nb")
    p.add_argument("--dispersion", type=float, default=10.0)
    p.add_argument("--n-keep", dest="n_keep", type=int, help="subsample this many spots")
    p.add_argument("--threads", type=int, help="accepted for uniformity; generation is serial")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = add("fit", "fit penalized spatial regressions and select lambda by GCV")
    _add_common(p, inputs=True, model=True)
    p.set_defaults(func=cmd_fit)

    p = add("cluster", "cluster coefficient rows")
    _add_common(p, clustering=True)
    p.add_argument("--coefficients", required=True)
    p.set_defaults(func=cmd_cluster)

    p = add("eval", "compare predicted clusters with truth and report quality metrics")
    p.add_argument("--pred", required=True, help="clusters CSV (gene,cluster)")
    p.add_argument("--truth", help="truth CSV (gene,module)")
    p.add_argument("--coefficients", help="coefficients CSV for DBI and silhouette")
    p.add_argument("--out", help="write metrics CSV here")
    p.set_defaults(func=cmd_eval)

    p = add("render", "draw SVG figures of cluster mean patterns")
    _add_common(p)
    p.add_argument("--coords", help="coordinates CSV (spot_id,x,y)")
    p.add_argument("--coefficients", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--family", choices=("gaussian", "poisson"))
    p.add_argument("--surfaces", action="store_true", default=None)
    p.set_defaults(func=cmd_render)

    p = add("pipeline", "load, fit, cluster, evaluate and render in one go")
    _add_common(p, inputs=True, model=True, clustering=True)
    p.add_argument("--truth", help="truth CSV (gene,module); enables ARI")
    p.add_argument("--surfaces", action="store_true", default=None)
    p.add_argument("--no-render", dest="render", action="store_false", default=None)
    p.set_defaults(func=cmd_pipeline)
    return parser


_REQUIRED = {
    "fit": ("counts", "coords", "out"),
    "pipeline": ("counts", "coords", "out"),
    "cluster": ("out",),
    "render": ("coords", "out"),
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        for key in _REQUIRED.get(args.command, ()):
            if getattr(args, key, None) is None and not (
                getattr(args, "config", None) and key in load_config(args.config)
            ):
                raise InputError(f"--{key} is required")
        return args.func(args)
    except StihcError as exc:
        print(f"stihc {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
