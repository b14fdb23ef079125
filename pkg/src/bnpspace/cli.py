"""Command line entry points: simulate, fit, select-d, summarize, evaluate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import numba
import scipy

from . import __version__
from .config import ConfigError, RunConfig, SimConfig
from .data import (DENSE_CSV, CountMatrix, SPARSE_MTX, DataError, build_adjacency, compute_size_factors, load_coords,
                   load_counts, quality_control, write_coords, write_counts)
from .io import (fmt, read_labels, read_matrix, read_table, read_vector, write_labels, write_matrix,
                 write_ppm, write_table, write_vector)
from .metrics import ari, auc, confusion_metrics
from .posterior import merge_domains, summarize
from .sampler import run_chain
from .selection import select_d
from .simulation import simulate, simulate_on_layout

logger = logging.getLogger("bnpspace")

DENSE_PPM_MAX_N = 5000


class CommandError(RuntimeError):
    pass


def _versions() -> dict:
    return {"bnpspace": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": sys.version.split()[0]}


def _write_manifest(out: Path, command: str, config: dict, digest: str, seed: int, extra=None) -> None:
    manifest = {"command": command, "seed": seed, "config_hash": digest, "config": config,
                "versions": _versions()}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"cannot write to output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _read_layout(path):
    header, rows = read_table(path)
    try:
        ids = [r[0] for r in rows]
        coords = np.array([[float(r[1]), float(r[2])] for r in rows])
        labels = [r[3] for r in rows]
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: expected spot_id,x,y,label rows") from exc
    _, z = np.unique(labels, return_inverse=True)
    return ids, coords, z


def _simulate_one(args):
    cfg, rep, seed, out = args
    if cfg.pattern == "IV":
        ids, coords, z = _read_layout(cfg.layout)
        ds = simulate_on_layout(z, coords, int(z.max()) + 1, cfg.p, cfg.p_gamma, cfg.pi, seed)
        spot_ids = ids
    else:
        ds = simulate(cfg.scenario(seed))
        spot_ids = ds.counts.spot_ids
    counts = CountMatrix(ds.counts.values, spot_ids, ds.counts.gene_ids)
    rep_dir = out / f"rep{rep:03d}"
    rep_dir.mkdir(parents=True, exist_ok=True)
    genes = counts.gene_ids
    write_counts(counts, rep_dir / "counts.csv")
    write_coords(rep_dir / "coords.csv", spot_ids, ds.coords)
    write_labels(rep_dir / "z_true.csv", spot_ids, ds.z_true)
    write_vector(rep_dir / "gamma_true.csv", genes, ds.gamma_true, "gene_id", "gamma", integer=True)
    K = ds.mu_star_true.shape[0]
    write_matrix(rep_dir / "mu_star_true.csv", range(1, K + 1), genes, ds.mu_star_true, corner="domain")
    write_vector(rep_dir / "mu0_true.csv", genes, ds.mu0_true, "gene_id", "mu0")
    write_vector(rep_dir / "s_true.csv", spot_ids, ds.s_true, "spot_id", "s")
    write_matrix(rep_dir / "r_true.csv", spot_ids, genes, ds.r_true.astype(np.int64), corner="spot_id")
    return rep_dir


def cmd_simulate(cfg: SimConfig) -> list:
    out = _prepare_out(cfg.out)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.replicates)]
    jobs = [(cfg, rep + 1, seed, out) for rep, seed in enumerate(seeds)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            dirs = list(pool.map(_simulate_one, jobs))
    else:
        dirs = [_simulate_one(job) for job in jobs]
    config = cfg.to_dict()
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    _write_manifest(out, "simulate", config, digest, cfg.seed,
                    {"replicate_seeds": {d.name: s for d, s in zip(dirs, seeds)}})
    return dirs


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _count_format(cfg: RunConfig) -> str:
    if cfg.counts_format:
        return cfg.counts_format
    return SPARSE_MTX if str(cfg.counts).endswith(".mtx") else DENSE_CSV


def _load_inputs(cfg: RunConfig):
    if not cfg.counts or not cfg.coords:
        raise ConfigError("both 'counts' and 'coords' must be given")
    counts = load_counts(cfg.counts, _count_format(cfg), cfg.spots, cfg.genes)
    if cfg.qc:
        counts = quality_control(counts, cfg.min_spot_total, cfg.max_gene_zero_prop,
                                 cfg.min_gene_max, cfg.gene_rule)
    coords = load_coords(cfg.coords, counts.spot_ids)
    graph = build_adjacency(coords, cfg.neighbor_threshold)
    return counts, compute_size_factors(counts), graph


def _write_fit(out: Path, counts, sf, trace, summary) -> None:
    spots, genes = counts.spot_ids, counts.gene_ids
    write_vector(out / "ppi.csv", genes, summary.ppi, "gene_id", "ppi")
    write_vector(out / "gamma_hat.csv", genes, summary.gamma_hat, "gene_id", "gamma", integer=True)
    write_vector(out / "gamma_map.csv", genes, summary.gamma_map, "gene_id", "gamma", integer=True)
    write_labels(out / "z_map.csv", spots, summary.z_map)
    write_labels(out / "z_ppm.csv", spots, summary.z_ppm)
    if counts.n <= DENSE_PPM_MAX_N:
        write_matrix(out / "ppm.csv", spots, spots, summary.ppm, corner="spot_id")
    else:
        write_ppm(out / "ppm_sparse.csv", spots, summary.ppm)
    write_matrix(out / "mu_hat.csv", range(1, summary.k_hat + 1), genes, summary.mu_hat, corner="domain")
    write_vector(out / "mu0_hat.csv", genes, summary.mu0_hat, "gene_id", "mu0")
    if summary.r_hat is not None:
        write_matrix(out / "r_hat.csv", spots, genes, summary.r_hat, corner="spot_id")
    write_vector(out / "size_factors.csv", spots, sf.s, "spot_id", "s")
    write_table(out / "loglik_trace.csv", ["iteration", "loglik"],
                ([i + 1, fmt(v)] for i, v in enumerate(trace.loglik)))
    write_table(out / "k_trace.csv", ["iteration", "K"],
                ([i + 1, int(v)] for i, v in enumerate(trace.k_trace)))


def cmd_fit(cfg: RunConfig) -> Path:
    out = _prepare_out(cfg.out)
    counts, sf, graph = _load_inputs(cfg)
    logger.info("fitting n=%d spots, p=%d genes, %d neighbor pairs, d=%g",
                counts.n, counts.p, graph.n_edges, cfg.d)
    trace = run_chain(counts, sf, graph, cfg.hyperparams(), cfg.mfm(), cfg.mcmc())
    summary = summarize(trace, cfg.selection, cfg.bfdr_level)
    _write_fit(out, counts, sf, trace, summary)
    _write_manifest(out, "fit", cfg.to_dict(), cfg.digest(), cfg.seed,
                    {"n_spots": counts.n, "n_genes": counts.p, "k_hat": summary.k_hat,
                     "gamma_threshold": summary.gamma_threshold})
    return out


def cmd_select_d(cfg: RunConfig):
    out = _prepare_out(cfg.out)
    counts, sf, graph = _load_inputs(cfg)
    mcmc = replace(cfg.mcmc(), record_r=True)
    best, records = select_d(counts, sf, graph, cfg.grid, cfg.hyperparams(), cfg.mfm(), mcmc, cfg.threads)
    write_table(out / "pbic.csv", ["d", "pbic", "k_hat", "p_gamma_hat", "loglik", "status"],
                ([fmt(r.d), fmt(r.pbic), r.k_hat, r.p_gamma_hat, fmt(r.loglik_at_estimates),
                  "failed: " + r.error if r.failed else "ok"] for r in records))
    _write_manifest(out, "select-d", cfg.to_dict(), cfg.digest(), cfg.seed, {"selected_d": best})
    return best, records


# ---------------------------------------------------------------------------
# summarize / evaluate
# ---------------------------------------------------------------------------

def cmd_summarize(fit_dir, k_targets, linkage: str = "average") -> list:
    fit_dir = Path(fit_dir)
    spots, z = read_labels(fit_dir / "z_ppm.csv")
    _, gamma = read_vector(fit_dir / "gamma_hat.csv")
    _, _, mu_hat = read_matrix(fit_dir / "mu_hat.csv")
    written = []
    for k in k_targets:
        merged = merge_domains(mu_hat, gamma.astype(np.uint8), z - 1, int(k), linkage)
        path = fit_dir / f"z_merged_K{int(k)}.csv"
        write_labels(path, spots, merged)
        written.append(path)
    return written


def _aligned(ids_a, ids_b, what: str) -> None:
    if list(ids_a) != list(ids_b):
        raise DataError(f"{what} ids differ between truth and estimate (order or content)")


def cmd_evaluate(truth_dir, fit_dir, out_path=None, labels: str = "z_ppm") -> dict:
    truth_dir, fit_dir = Path(truth_dir), Path(fit_dir)
    t_spots, z_true = read_labels(truth_dir / "z_true.csv")
    e_spots, z_hat = read_labels(fit_dir / f"{labels}.csv")
    _aligned(t_spots, e_spots, "spot")
    t_genes, g_true = read_vector(truth_dir / "gamma_true.csv")
    e_genes, g_hat = read_vector(fit_dir / "gamma_hat.csv")
    p_genes, ppi = read_vector(fit_dir / "ppi.csv")
    _aligned(t_genes, e_genes, "gene")
    _aligned(t_genes, p_genes, "gene")
    sens, spec, mcc = confusion_metrics(g_true.astype(int), g_hat.astype(int))
    result = {"ari": ari(z_true, z_hat), "k_hat": len(np.unique(z_hat)), "sensitivity": sens, "specificity": spec, "mcc": mcc,
              "auc": auc(g_true.astype(int), ppi)}
    out_path = Path(out_path) if out_path else fit_dir / "metrics.csv"
    write_table(out_path, ["metric", "value"], ([k, fmt(v)] for k, v in result.items()))
    return result


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    data = RunConfig.from_file(args.config).to_dict() if args.config else {}
    overrides = {"out": args.out, "seed": args.seed, "threads": args.threads, "d": args.d,
                 "iterations": args.iterations, "burn_in": args.burn_in, "bfdr_level": args.bfdr_level,
                 "counts": args.counts, "coords": args.coords}
    if getattr(args, "grid", None):
        overrides["grid"] = args.grid
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.bfdr_level is not None:
        data["selection"] = "bfdr"
    return RunConfig.from_dict(data)


def _add_common(p, fit: bool = True) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    if fit:
        p.add_argument("--counts", help="count matrix (dense csv or .mtx)")
        p.add_argument("--coords", help="spot coordinates csv (spot_id,x,y)")
        p.add_argument("--d", type=float, help="MRF coupling")
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in")
        p.add_argument("--bfdr-level", type=float, dest="bfdr_level",
                       help="select DGs by Bayesian FDR at this level instead of the median model")


def _grid(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use comma-separated numbers") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnpspace", description=__doc__)
    parser.add_argument("--version", action="version", version=f"bnpspace {__version__}")
    verbosity = argparse.ArgumentParser(add_help=False)
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[verbosity], help="generate replicate datasets")
    _add_common(p, fit=False)
    p.add_argument("--replicates", type=int)
    p.add_argument("--pattern", choices=["I", "II", "III", "IV"])
    p.add_argument("--layout", help="spot_id,x,y,label file for pattern IV")

    p = sub.add_parser("fit", parents=[verbosity], help="run the sampler and write point estimates")
    _add_common(p)

    p = sub.add_parser("select-d", parents=[verbosity], help="choose d by pBIC over a grid")
    _add_common(p)
    p.add_argument("--grid", type=_grid, help="comma-separated d values")

    p = sub.add_parser("summarize", parents=[verbosity], help="merge estimated domains to K groups")
    p.add_argument("fit_dir")
    p.add_argument("--k-target", dest="k_target", type=int, nargs="+", required=True)
    p.add_argument("--linkage", default="average", choices=["average", "single", "complete"])

    p = sub.add_parser("evaluate", parents=[verbosity], help="compare estimates with simulation truth")
    p.add_argument("truth_dir")
    p.add_argument("fit_dir")
    p.add_argument("--out", help="metrics csv path (default FIT_DIR/metrics.csv)")
    p.add_argument("--labels", default="z_ppm", choices=["z_ppm", "z_map"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            data = SimConfig.from_file(args.config).to_dict() if args.config else {}
            for key in ("out", "seed", "threads", "replicates", "pattern", "layout"):
                if getattr(args, key) is not None:
                    data[key] = getattr(args, key)
            for d in cmd_simulate(SimConfig.from_dict(data)):
                print(d)
        elif args.command == "fit":
            print(cmd_fit(_run_config(args)))
        elif args.command == "select-d":
            best, _ = cmd_select_d(_run_config(args))
            print(f"selected d = {best:g}")
        elif args.command == "summarize":
            for path in cmd_summarize(args.fit_dir, args.k_target, args.linkage):
                print(path)
        elif args.command == "evaluate":
            for k, v in cmd_evaluate(args.truth_dir, args.fit_dir, args.out, args.labels).items():
                print(f"{k},{fmt(v)}")
    except (ConfigError, DataError, CommandError, ValueError, FloatingPointError, RuntimeError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"bnpspace {args.command}: error ({module}): {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
