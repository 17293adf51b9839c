"""Command-line entry point: generate, sample, diagnose, study, lsqr.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import lsqr
from .config import ConfigError, RunConfig, load_config
from .diagnostics import PosteriorSummary, dic, summarize
from .experiment import build_experiment, hyper_priors, make_grid, prior_mean, run_inference
from .io import (
    FormatError,
    TraceWriter,
    file_digest,
    read_array,
    read_forward,
    read_json,
    read_trace,
    trace_to_csv,
    write_array,
    write_forward,
    write_json,
    write_vector_csv,
)
from .sampler import ChainSamples, HierarchicalModel, SamplerError
from .sparse import NotPositiveDefinite
from .study import NOISE_KINDS, SETUPS, STRUCTURES, run_study

log = logging.getLogger("bayestomo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class MismatchError(ConfigError):
    """Artifacts were produced by incompatible configurations."""


def _hashes(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "problem_hash": cfg.problem_hash()}


def _problem_dir(cfg: RunConfig, args) -> Path:
    return Path(args.problem) if getattr(args, "problem", None) else cfg.problem_path


def cmd_generate(cfg: RunConfig, args) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    exp = build_experiment(cfg)
    h = _hashes(cfg)
    exp.geometry.to_csv(out)
    exp.grid.nodes().to_csv(out / "nodes.csv")
    write_forward(out / "forward.bin", exp.problem, h)
    write_array(out / "y.bin", "y", exp.problem.y, h)
    truth_meta = {"kind": cfg.truth.kind, "eta_tr": cfg.truth.eta, "psi_tr": cfg.truth.psi,
                  "structure_tr": cfg.truth.structure}
    write_array(out / "beta_true.bin", "beta_true", exp.beta_true, h, **truth_meta)
    write_array(out / "beta_lsqr.bin", "beta_lsqr", exp.beta_lsqr, h)
    write_vector_csv(out / "beta_true.csv", {"beta_true": exp.beta_true})
    files = ["events.csv", "stations.csv", "paths.csv", "nodes.csv", "forward.bin", "y.bin",
             "beta_true.bin", "beta_lsqr.bin", "beta_true.csv"]
    manifest = {
        **h,
        "command": "generate",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "n_obs": exp.problem.n_obs,
        "dim": exp.problem.dim,
        "truth": truth_meta,
        "files": {f: file_digest(out / f) for f in files},
        "timings": {"seconds": round(time.perf_counter() - t0, 3)},
    }
    write_json(out / "generate_manifest.json", manifest)
    log.info("wrote %d observations, %d parameters to %s", exp.problem.n_obs, exp.problem.dim, out)
    return EXIT_OK


def _load_problem(cfg: RunConfig, pdir: Path):
    problem, header = read_forward(pdir / "forward.bin")
    if header["problem_hash"] != cfg.problem_hash():
        raise MismatchError(f"{pdir / 'forward.bin'} was generated by a different configuration "
                            f"(problem hash {header['problem_hash'][:12]} vs {cfg.problem_hash()[:12]})")
    y, yh = read_array(pdir / "y.bin")
    beta_lsqr, _ = read_array(pdir / "beta_lsqr.bin")
    if yh["problem_hash"] != header["problem_hash"]:
        raise MismatchError("y.bin and forward.bin come from different runs")
    return problem.with_data(y), beta_lsqr


def cmd_sample(cfg: RunConfig, args) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    problem, beta_lsqr = _load_problem(cfg, _problem_dir(cfg, args))
    grid = make_grid(cfg)
    stride = cfg.chain.trace_stride
    nodes = None if stride == 1 else np.concatenate(
        [np.arange(0, problem.d_usa, stride), np.arange(problem.d_usa, problem.dim)])
    header = {**_hashes(cfg), "structure": cfg.prior.structure, "model": cfg.model,
              "d_usa": problem.d_usa, "d_hyp": problem.d_hyp, "d_time": problem.d_time}
    t0 = time.perf_counter()
    writer = TraceWriter(out / "trace.bin", header, problem.dim, nodes)

    def sink(t, state, ll, lp):
        writer.write_draw(t, {"eta_usa": state.eta_usa, "phi": state.phi, "psi": state.psi,
                              "eta_hyp": state.eta_hyp, "eta_time": state.eta_time,
                              "loglik": ll, "logpost": lp}, state.beta)

    try:
        samples, _ = run_inference(cfg, grid, problem, beta_lsqr, sink=sink)
        writer.close({"psi_acceptance": samples.psi_acceptance, "proposal_sd": samples.proposal_sd})
    finally:
        writer.__exit__(None, None, None)
    elapsed = time.perf_counter() - t0
    if args.csv:
        trace_to_csv(read_trace(out / "trace.bin"), out / "trace.csv")
    manifest = {
        **_hashes(cfg),
        "command": "sample",
        "seed": cfg.seed,
        "chain_seed": int(samples.meta["seed"]),
        "structure": cfg.prior.structure,
        "neighborhood": cfg.prior.neighborhood_kwargs() if cfg.prior.structure else None,
        "schedule": {"iterations": cfg.chain.iterations, "burn_in": cfg.chain.burn_in,
                     "thinning": cfg.chain.thinning},
        "n_stored": len(samples),
        "psi_acceptance": None if np.isnan(samples.psi_acceptance) else samples.psi_acceptance,
        "proposal_sd": None if np.isnan(samples.proposal_sd) else samples.proposal_sd,
        "trace": {"file": "trace.bin", "sha256": file_digest(out / "trace.bin")},
        "timings": {"seconds": round(elapsed, 3),
                    "seconds_per_iteration": round(elapsed / cfg.chain.iterations, 6)},
    }
    write_json(out / "sample_manifest.json", manifest)
    log.info("stored %d draws in %s (%.1f s)", len(samples), out / "trace.bin", elapsed)
    return EXIT_OK


def _samples_from_trace(trace) -> ChainSamples:
    s = trace.scalars
    h = trace.header
    return ChainSamples(
        iteration=trace.iteration,
        beta=trace.beta,
        eta_usa=s["eta_usa"],
        phi=s["phi"],
        psi=s["psi"],
        loglik=s["loglik"],
        logpost=s["logpost"],
        eta_hyp=s["eta_hyp"] if h["d_hyp"] else None,
        eta_time=s["eta_time"] if h["d_time"] else None,
    )


def cmd_diagnose(cfg: RunConfig, args) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else out / "trace.bin"
    trace = read_trace(trace_path)
    pdir = _problem_dir(cfg, args)
    problem, beta_lsqr = _load_problem(cfg, pdir)
    th = trace.header
    if th["problem_hash"] != cfg.problem_hash() or th["dim"] != problem.dim:
        raise MismatchError(f"{trace_path} does not belong to the problem in {pdir}")
    if th["config_hash"] != cfg.config_hash():
        raise MismatchError(f"{trace_path} was sampled under a different configuration")
    if len(trace) == 0:
        raise FormatError(f"{trace_path} holds no draws")
    if not trace.complete:
        log.warning("%s has no closing record; summarising %d draws", trace_path, len(trace))

    reference = None
    if args.truth:
        reference, _ = read_array(args.truth)
    samples = _samples_from_trace(trace)
    full = trace.nodes.size == problem.dim
    beta0 = prior_mean(cfg, problem, beta_lsqr)
    model = HierarchicalModel(problem, hyper_priors(cfg, beta0), None)
    summary = summarize(samples, model=model if full else None, reference=reference if full else None)
    if not full:
        # subsampled trace: DIC from the closing record's posterior means
        if trace.complete and len(samples) >= 10:
            summary.dic, summary.p_d, summary.mean_deviance = dic(
                samples, model, beta_bar=trace.beta_mean, phi_bar=trace.phi_mean)
        if reference is not None:
            log.warning("trace is subsampled; model misfit not computed")
    summary.to_json(out / "summary.json")
    coords = make_grid(cfg).cell_centers()[trace.nodes[trace.nodes < problem.d_usa]]
    summary.to_csv(out / "summary.csv", coords)
    log.info("DIC %s, p_D %s from %d draws", summary.dic, summary.p_d, len(samples))
    return EXIT_OK


def cmd_study(cfg: RunConfig, args) -> int:
    seeds = args.seeds if args.seeds is not None else [cfg.seed]
    if not seeds:
        raise ConfigError("study needs at least one seed")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_study(cfg, args.setup, seeds, workers=args.workers, noise_kinds=args.noise,
                     structures=args.structures, out_csv=out / f"study_{args.setup}.csv")
    failed = sum(r["status"] != "ok" for r in rows)
    log.info("study %s: %d cells, %d failed", args.setup, len(rows), failed)
    return EXIT_OK


def cmd_lsqr(cfg: RunConfig, args) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    problem, _ = _load_problem(cfg, _problem_dir(cfg, args))
    damp = cfg.truth.lsqr_damp if args.damp is None else args.damp
    sol = lsqr(problem.X, problem.y, damp=damp, tol=args.tol)
    if not sol.converged:
        log.warning("lsqr did not converge in %d iterations", sol.iterations)
    b = sol.beta
    # same columns as the posterior summary, with the point estimate everywhere
    table = PosteriorSummary(mean=b, mode=b, lower=b, upper=b, ess=None, significant=np.zeros(b.size, bool))
    coords = make_grid(cfg).cell_centers()
    table.to_csv(out / "lsqr.csv", coords)
    write_json(out / "lsqr.json", {**_hashes(cfg), "damp": damp, "iterations": sol.iterations,
                                   "residual_norm": sol.residual_norm, "converged": sol.converged})
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "sample": cmd_sample,
    "diagnose": cmd_diagnose,
    "study": cmd_study,
    "lsqr": cmd_lsqr,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayestomo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, metavar="U64", help="override the run seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--workers", type=int, default=1, metavar="N", help="worker processes (study)")
    common.add_argument("--quiet", action="store_true", help="only report warnings and errors")

    sub.add_parser("generate", parents=[common], help="geometry, forward matrix and synthetic data")
    s = sub.add_parser("sample", parents=[common], help="run the MCMC chain")
    s.add_argument("--problem", metavar="DIR", help="directory with generated files")
    s.add_argument("--csv", action="store_true", help="also export the trace as CSV")
    d = sub.add_parser("diagnose", parents=[common], help="posterior summary of a trace")
    d.add_argument("--problem", metavar="DIR", help="directory with generated files")
    d.add_argument("--trace", metavar="PATH", help="trace file (default OUT/trace.bin)")
    d.add_argument("--truth", metavar="PATH", help="beta_true array file for the model misfit")
    st = sub.add_parser("study", parents=[common], help="Setup I/II scenario matrix")
    st.add_argument("--setup", choices=sorted(SETUPS), required=True)
    st.add_argument("--seeds", type=int, nargs="*", metavar="S")
    st.add_argument("--structures", type=int, nargs="+", default=list(STRUCTURES), choices=list(STRUCTURES))
    st.add_argument("--noise", nargs="+", default=list(NOISE_KINDS), choices=list(NOISE_KINDS))
    ls = sub.add_parser("lsqr", parents=[common], help="damped least-squares baseline")
    ls.add_argument("--problem", metavar="DIR", help="directory with generated files")
    ls.add_argument("--damp", type=float, help="damping (default truth.lsqr_damp)")
    ls.add_argument("--tol", type=float, default=1e-8)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(output=args.out)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NotPositiveDefinite, SamplerError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
