"""Turn a :class:`RunConfig` into a synthetic problem and run inference on it.

Each random ingredient (geometry, reference field, truth, noise, prior mean,
chain) draws from its own stream derived from the run seed, so changing
one section of the configuration leaves the other draws untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .baseline import lsqr
from .config import RunConfig
from .forward import (
    EventStationGeometry,
    ForwardProblem,
    NoiseSpec,
    VoxelGrid,
    assemble_forward,
    draw_beta_true,
    random_geometry,
    synthesize_data,
)
from .prior import PrecisionModel, structure_graph
from .sampler import ChainConfig, ChainSamples, GammaPrior, HierarchicalModel, HyperPriors, run_chain

log = logging.getLogger(__name__)

REFERENCE_NOISE_PRECISION = 0.4
REFERENCE_BLOBS = 6
REFERENCE_WIDTH_KM = 250.0


@dataclass
class Experiment:
    grid: VoxelGrid
    geometry: EventStationGeometry
    problem: ForwardProblem  # with synthetic y
    beta_true: np.ndarray  # full length (velocity block first)
    beta_lsqr: np.ndarray  # velocity block only


def make_grid(cfg: RunConfig) -> VoxelGrid:
    g = cfg.grid
    return VoxelGrid(tuple(int(n) for n in g.shape), tuple(g.cell_size), tuple(g.origin))


def make_geometry(cfg: RunConfig, grid: VoxelGrid) -> EventStationGeometry:
    g = cfg.geometry
    if g.from_files:
        return EventStationGeometry.from_csv(g.events, g.stations, g.paths)
    rng = np.random.default_rng(cfg.derived_seed("geometry"))
    return random_geometry(grid, g.n_events, g.n_stations, g.n_paths, rng)


def reference_field(grid: VoxelGrid, rng: np.random.Generator) -> np.ndarray:
    """Smooth synthetic velocity field: a sum of signed Gaussian bumps."""
    centers = grid.cell_centers()
    lo, hi = np.asarray(grid.origin, dtype=float), grid.extent
    field_ = np.zeros(grid.n_cells)
    for _ in range(REFERENCE_BLOBS):
        c = rng.uniform(lo, hi)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
        field_ += amp * np.exp(-np.sum((centers - c) ** 2, axis=1) / (2 * REFERENCE_WIDTH_KM**2))
    return field_


def lsqr_reference(cfg: RunConfig, grid: VoxelGrid, problem: ForwardProblem) -> np.ndarray:
    """Damped-LSQR estimate from data generated by the smooth reference field.

    Plays the role of a conventional tomographic solution that Setup I takes
    as the truth and Setup II uses as the centre of its truth distribution.
    """
    rng = np.random.default_rng(cfg.derived_seed("reference"))
    ref = reference_field(grid, rng)
    y_ref = synthesize_data(problem.X_usa, ref, NoiseSpec("gaussian", REFERENCE_NOISE_PRECISION,
                                                          seed=cfg.derived_seed("reference-noise")))
    sol = lsqr(problem.X_usa, y_ref, damp=cfg.truth.lsqr_damp, tol=1e-8)
    return sol.beta


def precision_model(cfg: RunConfig, grid: VoxelGrid, structure: int) -> PrecisionModel | None:
    if structure == 0:
        return None
    return PrecisionModel(structure_graph(grid.nodes(), structure, **cfg.prior.neighborhood_kwargs()))


def make_truth(cfg: RunConfig, grid: VoxelGrid, problem: ForwardProblem, beta_lsqr: np.ndarray) -> np.ndarray:
    t = cfg.truth
    rng = np.random.default_rng(cfg.derived_seed("truth"))
    if t.kind == "setup1":
        usa = beta_lsqr.copy()
    else:
        center = beta_lsqr if t.center == "lsqr" else np.zeros(grid.n_cells)
        pm = precision_model(cfg, grid, t.structure)
        if pm is None:
            usa = center + rng.standard_normal(grid.n_cells) / np.sqrt(t.eta)
        else:
            usa = draw_beta_true(pm, t.eta, t.psi, center, rng)
    parts = [usa]
    if problem.model == "model2":
        parts.append(rng.standard_normal(problem.d_hyp) / np.sqrt(t.hyp_precision))
        parts.append(rng.standard_normal(problem.d_time) / np.sqrt(t.time_precision))
    return np.concatenate(parts)


def noise_spec(cfg: RunConfig) -> NoiseSpec:
    n = cfg.noise
    return NoiseSpec(n.kind, n.precision, n.dof, seed=cfg.derived_seed("noise"))


def build_experiment(cfg: RunConfig) -> Experiment:
    grid = make_grid(cfg)
    geometry = make_geometry(cfg, grid)
    problem = assemble_forward(grid, geometry, cfg.model, cfg.reference_velocity)
    beta_lsqr = lsqr_reference(cfg, grid, problem)
    beta_true = make_truth(cfg, grid, problem, beta_lsqr)
    y = synthesize_data(problem.X, beta_true, noise_spec(cfg))
    return Experiment(grid, geometry, problem.with_data(y), beta_true, beta_lsqr)


def prior_mean(cfg: RunConfig, problem: ForwardProblem, beta_lsqr: np.ndarray) -> np.ndarray:
    """beta0 for inference, built as ``hyperpriors.beta0`` says.

    Source-correction blocks of Model 2 always get a zero prior mean.
    """
    mode = cfg.hyperpriors.beta0
    u = problem.d_usa
    if mode == "zero":
        usa = np.zeros(u)
    elif mode == "lsqr":
        usa = beta_lsqr.copy()
    elif mode == "lsqr_perturbed":
        rng = np.random.default_rng(cfg.derived_seed("beta0"))
        usa = beta_lsqr + cfg.hyperpriors.beta0_sd * rng.standard_normal(u)
    else:  # truth_center
        usa = np.zeros(u) if (cfg.truth.kind == "setup2" and cfg.truth.center == "zero") else beta_lsqr.copy()
    return np.concatenate([usa, np.zeros(problem.dim - u)])


def hyper_priors(cfg: RunConfig, beta0: np.ndarray) -> HyperPriors:
    h = cfg.hyperpriors
    return HyperPriors(
        eta_usa=GammaPrior(*h.eta_usa),
        eta_hyp=GammaPrior(*h.eta_hyp),
        eta_time=GammaPrior(*h.eta_time),
        phi=GammaPrior(*h.phi),
        psi_mean=h.psi_mean,
        psi_sd=h.psi_sd,
        beta0=beta0,
    )


def chain_config(cfg: RunConfig) -> ChainConfig:
    c = cfg.chain
    return ChainConfig(
        iterations=c.iterations,
        burn_in=c.burn_in,
        thinning=c.thinning,
        seed=cfg.derived_seed("chain"),
        structure=cfg.prior.structure,
        model=cfg.model,
        initial_proposal_sd=c.initial_proposal_sd,
        target_acceptance=c.target_acceptance,
        adapt=c.adapt,
    )


def run_inference(cfg: RunConfig, grid: VoxelGrid, problem: ForwardProblem, beta_lsqr: np.ndarray,
                  sink=None) -> tuple[ChainSamples, HierarchicalModel]:
    """Run the chain for ``cfg.prior.structure`` on ``problem``."""
    beta0 = prior_mean(cfg, problem, beta_lsqr)
    priors = hyper_priors(cfg, beta0)
    pm = precision_model(cfg, grid, cfg.prior.structure)
    model = HierarchicalModel(problem, priors, pm)
    samples = run_chain(chain_config(cfg), problem, priors, pm, model=model, sink=sink)
    return samples, model
