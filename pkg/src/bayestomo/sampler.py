"""Metropolis-within-Gibbs sampler for the hierarchical linear model.

Model::

    y | beta, phi        ~ N(X beta, I / phi)
    beta | eta, psi      ~ N(beta0, Sigma),
    Sigma^-1             = eta_usa Q(psi) (+) eta_hyp I (+) eta_time I
    eta_*, phi           ~ Gamma(shape, rate)
    psi                  ~ N(mu, sd^2) truncated to psi > 0

One sweep updates beta as a block from its Gaussian full conditional, then
the precisions from their Gamma full conditionals, then psi with a
truncated-normal random-walk Metropolis-Hastings step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, log_ndtr

from .forward import ForwardProblem
from .prior import PrecisionModel
from .sparse import (
    NotPositiveDefinite,
    SparseSymMatrix,
    SymbolicCholesky,
    amd_order,
    sample_from_factor,
    solve,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAX_CONSECUTIVE_FAILURES = 10


class SamplerError(RuntimeError):
    """Repeated numerical failure inside the chain."""


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError("Gamma shape and rate must be positive")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    def logpdf(self, x: float) -> float:
        a, b = self.shape, self.rate
        return a * math.log(b) - gammaln(a) + (a - 1) * math.log(x) - b * x


@dataclass(frozen=True)
class HyperPriors:
    eta_usa: GammaPrior = GammaPrior(10.0, 2.0)
    eta_hyp: GammaPrior = GammaPrior(1.0, 5.0)
    eta_time: GammaPrior = GammaPrior(10.0, 2.0)
    phi: GammaPrior = GammaPrior(1.0, 0.1)
    psi_mean: float = 10.0
    psi_sd: float = 0.2
    beta0: np.ndarray | None = None  # full-length prior mean; zeros if None

    def __post_init__(self):
        if not self.psi_sd > 0:
            raise ValueError("psi_sd must be positive")

    def beta0_for(self, dim: int) -> np.ndarray:
        if self.beta0 is None:
            return np.zeros(dim)
        b0 = np.asarray(self.beta0, dtype=float)
        if b0.shape != (dim,):
            raise ValueError(f"beta0 has length {b0.size}, expected {dim}")
        return b0


@dataclass
class ChainState:
    beta: np.ndarray
    eta_usa: float
    phi: float
    psi: float
    eta_hyp: float | None = None
    eta_time: float | None = None
    iteration: int = 0
    psi_accepted: int = 0
    psi_proposed: int = 0

    def copy(self) -> "ChainState":
        return replace(self, beta=self.beta.copy())


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 3000
    burn_in: int = 1500  # raw iterations discarded before thinning starts
    thinning: int = 15
    seed: int = 0
    structure: int = 1
    model: str = "model1"
    initial_proposal_sd: float = 0.2
    target_acceptance: float = 0.35
    adapt: bool = True

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.structure not in range(5):
            raise ValueError("structure must be 0-4")
        if self.model not in ("model1", "model2"):
            raise ValueError(f"unknown model {self.model!r}")
        if not self.initial_proposal_sd > 0:
            raise ValueError("initial_proposal_sd must be positive")

    @classmethod
    def from_thinned_burn_in(cls, iterations: int, thinning: int, burn_in_thinned: int, **kw) -> "ChainConfig":
        """Schedule given as burn-in counted in thinned draws (e.g. 3000/15/100)."""
        return cls(iterations=iterations, thinning=thinning, burn_in=burn_in_thinned * thinning, **kw)

    @property
    def n_stored(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning

    def is_stored(self, t: int) -> bool:
        return t > self.burn_in and (t - self.burn_in) % self.thinning == 0


@dataclass
class ChainSamples:
    iteration: np.ndarray
    beta: np.ndarray  # (n_stored, dim)
    eta_usa: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    loglik: np.ndarray
    logpost: np.ndarray
    eta_hyp: np.ndarray | None = None
    eta_time: np.ndarray | None = None
    psi_acceptance: float = float("nan")
    proposal_sd: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.beta.shape[0]

    def scalars(self) -> dict[str, np.ndarray]:
        out = {"eta_usa": self.eta_usa, "phi": self.phi, "psi": self.psi}
        if self.eta_hyp is not None:
            out["eta_hyp"] = self.eta_hyp
        if self.eta_time is not None:
            out["eta_time"] = self.eta_time
        return out


def _union_positions(keys_list: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    union = np.unique(np.concatenate(keys_list))
    return union, [np.searchsorted(union, k) for k in keys_list]


def _lower_keys(mat, dim: int, row_offset: int = 0):
    coo = sp.tril(sp.coo_matrix(mat)).tocoo()
    r = coo.row.astype(np.int64) + row_offset
    c = coo.col.astype(np.int64) + row_offset
    return c * dim + r, coo.data.astype(float)


class HierarchicalModel:
    """Pattern-aware assembly of the beta full conditional and the psi target.

    The precision ``Omega = Sigma^-1 + phi X'X`` always lives on one fixed
    sparsity pattern (prior graph union X'X plus the diagonal), so its AMD
    ordering and symbolic factorization are computed once.
    """

    def __init__(self, problem: ForwardProblem, priors: HyperPriors, precision: PrecisionModel | None = None):
        if problem.y is None:
            raise ValueError("problem has no observations")
        self.problem = problem
        self.priors = priors
        self.precision = precision
        self.d_usa, self.d_hyp, self.d_time = problem.d_usa, problem.d_hyp, problem.d_time
        self.dim = d = problem.dim
        if precision is not None and precision.n != self.d_usa:
            raise ValueError("precision model size does not match the velocity block")
        self.X = problem.X.tocsr()
        self.y = np.asarray(problem.y, dtype=float)
        self.n_obs = self.X.shape[0]
        self.Xty = self.X.T @ self.y
        self.beta0 = priors.beta0_for(d)
        b0u = self.beta0[: self.d_usa]

        diag = np.arange(d, dtype=np.int64)
        diag_keys = diag * d + diag
        xtx_keys, xtx_vals = _lower_keys(self.X.T @ self.X, d)
        parts = [diag_keys, xtx_keys]
        if precision is not None:
            lap_pattern = precision.pattern
            col_of = np.repeat(np.arange(lap_pattern.dim), np.diff(lap_pattern.indptr))
            lap_keys = col_of * d + lap_pattern.indices
            parts.append(lap_keys)
        union, pos = _union_positions(parts)
        cols = union // d
        rows = union % d
        indptr = np.zeros(d + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=d), out=indptr[1:])
        self.pattern = SparseSymMatrix(d, indptr, rows.astype(np.int64), np.zeros(union.size))
        nnz = union.size
        self._eye_usa = np.zeros(nnz)
        self._eye_usa[pos[0][: self.d_usa]] = 1.0
        self._eye_hyp = np.zeros(nnz)
        self._eye_hyp[pos[0][self.d_usa:self.d_usa + self.d_hyp]] = 1.0
        self._eye_time = np.zeros(nnz)
        self._eye_time[pos[0][self.d_usa + self.d_hyp:]] = 1.0
        self._xtx = np.zeros(nnz)
        np.add.at(self._xtx, pos[1], xtx_vals)
        self._lap = np.zeros(nnz)
        if precision is not None:
            np.add.at(self._lap, pos[2], precision.laplacian_data())
            self._lap_matrix = precision.pattern.with_data(precision.laplacian_data())
            self._lap_b0 = self._lap_matrix.matvec(b0u)
        else:
            self._lap_matrix = None
            self._lap_b0 = np.zeros(self.d_usa)
        self._symbolic: SymbolicCholesky | None = None

    @property
    def symbolic(self) -> SymbolicCholesky:
        if self._symbolic is None:
            self._symbolic = SymbolicCholesky(self.pattern, amd_order(self.pattern))
        return self._symbolic

    def prior_precision_data(self, state: ChainState) -> np.ndarray:
        data = state.eta_usa * (self._eye_usa + state.psi * self._lap)
        if self.d_hyp:
            data = data + state.eta_hyp * self._eye_hyp
        if self.d_time:
            data = data + state.eta_time * self._eye_time
        return data

    def conditional(self, state: ChainState) -> tuple[SparseSymMatrix, np.ndarray]:
        """(Omega_beta, xi_beta) of the Gaussian full conditional of beta."""
        omega = self.pattern.with_data(self.prior_precision_data(state) + state.phi * self._xtx)
        b0 = self.beta0
        u = self.d_usa
        prior_part = np.empty(self.dim)
        prior_part[:u] = state.eta_usa * (b0[:u] + state.psi * self._lap_b0)
        if self.d_hyp:
            prior_part[u:u + self.d_hyp] = state.eta_hyp * b0[u:u + self.d_hyp]
        if self.d_time:
            prior_part[u + self.d_hyp:] = state.eta_time * b0[u + self.d_hyp:]
        return omega, prior_part + state.phi * self.Xty

    def draw_beta(self, state: ChainState, rng: np.random.Generator) -> np.ndarray:
        omega, xi = self.conditional(state)
        F = self.symbolic.factor(omega)
        return sample_from_factor(F, xi, rng)

    def conditional_mean(self, state: ChainState) -> np.ndarray:
        omega, xi = self.conditional(state)
        return solve(self.symbolic.factor(omega), xi)

    # ---- quadratic forms -------------------------------------------------

    def residual_ss(self, beta: np.ndarray) -> float:
        r = self.y - self.X @ beta
        return float(r @ r)

    def usa_quad(self, beta: np.ndarray, psi: float) -> tuple[float, float]:
        """(r'r, r'G r) for r = beta_usa - beta0_usa."""
        r = beta[: self.d_usa] - self.beta0[: self.d_usa]
        rr = float(r @ r)
        if self._lap_matrix is None:
            return rr, 0.0
        return rr, self._lap_matrix.quad_form(r)

    def block_ss(self, beta: np.ndarray, block: str) -> float:
        u, h = self.d_usa, self.d_hyp
        sl = slice(u, u + h) if block == "hyp" else slice(u + h, self.dim)
        r = beta[sl] - self.beta0[sl]
        return float(r @ r)

    # ---- densities -----------------------------------------------------

    def log_likelihood(self, beta: np.ndarray, phi: float, rss: float | None = None) -> float:
        rss = self.residual_ss(beta) if rss is None else rss
        return 0.5 * self.n_obs * (math.log(phi) - LOG_2PI) - 0.5 * phi * rss

    def log_det_Q(self, psi: float) -> float:
        if self.precision is None or psi == 0:
            return 0.0
        return self.precision.log_det(psi)

    def psi_log_target(self, psi: float, eta_usa: float, quad: tuple[float, float],
                       log_det: float | None = None) -> float:
        """Unnormalised log full conditional of psi (psi > 0)."""
        if psi <= 0:
            return -math.inf
        ld = self.log_det_Q(psi) if log_det is None else log_det
        rr, rgr = quad
        pr = self.priors
        return 0.5 * ld - 0.5 * eta_usa * (rr + psi * rgr) - (psi - pr.psi_mean) ** 2 / (2 * pr.psi_sd**2)

    def log_posterior(self, state: ChainState, rss: float, quad: tuple[float, float], log_det: float,
                      with_psi: bool) -> float:
        pr = self.priors
        rr, rgr = quad
        lp = self.log_likelihood(state.beta, state.phi, rss)
        lp += 0.5 * (self.d_usa * math.log(state.eta_usa) + log_det) - 0.5 * state.eta_usa * (rr + state.psi * rgr)
        lp += pr.eta_usa.logpdf(state.eta_usa) + pr.phi.logpdf(state.phi)
        if self.d_hyp:
            lp += 0.5 * self.d_hyp * math.log(state.eta_hyp) - 0.5 * state.eta_hyp * self.block_ss(state.beta, "hyp")
            lp += pr.eta_hyp.logpdf(state.eta_hyp)
        if self.d_time:
            lp += 0.5 * self.d_time * math.log(state.eta_time) - 0.5 * state.eta_time * self.block_ss(state.beta, "time")
            lp += pr.eta_time.logpdf(state.eta_time)
        lp -= 0.5 * self.dim * LOG_2PI
        if with_psi:
            lp -= (state.psi - pr.psi_mean) ** 2 / (2 * pr.psi_sd**2)
        return lp

    def initial_state(self, structure: int) -> ChainState:
        pr = self.priors
        return ChainState(
            beta=self.beta0.copy(),
            eta_usa=pr.eta_usa.mean,
            phi=pr.phi.mean,
            psi=0.0 if structure == 0 else pr.psi_mean,
            eta_hyp=pr.eta_hyp.mean if self.d_hyp else None,
            eta_time=pr.eta_time.mean if self.d_time else None,
        )


def full_conditional_beta(state: ChainState, problem: ForwardProblem, priors: HyperPriors,
                          precision: PrecisionModel | None = None) -> tuple[SparseSymMatrix, np.ndarray]:
    """Omega = Sigma^-1 + phi X'X and xi = Sigma^-1 beta0 + phi X'y."""
    return HierarchicalModel(problem, priors, precision).conditional(state)


def _draw_gamma(rng: np.random.Generator, shape: float, rate: float) -> float:
    if not (math.isfinite(shape) and math.isfinite(rate) and rate > 0):
        raise SamplerError(f"invalid Gamma full conditional (shape={shape}, rate={rate})")
    return float(rng.gamma(shape, 1.0 / rate))


def precision_conditionals(model: HierarchicalModel, state: ChainState) -> dict[str, tuple[float, float]]:
    """Shape and rate of the Gamma full conditional of every precision."""
    pr = model.priors
    rss = model.residual_ss(state.beta)
    rr, rgr = model.usa_quad(state.beta, state.psi)
    out = {
        "phi": (pr.phi.shape + 0.5 * model.n_obs, pr.phi.rate + 0.5 * rss),
        "eta_usa": (pr.eta_usa.shape + 0.5 * model.d_usa, pr.eta_usa.rate + 0.5 * (rr + state.psi * rgr)),
    }
    if model.d_hyp:
        out["eta_hyp"] = (pr.eta_hyp.shape + 0.5 * model.d_hyp, pr.eta_hyp.rate + 0.5 * model.block_ss(state.beta, "hyp"))
    if model.d_time:
        out["eta_time"] = (pr.eta_time.shape + 0.5 * model.d_time,
                           pr.eta_time.rate + 0.5 * model.block_ss(state.beta, "time"))
    return out


def gibbs_update_precisions(state: ChainState, model: HierarchicalModel, rng: np.random.Generator) -> ChainState:
    """Draw eta_usa, eta_hyp, eta_time and phi from their Gamma conditionals (in place)."""
    cond = precision_conditionals(model, state)
    for name in ("eta_usa", "eta_hyp", "eta_time", "phi"):
        if name in cond:
            setattr(state, name, _draw_gamma(rng, *cond[name]))
    return state


def propose_truncated(rng: np.random.Generator, current: float, sd: float) -> float:
    """Random-walk proposal N(current, sd^2) restricted to (0, inf)."""
    while True:
        x = current + sd * rng.standard_normal()
        if x > 0:
            return float(x)


def mh_update_psi(state: ChainState, model: HierarchicalModel, proposal_sd: float, rng: np.random.Generator,
                  current_log_det: float | None = None) -> tuple[float, bool, float]:
    """One Metropolis-Hastings step for psi.

    Returns ``(psi, accepted, log|Q(psi)|)``. The acceptance ratio includes
    the truncated-proposal correction ``Phi(psi/sd) / Phi(psi*/sd)``. A
    proposal whose Q fails to factor is rejected.
    """
    psi = state.psi
    quad = model.usa_quad(state.beta, psi)
    ld_cur = model.log_det_Q(psi) if current_log_det is None else current_log_det
    prop = propose_truncated(rng, psi, proposal_sd)
    u = rng.random()
    try:
        ld_prop = model.log_det_Q(prop)
    except NotPositiveDefinite:
        log.warning("Q(psi=%g) failed to factor; proposal rejected", prop)
        state.psi_proposed += 1
        return psi, False, ld_cur
    log_ratio = (
        model.psi_log_target(prop, state.eta_usa, quad, ld_prop)
        - model.psi_log_target(psi, state.eta_usa, quad, ld_cur)
        + log_ndtr(psi / proposal_sd)
        - log_ndtr(prop / proposal_sd)
    )
    state.psi_proposed += 1
    if math.log(u) < log_ratio:
        state.psi = prop
        state.psi_accepted += 1
        return prop, True, ld_prop
    return psi, False, ld_cur


def run_chain(config: ChainConfig, problem: ForwardProblem, priors: HyperPriors,
              precision: PrecisionModel | None = None, *, model: HierarchicalModel | None = None,
              initial: ChainState | None = None,
              sink: Callable[[int, ChainState, float, float], None] | None = None) -> ChainSamples:
    """Run one chain; deterministic for a given ``config.seed``.

    ``precision`` is the prior structure's :class:`PrecisionModel`; structure
    0 ignores it, fixes psi = 0 and uses Q = I. ``sink`` receives every
    stored draw as ``(iteration, state, loglik, logpost)``.
    """
    if config.model != problem.model:
        raise ValueError(f"config model {config.model} does not match problem model {problem.model}")
    update_psi = config.structure != 0
    if not update_psi:
        precision = None
    elif precision is None:
        raise ValueError(f"structure {config.structure} needs a precision model")
    if model is None:
        model = HierarchicalModel(problem, priors, precision)
    rng = np.random.default_rng(config.seed)
    state = model.initial_state(config.structure) if initial is None else initial.copy()
    if not update_psi:
        state.psi = 0.0

    n = config.n_stored
    d = model.dim
    beta = np.empty((n, d))
    scal = {k: np.empty(n) for k in ("eta_usa", "phi", "psi", "loglik", "logpost", "eta_hyp", "eta_time")}
    iters = np.empty(n, dtype=np.int64)
    log_sd = math.log(config.initial_proposal_sd)
    ld = model.log_det_Q(state.psi)
    failures = 0
    k = 0

    for t in range(1, config.iterations + 1):
        state.iteration = t
        try:
            state.beta = model.draw_beta(state, rng)
            failures = 0
        except NotPositiveDefinite as exc:
            failures += 1
            log.warning("iteration %d: beta conditional failed to factor (%s)", t, exc)
            if failures > MAX_CONSECUTIVE_FAILURES:
                raise SamplerError(f"{failures} consecutive factorization failures") from exc
            continue
        gibbs_update_precisions(state, model, rng)
        if update_psi:
            sd = math.exp(log_sd)
            _, accepted, ld = mh_update_psi(state, model, sd, rng, current_log_det=ld)
            if config.adapt and t <= config.burn_in:
                # Robbins-Monro on the log scale, frozen after burn-in
                log_sd += (float(accepted) - config.target_acceptance) / t**0.6
                log_sd = min(max(log_sd, math.log(1e-6)), math.log(1e6))
            if t == config.burn_in:
                state.psi_accepted = 0
                state.psi_proposed = 0

        if config.is_stored(t):
            rss = model.residual_ss(state.beta)
            quad = model.usa_quad(state.beta, state.psi)
            ll = model.log_likelihood(state.beta, state.phi, rss)
            lp = model.log_posterior(state, rss, quad, ld, update_psi)
            if not (math.isfinite(ll) and math.isfinite(lp)):
                raise SamplerError(f"non-finite log density at iteration {t}")
            beta[k] = state.beta
            iters[k] = t
            scal["eta_usa"][k] = state.eta_usa
            scal["phi"][k] = state.phi
            scal["psi"][k] = state.psi
            scal["loglik"][k] = ll
            scal["logpost"][k] = lp
            scal["eta_hyp"][k] = state.eta_hyp if state.eta_hyp is not None else np.nan
            scal["eta_time"][k] = state.eta_time if state.eta_time is not None else np.nan
            if sink is not None:
                sink(t, state, ll, lp)
            k += 1

    beta, iters = beta[:k], iters[:k]
    scal = {key: v[:k] for key, v in scal.items()}
    acc = state.psi_accepted / state.psi_proposed if update_psi and state.psi_proposed else float("nan")
    return ChainSamples(
        iteration=iters,
        beta=beta,
        eta_usa=scal["eta_usa"],
        phi=scal["phi"],
        psi=scal["psi"],
        loglik=scal["loglik"],
        logpost=scal["logpost"],
        eta_hyp=scal["eta_hyp"] if model.d_hyp else None,
        eta_time=scal["eta_time"] if model.d_time else None,
        psi_acceptance=acc,
        proposal_sd=math.exp(log_sd) if update_psi else float("nan"),
        meta={"seed": config.seed, "structure": config.structure, "iterations": config.iterations,
              "burn_in": config.burn_in, "thinning": config.thinning},
    )
