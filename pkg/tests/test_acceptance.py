"""Acceptance criteria 1-11.

Each test prints one ``criterion k: PASS|FAIL - detail`` line; the lines are
repeated in the pytest terminal summary. Criteria 7-9 run desk-scale chains
and take most of the module's runtime (roughly half an hour on one core).
"""

import math
import time

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import integrate, stats

from acceptance_report import note, report
from bayestomo.baseline import modified_ridge
from bayestomo.config import RunConfig
from bayestomo.diagnostics import ess
from bayestomo.experiment import build_experiment, hyper_priors, precision_model, prior_mean
from bayestomo.forward import ForwardProblem
from bayestomo.prior import NeighborGraph, NeighborhoodSpec, NodeSet, PrecisionModel, assemble_Q, build_neighbor_graph
from bayestomo.sampler import (
    ChainState,
    GammaPrior,
    HierarchicalModel,
    HyperPriors,
    gibbs_update_precisions,
    mh_update_psi,
    precision_conditionals,
)
from bayestomo.sparse import Permutation, amd_order, cholesky, fill_nnz
from bayestomo.study import run_study

SEEDS = range(5)


def _random_graph(rng):
    n = int(rng.integers(2, 201))
    nodes = NodeSet(rng.uniform(0, 1000, size=(n, 3)))
    kind = rng.choice(["reciprocal", "exponential"])
    if rng.random() < 0.5:
        spec = NeighborhoodSpec.spherical(float(rng.uniform(100, 400)), kind)
    else:
        axes = rng.uniform(100, 500, 3)
        spec = NeighborhoodSpec.ellipsoidal(*axes, weight_kind=kind, angles_deg=tuple(rng.uniform(-90, 90, 3)))
    return build_neighbor_graph(nodes, spec)


def test_criterion_1_prior_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    identity_ok, worst = True, 0.0
    edges = 0
    for _ in range(100):
        g = _random_graph(rng)
        edges += g.rows.size
        identity_ok &= bool(np.array_equal(assemble_Q(g, 0.0).to_dense(), np.eye(g.n)))
        for psi in (0.1, 1.0, 10.0):
            Q = assemble_Q(g, psi)
            F = cholesky(Q, amd_order(Q))
            L = F.L().toarray()
            P = np.eye(g.n)[F.perm.forward]
            dense = Q.to_dense()
            worst = max(worst, np.max(np.abs(P.T @ L @ L.T @ P - dense)) / np.max(np.abs(dense)))
    elapsed = time.perf_counter() - t0
    ok = identity_ok and worst <= 1e-10 and elapsed < 10
    report(1, ok, f"identity at psi=0 on 100 graphs ({edges} edges): {identity_ok}; "
                  f"max relative reconstruction error {worst:.1e}; {elapsed:.1f} s")


def test_criterion_2_beta_draws():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    d, n = 10, 25
    nodes = NodeSet(rng.uniform(0, 300, size=(d, 3)))
    pm = PrecisionModel(build_neighbor_graph(nodes, NeighborhoodSpec.spherical(200.0)))
    X = rng.uniform(0, 1, (n, d)) * (rng.random((n, d)) < 0.5)
    y = rng.normal(size=n)
    b0 = rng.normal(size=d)
    model = HierarchicalModel(ForwardProblem(sp.csr_matrix(X), y=y), HyperPriors(beta0=b0), pm)
    st = ChainState(beta=b0.copy(), eta_usa=2.0, phi=0.5, psi=3.0)
    omega, xi = model.conditional(st)
    cov = np.linalg.inv(omega.to_dense())
    mean = cov @ xi
    draws = np.array([model.draw_beta(st, rng) for _ in range(50_000)])
    sd = np.sqrt(np.diag(cov))
    mean_err = np.max(np.abs(draws.mean(axis=0) - mean) / sd)
    cov_err = np.max(np.abs(np.cov(draws, rowvar=False) - cov) / np.outer(sd, sd))
    elapsed = time.perf_counter() - t0
    ok = mean_err <= 0.02 and cov_err <= 0.05 and elapsed < 60
    report(2, ok, f"max mean error {mean_err:.4f} posterior SD, max covariance error {cov_err:.4f} "
                  f"(relative to sqrt(S_ii S_jj)); {elapsed:.1f} s")


def _gamma_quadrature_mean(log_density):
    hi = 1.0
    while log_density(hi) - log_density(hi / 2) > -50:
        hi *= 2
    peak = max(log_density(x) for x in np.linspace(hi / 1000, hi, 1000))
    f = lambda x: math.exp(log_density(x) - peak)
    z = integrate.quad(f, 0, hi, limit=200)[0]
    return integrate.quad(lambda x: x * f(x), 0, hi, limit=200)[0] / z


def test_criterion_3_conjugate_updates():
    pvals = []
    worst_quad = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(5, 40)), int(rng.integers(2, 15))
        nodes = NodeSet(rng.uniform(0, 300, size=(d, 3)))
        pm = PrecisionModel(build_neighbor_graph(nodes, NeighborhoodSpec.spherical(200.0)))
        pri = HyperPriors(eta_usa=GammaPrior(10.0, 2.0), phi=GammaPrior(1.0, 0.1), beta0=rng.normal(size=d))
        X = rng.normal(size=(n, d))
        model = HierarchicalModel(ForwardProblem(sp.csr_matrix(X), y=rng.normal(size=n)), pri, pm)
        beta = rng.normal(size=d)
        psi = float(rng.uniform(0.5, 10))
        base = ChainState(beta=beta, eta_usa=1.0, phi=1.0, psi=psi)
        cond = precision_conditionals(model, base)
        draws = {"phi": [], "eta_usa": []}
        for _ in range(2000):
            s = gibbs_update_precisions(base.copy(), model, rng)
            draws["phi"].append(s.phi)
            draws["eta_usa"].append(s.eta_usa)
        for name in ("phi", "eta_usa"):
            a, b = cond[name]
            pvals.append(stats.kstest(draws[name], stats.gamma(a, scale=1 / b).cdf).pvalue)
        if seed == 0:
            # unnormalised conditionals written out from the joint density, integrated numerically
            rss = float(np.sum((model.y - X @ beta) ** 2))
            r = beta - pri.beta0
            quad = r @ assemble_Q(pm.graph, psi).to_dense() @ r
            dens = {
                "phi": lambda p: pri.phi.logpdf(p) + 0.5 * n * math.log(p) - 0.5 * p * rss,
                "eta_usa": lambda e: pri.eta_usa.logpdf(e) + 0.5 * d * math.log(e) - 0.5 * e * quad,
            }
            for name, f in dens.items():
                a, b = cond[name]
                worst_quad = max(worst_quad, abs(_gamma_quadrature_mean(f) / (a / b) - 1))
    ok = min(pvals) > 0.01 and worst_quad <= 1e-3
    # under a correct sampler the 40 p-values are uniform; min > 0.01 then holds with probability 0.99^40
    uniform_p = stats.kstest(pvals, "uniform").pvalue
    report(3, ok, f"KS p-values over 20 seeds x (phi, eta_usa): min {min(pvals):.3f} "
                  f"({sum(p <= 0.01 for p in pvals)} of {len(pvals)} at or below 0.01; uniformity of the "
                  f"p-values p={uniform_p:.2f}); quadrature vs Gamma mean max relative error {worst_quad:.1e}")


def test_criterion_4_ridge_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        d = int(rng.integers(5, 101))
        n = int(rng.integers(d // 2, 2 * d))
        X = sp.random(n, d, density=0.1, random_state=rng, format="csr")
        y, b0 = rng.normal(size=n), rng.normal(size=d)
        eta, phi = float(rng.uniform(0.1, 10)), float(rng.uniform(0.1, 10))
        model = HierarchicalModel(ForwardProblem(X, y=y), HyperPriors(beta0=b0))
        mean = model.conditional_mean(ChainState(beta=b0.copy(), eta_usa=eta, phi=phi, psi=0.0))
        ridge = modified_ridge(X, y, eta / phi, b0)
        worst = max(worst, np.linalg.norm(mean - ridge) / np.linalg.norm(ridge))
    elapsed = time.perf_counter() - t0
    report(4, worst <= 1e-8 and elapsed < 5, f"max relative difference {worst:.1e} on 10 instances; {elapsed:.2f} s")


def test_criterion_5_psi_target():
    t0 = time.perf_counter()
    pm = PrecisionModel(NeighborGraph.from_edges(2, [(1, 0)], 1.0))
    details, ok = [], True
    for mu, sd in ((10.0, 0.2), (1.0, 1.0)):
        pri = HyperPriors(psi_mean=mu, psi_sd=sd)
        model = HierarchicalModel(ForwardProblem(sp.csr_matrix(np.eye(2)), y=np.zeros(2)), pri, pm)
        beta, eta = np.array([0.6, -0.3]), 1.5
        quad = model.usa_quad(beta, 1.0)
        # closed form of the 2-node log-target
        logt = lambda p: (0.5 * math.log(1 + 2 * p) - 0.5 * eta * (quad[0] + p * quad[1])
                          - (p - mu) ** 2 / (2 * sd**2))
        assert abs(logt(0.7) - model.psi_log_target(0.7, eta, quad)) < 1e-12
        top = mu + 12 * sd
        peak = max(logt(p) for p in np.linspace(1e-6, top, 2000))
        f = lambda p: math.exp(logt(p) - peak)
        z = integrate.quad(f, 0, top, limit=200)[0]
        m1 = integrate.quad(lambda p: p * f(p), 0, top, limit=200)[0] / z
        m2 = integrate.quad(lambda p: p * p * f(p), 0, top, limit=200)[0] / z
        ref_sd = math.sqrt(m2 - m1**2)
        rng = np.random.default_rng(11)
        s = ChainState(beta=beta, eta_usa=eta, phi=1.0, psi=mu)
        chain = np.empty(60_000)
        for i in range(chain.size):
            chain[i], _, _ = mh_update_psi(s, model, 1.5 * ref_sd, rng)
        chain = chain[1000:]
        e_mean = abs(chain.mean() / m1 - 1)
        e_sd = abs(chain.std() / ref_sd - 1)
        ok &= e_mean <= 0.03 and e_sd <= 0.03
        details.append(f"prior ({mu:g}, {sd:g}): mean err {e_mean:.2%}, sd err {e_sd:.2%}")
    elapsed = time.perf_counter() - t0
    report(5, ok and elapsed < 60, "; ".join(details) + f"; {elapsed:.1f} s")


def test_criterion_6_ordering_benefit():
    cfg = RunConfig().validate().with_section("prior", structure=2)
    exp = build_experiment(cfg)
    pm = precision_model(cfg, exp.grid, 2)
    beta0 = prior_mean(cfg, exp.problem, exp.beta_lsqr)
    model = HierarchicalModel(exp.problem, hyper_priors(cfg, beta0), pm)
    A = model.pattern
    natural = fill_nnz(A, Permutation.identity(A.dim))
    amd = fill_nnz(A, amd_order(A))
    reduction = 1 - amd / natural
    report(6, reduction >= 0.20, f"{A.dim}-node Omega_beta (nnz lower {A.nnz_lower}): nnz(L) natural {natural}, "
                                 f"AMD {amd}, reduction {reduction:.1%} (threshold 20%; 50% at full scale is "
                                 f"reported for the 11,000-parameter problem only)")


# ---- criteria 7-9: desk-scale chains ------------------------------------

@pytest.fixture(scope="module")
def setup2_rows():
    base = RunConfig().validate().with_section("chain", iterations=3000, burn_in=500, thinning=1)
    t0 = time.perf_counter()
    rows = run_study(base, "II_a", SEEDS, noise_kinds=("gaussian",), structures=(0, 1))
    return rows, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_dic_selects_true_structure(setup2_rows):
    rows, elapsed = setup2_rows
    assert all(r["status"] == "ok" for r in rows), [r["error"] for r in rows]
    by = {(r["seed"], r["structure"]): r for r in rows}
    gaps = [by[(s, 1)]["dic"] - by[(s, 0)]["dic"] for s in SEEDS]
    wins = sum(g < 0 for g in gaps)
    report(7, wins >= 4 and elapsed < 1800,
           f"DIC(structure 1) - DIC(structure 0) per seed: {', '.join(f'{g:+.1f}' for g in gaps)}; "
           f"true structure lower in {wins}/5 seeds; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_coverage(setup2_rows):
    rows, _ = setup2_rows
    cov = [r["coverage"] for r in rows if r["structure"] == 1]
    agg = float(np.mean(cov))
    report(8, 0.85 <= agg <= 0.95, f"aggregated 90% coverage {agg:.3f} "
                                   f"(per seed {', '.join(f'{c:.3f}' for c in cov)})")


@pytest.fixture(scope="module")
def setup1_rows():
    base = RunConfig().validate().with_section("chain", iterations=2000, burn_in=500, thinning=15)
    a = run_study(base, "I_a", SEEDS, structures=(1,))
    b = run_study(base, "I_b", SEEDS, noise_kinds=("gaussian",), structures=(1,))
    return a, b


@pytest.mark.slow
def test_criterion_9_directional_findings(setup1_rows):
    a_rows, b_rows = setup1_rows
    assert all(r["status"] == "ok" for r in a_rows + b_rows)
    a = {(r["seed"], r["noise"]): r for r in a_rows}
    b = {r["seed"]: r for r in b_rows}
    width = [(a[(s, "student_t")]["mean_ci_width"], a[(s, "gaussian")]["mean_ci_width"]) for s in SEEDS]
    signif = [(b[s]["n_significant"], a[(s, "gaussian")]["n_significant"]) for s in SEEDS]
    wins_a = sum(t > g for t, g in width)
    wins_b = sum(zero < informative for zero, informative in signif)
    report(9, wins_a >= 4 and wins_b >= 4,
           f"(a) CI width t vs gaussian: {', '.join(f'{t:.3f}/{g:.3f}' for t, g in width)} -> {wins_a}/5; "
           f"(b) significant nodes beta0=0 vs informative: {', '.join(f'{z}/{i}' for z, i in signif)} -> {wins_b}/5")


def test_criterion_10_ess_calibration():
    rng = np.random.default_rng(10)
    n, rho = 100_000, 0.5
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - rho**2)
    for i in range(1, n):
        x[i] = rho * x[i - 1] + e[i]
    target = n * (1 - rho) / (1 + rho)
    ar = ess(x) / target - 1
    iid = ess(rng.standard_normal(n)) / n - 1
    report(10, abs(ar) <= 0.10 and abs(iid) <= 0.10,
           f"AR(1) rho=0.5: ESS/target - 1 = {ar:+.1%}; iid: ESS/n - 1 = {iid:+.1%}")


def test_criterion_11_scope_note():
    note(11, "paper-scale absolute DIC/misfit tables and real-data maps are out of scope; "
             "criteria 1-10 stand in for them")
