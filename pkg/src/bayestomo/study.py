"""Setup I/II study driver: scenario matrix over noise kinds and prior structures.

Setups differ in how the truth and the prior mean are made:

========  ==============================  ===============================
setup     beta_true                       beta0 used for inference
========  ==============================  ===============================
I_a       damped-LSQR reference solution  LSQR solution + N(0, 0.32^2 I)
I_b       damped-LSQR reference solution  zero
II_a      GMRF draw around LSQR solution  LSQR solution + N(0, 0.32^2 I)
II_b      GMRF draw around LSQR solution  zero
========  ==============================  ===============================

One cell is (setup, seed, noise kind, structure). Cells share nothing, so
they run in worker processes; a failed cell is recorded and the study
moves on.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .diagnostics import coverage, summarize
from .experiment import build_experiment, run_inference

log = logging.getLogger(__name__)

SETUPS = {
    "I_a": ("setup1", "lsqr_perturbed"),
    "I_b": ("setup1", "zero"),
    "II_a": ("setup2", "lsqr_perturbed"),
    "II_b": ("setup2", "zero"),
}
NOISE_KINDS = ("gaussian", "student_t")
STRUCTURES = (0, 1, 2, 3, 4)

COLUMNS = [
    "setup", "seed", "noise", "structure", "status", "dic", "p_d", "mean_deviance",
    "misfit_mode", "misfit_lower", "misfit_upper", "model_misfit", "coverage", "mean_ci_width",
    "n_significant", "eta_usa_mode", "phi_mode", "psi_mode", "psi_acceptance", "n_draws", "seconds", "error",
]


@dataclass(frozen=True)
class Cell:
    setup: str
    seed: int
    noise: str
    structure: int


def cell_config(base: RunConfig, cell: Cell) -> RunConfig:
    truth_kind, beta0 = SETUPS[cell.setup]
    cfg = base.replace(seed=cell.seed)
    cfg = cfg.with_section("truth", kind=truth_kind)
    cfg = cfg.with_section("hyperpriors", beta0=beta0)
    cfg = cfg.with_section("noise", kind=cell.noise)
    return cfg.with_section("prior", structure=cell.structure)


def run_cell(base: RunConfig, cell: Cell) -> dict:
    row = {"setup": cell.setup, "seed": cell.seed, "noise": cell.noise, "structure": cell.structure}
    t0 = time.perf_counter()
    try:
        cfg = cell_config(base, cell)
        exp = build_experiment(cfg)
        samples, model = run_inference(cfg, exp.grid, exp.problem, exp.beta_lsqr)
        summary = summarize(samples, reference=exp.beta_true, model=model, with_ess=False)
        u = exp.problem.d_usa
        sc = summary.scalars
        row.update(
            status="ok",
            dic=summary.dic,
            p_d=summary.p_d,
            mean_deviance=summary.mean_deviance,
            misfit_mode=summary.misfit_mode,
            misfit_lower=summary.misfit_lower,
            misfit_upper=summary.misfit_upper,
            model_misfit=summary.model_misfit,
            coverage=coverage(summary.lower[:u], summary.upper[:u], exp.beta_true[:u]),
            mean_ci_width=float(np.mean(summary.upper[:u] - summary.lower[:u])),
            n_significant=int(np.sum(summary.significant[:u])),
            eta_usa_mode=sc["eta_usa"]["mode"],
            phi_mode=sc["phi"]["mode"],
            psi_mode=sc["psi"]["mode"],
            psi_acceptance=samples.psi_acceptance,
            n_draws=len(samples),
            error="",
        )
    except Exception as exc:  # recorded, the study continues
        log.error("cell %s failed: %s", cell, exc)
        log.debug("%s", traceback.format_exc())
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    row["seconds"] = round(time.perf_counter() - t0, 3)
    return row


def study_cells(setup: str, seeds, noise_kinds=NOISE_KINDS, structures=STRUCTURES) -> list[Cell]:
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}; choose from {', '.join(SETUPS)}")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("study needs at least one seed")
    return [Cell(setup, int(s), n, int(k)) for s in seeds for n in noise_kinds for k in structures]


def run_study(base: RunConfig, setup: str, seeds, workers: int = 1, noise_kinds=NOISE_KINDS,
              structures=STRUCTURES, out_csv=None) -> list[dict]:
    """Run every cell and return rows in cell order; optionally write them as CSV."""
    cells = study_cells(setup, seeds, noise_kinds, structures)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, [base] * len(cells), cells))
    else:
        rows = [run_cell(base, c) for c in cells]
    if out_csv is not None:
        write_rows(out_csv, rows)
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in COLUMNS])
