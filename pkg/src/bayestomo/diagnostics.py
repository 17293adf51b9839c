"""Posterior summaries: Mahalanobis misfits, DIC, ESS, quantiles and masks."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .sparse import CholeskyFactor, solve

log = logging.getLogger(__name__)


def mahalanobis(x, mu, cov) -> float:
    """sqrt((x - mu)' cov^-1 (x - mu)).

    ``cov`` is the covariance given as a solve capability: a 1-D array of
    variances (diagonal covariance), a :class:`CholeskyFactor` of the
    covariance, or a callable returning ``cov^-1 r``.
    """
    r = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    if isinstance(cov, CholeskyFactor):
        z = solve(cov, r)
    elif callable(cov):
        z = np.asarray(cov(r), dtype=float)
    else:
        var = np.broadcast_to(np.asarray(cov, dtype=float), r.shape)
        if np.any(var <= 0):
            raise ValueError("covariance is not positive definite")
        z = r / var
    q = float(r @ z)
    if q < 0:
        raise ValueError("covariance is not positive definite")
    return math.sqrt(q)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Sample autocorrelations rho_0..rho_{n-1} (biased estimator, via FFT)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(series) -> float:
    """n / (1 + 2 sum rho_k), summing from lag 1 until rho_k first drops below 0.05."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError("ESS needs at least 10 draws")
    if np.ptp(x) == 0:
        log.warning("constant series; ESS set to n")
        return float(n)
    rho = autocorrelation(x)
    total = 0.0
    for k in range(1, n):
        if rho[k] < 0.05:
            break
        total += rho[k]
    return n / (1.0 + 2.0 * total)


def deviance(loglik) -> np.ndarray:
    return -2.0 * np.asarray(loglik, dtype=float)


def dic(samples, model, min_draws: int = 10, beta_bar=None, phi_bar=None) -> tuple[float, float, float]:
    """(DIC, p_D, mean deviance) with theta = (beta, phi).

    ``model`` provides ``log_likelihood(beta, phi)``
    (a :class:`~bayestomo.sampler.HierarchicalModel`). The posterior means
    may be passed in when ``samples`` holds only part of beta.
    """
    if len(samples) < min_draws:
        raise ValueError(f"DIC needs at least {min_draws} stored draws")
    mean_dev = float(np.mean(deviance(samples.loglik)))
    beta_bar = samples.beta.mean(axis=0) if beta_bar is None else np.asarray(beta_bar, dtype=float)
    phi_bar = float(np.mean(samples.phi)) if phi_bar is None else float(phi_bar)
    dev_bar = -2.0 * model.log_likelihood(beta_bar, phi_bar)
    p_d = mean_dev - dev_bar
    return mean_dev + p_d, p_d, mean_dev


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    mode: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ess: np.ndarray | None
    significant: np.ndarray
    quantiles: tuple[float, float] = (0.05, 0.95)
    scalars: dict = field(default_factory=dict)  # per-hyperparameter mean/mode/quantiles/ess
    dic: float | None = None
    p_d: float | None = None
    mean_deviance: float | None = None
    misfit_mode: float | None = None
    misfit_lower: float | None = None
    misfit_upper: float | None = None
    model_misfit: float | None = None
    n_draws: int = 0

    def global_fields(self) -> dict:
        out = {k: v for k, v in asdict(self).items()
               if k not in ("mean", "mode", "lower", "upper", "ess", "significant")}
        out["quantiles"] = list(self.quantiles)
        out["n_significant"] = int(np.sum(self.significant))
        if self.model_misfit is None:
            out.pop("model_misfit")
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.global_fields()), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path, coords: np.ndarray | None = None) -> None:
        """Per-parameter table; ``coords`` (n, 3) adds x, y, z for the first n rows."""
        n = self.mean.size
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "mean", "mode", "q_lower", "q_upper", "ess", "significant", "x", "y", "z"])
            for i in range(n):
                xyz = [repr(float(c)) for c in coords[i]] if coords is not None and i < len(coords) else ["", "", ""]
                e = "" if self.ess is None else repr(float(self.ess[i]))
                w.writerow([i, repr(float(self.mean[i])), repr(float(self.mode[i])), repr(float(self.lower[i])),
                            repr(float(self.upper[i])), e, int(self.significant[i]), *xyz])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _scalar_summary(x: np.ndarray, mode_index: int, q) -> dict:
    lo, hi = np.quantile(x, q)
    out = {"mean": float(np.mean(x)), "mode": float(x[mode_index]), "lower": float(lo), "upper": float(hi)}
    out["ess"] = ess(x) if x.size >= 10 else float("nan")
    return out


def summarize(samples, quantiles=(0.05, 0.95), reference=None, model=None,
              with_ess: bool = True, reference_covariance=None) -> PosteriorSummary:
    """Componentwise summary of a chain.

    The posterior mode is the stored draw with the highest joint log
    posterior. With ``model`` (a HierarchicalModel) the data misfits
    ``|y - X b|`` under ``Sigma_y = I / phi_mode`` are filled in for the mode
    and both quantile vectors, together with DIC. With ``reference`` (a
    known beta_true) the model misfit ``|b_mode - beta_true|`` is added,
    measured under ``reference_covariance`` (any :func:`mahalanobis` form;
    the posterior marginal variances when omitted).
    """
    n = len(samples)
    if n == 0:
        raise ValueError("no stored draws")
    q = tuple(float(v) for v in quantiles)
    beta = samples.beta
    imode = int(np.argmax(samples.logpost))
    lower, upper = np.quantile(beta, q, axis=0)
    signif = (lower > 0) | (upper < 0)
    summary = PosteriorSummary(
        mean=beta.mean(axis=0),
        mode=beta[imode].copy(),
        lower=lower,
        upper=upper,
        ess=np.array([ess(beta[:, j]) for j in range(beta.shape[1])]) if with_ess and n >= 10 else None,
        significant=signif,
        quantiles=q,
        n_draws=n,
    )
    for name, series in samples.scalars().items():
        summary.scalars[name] = _scalar_summary(np.asarray(series), imode, q)
    if model is not None:
        phi_mode = float(samples.phi[imode])
        var_y = 1.0 / phi_mode
        y = model.y

        def misfit(b):
            return mahalanobis(y - model.X @ b, 0.0, var_y)

        summary.misfit_mode = misfit(summary.mode)
        summary.misfit_lower = misfit(lower)
        summary.misfit_upper = misfit(upper)
        degenerate = bool(np.all(beta == beta[0]) and np.all(samples.phi == samples.phi[0]))
        if n >= 10 or degenerate:
            summary.dic, summary.p_d, summary.mean_deviance = dic(samples, model, min_draws=1)
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        cov = reference_covariance
        if cov is None:
            cov = np.maximum(beta.var(axis=0), np.finfo(float).tiny)
        summary.model_misfit = mahalanobis(summary.mode[: ref.size], ref, cov)
    return summary


def coverage(lower, upper, truth) -> float:
    truth = np.asarray(truth)
    return float(np.mean((truth >= lower) & (truth <= upper)))

