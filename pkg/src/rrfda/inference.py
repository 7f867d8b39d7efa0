"""Posterior functionals: credible bands, predictive coverage and subject-level LOO."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .errors import ConfigurationError, StructuralError

MIN_BAND_DRAWS = 100
MIN_PSIS_DRAWS = 50
TAIL_FRACTION = 0.2


@dataclass
class CurveBand:
    """Credible band(s) for one curve on a grid.

    ``lower``/``upper`` have one row per entry of ``levels`` (coverage
    probabilities, increasing).
    """

    t: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    levels: tuple
    kind: str  # pointwise | simultaneous
    target: str = "mean-curve"  # mean-curve | predictive
    region: str | None = None
    contrast: str | None = None

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for k, lev in enumerate(self.levels):
            frames.append(pd.DataFrame({
                "t": self.t, "center": self.center, "lower": self.lower[k], "upper": self.upper[k],
                "level": lev, "kind": self.kind, "region": self.region, "contrast": self.contrast,
            }))
        return pd.concat(frames, ignore_index=True)


def bands_to_frame(bands) -> pd.DataFrame:
    return pd.concat([b.to_frame() for b in bands], ignore_index=True)


def _check_levels(levels):
    levels = tuple(float(x) for x in np.atleast_1d(levels))
    for lev in levels:
        if not 0.0 < lev < 1.0:
            raise ConfigurationError(f"band level must lie in (0, 1), got {lev}")
    return tuple(sorted(levels))


def _standardize(draws):
    m = draws.mean(axis=0)
    s = draws.std(axis=0)
    zero = ~(s > 0)
    dev = np.abs(draws - m)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(zero[None], 0.0, dev / np.where(zero, 1.0, s)[None])
    return m, s, zero, u


def _fill_zero_sd(half, zero):
    """Zero-SD points borrow the larger half-width of their grid neighbors."""
    if not np.any(zero):
        return half
    half = half.copy()
    T = half.shape[-1]
    for j in np.flatnonzero(zero):
        nb = [half[..., i] for i in (j - 1, j + 1) if 0 <= i < T and not zero[i]]
        half[..., j] = np.max(nb, axis=0) if nb else 0.0
    return half


def pointwise_band(draws, levels=0.9, t=None, **labels) -> CurveBand:
    """Symmetric standardized pointwise band: ``m(t) +/- q_t * s(t)``.

    ``q_t`` is the empirical ``level`` quantile of ``|g(t) - m(t)| / s(t)``
    over draws, so the band holds a fraction ``level`` of draws at each ``t``
    and is always nested inside the simultaneous band of the same level.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    levels = _check_levels(levels)
    m, s, zero, u = _standardize(draws)
    q = np.quantile(u, levels, axis=0)  # (L, T)
    half = _fill_zero_sd(q * s[None], zero)
    t = np.arange(draws.shape[1]) if t is None else np.asarray(t)
    return CurveBand(t, m, m - half, m + half, levels, "pointwise", **labels)


def simultaneous_band(draws, levels=0.9, t=None, min_draws: int = MIN_BAND_DRAWS, **labels) -> CurveBand:
    """Max-statistic simultaneous band ``m(t) +/- q(M) s(t)``, ``M = max_t |g - m| / s``."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[0] < min_draws:
        raise ConfigurationError(f"simultaneous bands need at least {min_draws} draws, got {draws.shape[0]}")
    levels = _check_levels(levels)
    m, s, zero, u = _standardize(draws)
    M = u.max(axis=1)
    q = np.quantile(M, levels)
    half = _fill_zero_sd(q[:, None] * s[None], zero)
    t = np.arange(draws.shape[1]) if t is None else np.asarray(t)
    return CurveBand(t, m, m - half, m + half, levels, "simultaneous", **labels)


def _region_labels(archive, p):
    labels = archive.metadata.get("regions")
    return list(labels) if labels and len(labels) == p else [str(j + 1) for j in range(p)]


def contrast_curves(archive, contrast, t_grid) -> np.ndarray:
    """Per-draw ``sum_l c_l mu_l(t)``; shape ``(draws, p, T)``."""
    psi = archive.draws["psi"]
    c = np.asarray(contrast, dtype=float).ravel()
    if c.shape[0] != psi.shape[1]:
        raise StructuralError(f"contrast has length {c.shape[0]}, design has d={psi.shape[1]}")
    B = archive.basis.evaluate(t_grid)
    return np.einsum("l,slpq,tq->spt", c, psi, B, optimize=True)


def group_mean_bands(archive, contrast, t_grid, levels=(0.2, 0.6, 0.9), kind: str = "simultaneous",
                     name: str | None = None, min_draws: int = MIN_BAND_DRAWS) -> list:
    """One band per region for the covariate contrast ``sum_l c_l mu_l(t)``."""
    t_grid = np.asarray(t_grid, dtype=float)
    curves = contrast_curves(archive, contrast, t_grid)
    regions = _region_labels(archive, curves.shape[1])
    name = name if name is not None else json.dumps([float(x) for x in np.ravel(contrast)])
    out = []
    for j, r in enumerate(regions):
        if kind == "simultaneous":
            out.append(simultaneous_band(curves[:, j], levels, t_grid, min_draws=min_draws, region=r, contrast=name))
        elif kind == "pointwise":
            out.append(pointwise_band(curves[:, j], levels, t_grid, region=r, contrast=name))
        else:
            raise ConfigurationError(f"unknown band kind {kind!r}")
    return out


@dataclass
class PredictiveResult:
    pointwise: CurveBand
    simultaneous: CurveBand
    observed: np.ndarray
    coverage_pointwise: float
    coverage_simultaneous: float


def _predictive_draws(archive, dataset, subject, region, rng):
    theta = archive.require("theta", "store_theta")
    if not 0 <= subject < dataset.n:
        raise StructuralError(f"subject index {subject} outside 0..{dataset.n - 1}")
    if not 0 <= region < dataset.p:
        raise StructuralError(f"region index {region} outside 0..{dataset.p - 1}")
    if theta.shape[1] != dataset.n:
        raise StructuralError("archive and dataset disagree on the number of subjects")
    t = dataset.times[subject]
    B = archive.basis.evaluate(t)
    fit = theta[:, subject, region, :] @ B.T  # (S, m)
    sd = np.sqrt(archive.draws["sigma_eps"][:, region])
    return t, fit + sd[:, None] * rng.standard_normal(fit.shape)


def predictive_bands(archive, dataset, subject: int, region: int, level: float = 0.9, rng=None,
                     min_draws: int = MIN_BAND_DRAWS) -> PredictiveResult:
    """Posterior-predictive bands at the subject's observed times and their coverage."""
    rng = np.random.default_rng(0) if rng is None else rng
    t, ystar = _predictive_draws(archive, dataset, subject, region, rng)
    y = dataset.Y[subject][region]
    labels = dict(region=str(dataset.regions[region]), contrast=f"subject:{dataset.subjects[subject]}")
    pw = pointwise_band(ystar, level, t, **labels)
    sim = simultaneous_band(ystar, level, t, min_draws=min_draws, **labels)
    pw.target = sim.target = "predictive"
    cov_pw = float(np.mean((y >= pw.lower[0]) & (y <= pw.upper[0]))) if len(y) else float("nan")
    cov_sim = float(np.mean((y >= sim.lower[0]) & (y <= sim.upper[0]))) if len(y) else float("nan")
    return PredictiveResult(pw, sim, y, cov_pw, cov_sim)


def predictive_coverage(archive, dataset, level: float = 0.9, seed: int = 0,
                        min_draws: int = MIN_BAND_DRAWS) -> pd.DataFrame:
    """Coverage of observed points for every subject-region pair."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(dataset.n):
        if len(dataset.times[i]) == 0:
            continue
        for j in range(dataset.p):
            r = predictive_bands(archive, dataset, i, j, level, rng, min_draws)
            rows.append({"subject": dataset.subjects[i], "region": dataset.regions[j],
                         "coverage_pointwise": r.coverage_pointwise,
                         "coverage_simultaneous": r.coverage_simultaneous})
    return pd.DataFrame(rows)


def coverage_iqr(cov: pd.DataFrame) -> dict:
    out = {}
    for col in ("coverage_pointwise", "coverage_simultaneous"):
        q1, q2, q3 = np.quantile(cov[col], [0.25, 0.5, 0.75])
        out[col] = {"q1": float(q1), "median": float(q2), "q3": float(q3)}
    return out


# ---------------------------------------------------------------------------
# leave-one-subject-out


def gpd_fit(x):
    """Generalized Pareto ``(k, sigma)`` for exceedances ``x`` (sorted ascending).

    Zhang-Stephens profile-posterior estimate, with the shape shrunk toward
    0.5 by a weak prior as is customary for importance-weight tails.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    m = 30 + int(np.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b /= 3.0 * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    ks = np.log1p(-b[:, None] * x).mean(axis=1)
    L = n * (np.log(-b / ks) - ks - 1.0)
    w = np.exp(L - logsumexp(L))
    keep = w >= 10 * np.finfo(float).eps
    b, w = b[keep], w[keep] / w[keep].sum()
    b_post = np.sum(b * w)
    k = np.log1p(-b_post * x).mean()
    sigma = -k / b_post
    k = (n * k + 10 * 0.5) / (n + 10)
    return float(k), float(sigma)


def _gpd_quantile(p, k, sigma):
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_w):
    """Pareto-smoothed normalized log weights and the tail shape ``k``."""
    x = np.asarray(log_w, dtype=float)
    x = x - x.max()
    S = len(x)
    M = int(np.ceil(TAIL_FRACTION * S))
    order = np.argsort(x)
    k = np.inf
    if M > 4 and S > M:
        cutoff = max(x[order[S - M - 1]], np.log(np.finfo(float).tiny))
        tail = order[S - M:]
        exceed = np.exp(x[tail]) - np.exp(cutoff)
        if exceed[-1] > 0 and np.all(np.isfinite(exceed)):
            k, sigma = gpd_fit(exceed)
            if np.isfinite(k) and sigma > 0:
                p = (np.arange(M) + 0.5) / M
                sm = np.log(_gpd_quantile(p, k, sigma) + np.exp(cutoff))
                x = x.copy()
                x[tail] = np.minimum(sm, 0.0)
    return x - logsumexp(x), k


@dataclass
class LooResult:
    elpd_loo: float
    se: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    method: str
    n_draws: int
    subjects: list = field(default_factory=list)

    def to_dict(self) -> dict:
        k = self.pareto_k[np.isfinite(self.pareto_k)]
        return {
            "elpd_loo": self.elpd_loo,
            "se": self.se,
            "method": self.method,
            "n_draws": self.n_draws,
            "pointwise": [{"subject": s, "elpd": float(e), "pareto_k": (float(kk) if np.isfinite(kk) else None)}
                          for s, e, kk in zip(self.subjects, self.pointwise, self.pareto_k)],
            "diagnostics": {
                "max_k": float(k.max()) if len(k) else None,
                "n_k_above_0.7": int(np.sum(k > 0.7)),
                "n_k_0.5_to_0.7": int(np.sum((k > 0.5) & (k <= 0.7))),
            },
        }


def elpd_loo(archive_or_loglik, subjects=None) -> LooResult:
    """Subject-level PSIS-LOO from an ``(S, n)`` matrix of subject log-likelihoods.

    With fewer than 50 draws the raw importance-sampling estimate is used.
    """
    if isinstance(archive_or_loglik, np.ndarray):
        ll = archive_or_loglik
    else:
        ll = archive_or_loglik.require("subject_loglik", "store_loglik")
    ll = np.atleast_2d(np.asarray(ll, dtype=float))
    if ll.ndim != 2:
        raise StructuralError("log-likelihood matrix must have shape (draws, subjects)")
    S, n = ll.shape
    if not np.all(np.isfinite(ll)):
        raise StructuralError("non-finite subject log-likelihoods")
    raw = S < MIN_PSIS_DRAWS
    elpd = np.empty(n)
    ks = np.full(n, np.nan)
    for i in range(n):
        if raw:
            lw = -ll[:, i] - logsumexp(-ll[:, i])
        else:
            lw, ks[i] = psis_smooth(-ll[:, i])
        elpd[i] = logsumexp(lw + ll[:, i])
    se = float(np.sqrt(n * np.var(elpd))) if n > 1 else 0.0
    subjects = list(subjects) if subjects is not None else [str(i) for i in range(n)]
    return LooResult(float(np.sum(elpd)), se, elpd, ks, "raw-is" if raw else "psis", S, subjects)
