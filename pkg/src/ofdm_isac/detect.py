"""Interference detection from per-subcarrier and per-symbol received power.

The detector flags index ``n`` when ``gamma_n > gamma_(kappa) * beta``.  For
``kappa = 1`` the familywise error rate under iid Gamma(rho, s) powers does
not depend on the scale ``s``; it is evaluated here at unit scale and used to
calibrate ``beta`` offline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .waveform import ResourceAllocation


class QuadratureError(RuntimeError):
    """Raised when an adaptive quadrature does not reach its tolerance."""


# --------------------------------------------------------------------------
# power statistics and thresholding


def subcarrier_powers(y: np.ndarray, alloc: ResourceAllocation, subcarriers=None):
    """Return ``(index, gamma)`` with gamma_n summed over used symbols and antennas.

    ``subcarriers`` restricts the output (defaults to the reference UE's set).
    """
    freq = alloc.freq_sets[0] if subcarriers is None else np.asarray(subcarriers, dtype=int)
    time = alloc.time_sets[0]
    if freq.size == 0 or time.size == 0:
        raise ValueError("the reference UE has no resources")
    block = y[np.ix_(freq, time)]
    return freq, np.sum(np.abs(block) ** 2, axis=(1, 2))


def slot_powers(y: np.ndarray, alloc: ResourceAllocation, subcarriers=None):
    """Return ``(index, gamma_tilde)`` with powers summed over subcarriers and antennas."""
    freq = alloc.freq_sets[0] if subcarriers is None else np.asarray(subcarriers, dtype=int)
    time = alloc.time_sets[0]
    if freq.size == 0 or time.size == 0:
        raise ValueError("the reference UE has no resources")
    block = y[np.ix_(freq, time)]
    return time, np.sum(np.abs(block) ** 2, axis=(0, 2))


def threshold_detect(powers, kappa: int = 1, beta: float = 1.0, index=None) -> np.ndarray:
    """Indices whose power exceeds ``beta`` times the ``kappa``-th smallest power.

    ``powers`` may be a mapping ``{index: power}`` or an array (then ``index``
    defaults to ``0..len-1``).
    """
    if isinstance(powers, dict):
        index = np.fromiter(powers.keys(), dtype=int)
        values = np.fromiter(powers.values(), dtype=float)
    else:
        values = np.asarray(powers, dtype=float)
        index = np.arange(values.size) if index is None else np.asarray(index)
    if values.size == 0:
        raise ValueError("no powers to test")
    if not 1 <= kappa <= values.size:
        raise ValueError(f"kappa must lie in [1, {values.size}]")
    if beta < 1:
        raise ValueError("beta must be >= 1")
    ref = np.partition(values, kappa - 1)[kappa - 1]
    return index[values > ref * beta]


def estimate_clean_set(alloc: ResourceAllocation, freq_detected, time_detected) -> np.ndarray:
    """Boolean ``N x T`` mask of the estimated interference-free resources.

    A detected subcarrier removes its whole row of used symbols and a detected
    symbol removes its whole column of used subcarriers.
    """
    used = alloc.mask(0)
    removed = np.zeros_like(used)
    fd = np.asarray(freq_detected, dtype=int)
    td = np.asarray(time_detected, dtype=int)
    if np.setdiff1d(fd, alloc.freq_sets[0]).size or np.setdiff1d(td, alloc.time_sets[0]).size:
        raise ValueError("detected indices must be used by the reference UE")
    removed[fd, :] = True
    removed[:, td] = True
    return used & ~removed


# --------------------------------------------------------------------------
# order-statistics FWER


def _log_gamma_pdf(x, rho):
    with np.errstate(divide="ignore"):
        return (rho - 1) * np.log(x) - x - special.gammaln(rho)


def _cdf_gap(x, bx, rho):
    """F(bx) - F(x) for the unit-scale Gamma(rho) law, computed on the
    tail where the subtraction keeps its relative precision."""
    lower = special.gammainc(rho, x)
    if lower < 0.5:
        return special.gammainc(rho, bx) - lower
    return special.gammaincc(rho, x) - special.gammaincc(rho, bx)


def _integration_window(rho):
    half = 10.0 * np.sqrt(rho)
    return max(0.0, rho - half), rho + half


def fwer_theoretical(beta: float, rho: float, n: int, *, epsabs: float = 1e-12) -> float:
    """P(gamma_(n) > beta * gamma_(1)) for n iid Gamma(rho) powers.

    Integrating the joint density of (min, max) over the max analytically
    leaves ``n * int f(x) [Q(x)^(n-1) - (F(bx) - F(x))^(n-1)] dx`` with Q the
    upper tail; the remaining integral is done adaptively in log-space.
    """
    if rho < 1:
        raise ValueError("shape must be >= 1")
    if n < 2:
        raise ValueError("need at least two statistics")
    if beta < 1:
        raise ValueError("beta must be >= 1")
    if beta == 1.0:
        return 1.0
    if not np.isfinite(beta):
        return 0.0

    def integrand(x):
        if x <= 0:
            return 0.0
        lf = _log_gamma_pdf(x, rho)
        q = special.gammaincc(rho, x)
        gap = _cdf_gap(x, beta * x, rho)
        a = np.exp(lf + (n - 1) * np.log(q)) if q > 0 else 0.0
        b = np.exp(lf + (n - 1) * np.log(gap)) if gap > 0 else 0.0
        return a - b

    lo, hi = _integration_window(rho)
    points = [p for p in (rho - 3 * np.sqrt(rho), rho) if lo < p < hi]
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(
                integrand, lo, hi, points=points or None, limit=400, epsabs=epsabs, epsrel=1e-10
            )
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(
                f"FWER quadrature failed for beta={beta}, rho={rho}, n={n}: {exc}"
            ) from exc
    if err > 1e3 * epsabs + 1e-8 * abs(val):
        raise QuadratureError(f"FWER quadrature error estimate {err:.3g} too large (value {val:.6g})")
    return float(np.clip(n * val, 0.0, 1.0))


def calibrate_beta(delta: float, rho: float, n: int, tol: float = 1e-4, beta_hi: float = 2.0) -> float:
    """Smallest beta (to within ``tol``) whose theoretical FWER is <= delta.

    Bisection on [1, beta_hi], doubling ``beta_hi`` until it is feasible.
    """
    return _calibrate_cached(float(delta), float(rho), int(n), float(tol), float(beta_hi))


@lru_cache(maxsize=512)
def _calibrate_cached(delta, rho, n, tol, beta_hi):
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    lo, hi = 1.0, beta_hi
    while fwer_theoretical(hi, rho, n) > delta:
        lo, hi = hi, 2 * hi
        if hi > 1e6:
            raise QuadratureError("could not bracket beta*")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fwer_theoretical(mid, rho, n) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def p_value(z: float, rho: float, n: int) -> float:
    """P(gamma_i / gamma_(1) > z) under the iid Gamma(rho) null.

    Diagnostic only: the p-values of different indices share gamma_(1) and are
    therefore dependent.
    """
    if z < 1:
        raise ValueError("the ratio statistic is >= 1")
    if n < 2:
        raise ValueError("need at least two statistics")
    if not np.isfinite(z):
        return 0.0

    def integrand(w):
        q = special.gammainccinv(rho, w)  # F^{-1}(1 - w)
        return special.gammaincc(rho, z * q) * w ** (n - 2)

    # the weight w**(n-2) piles up near w = 1
    brk = [1.0 - 1.0 / n, 1.0 - 4.0 / n] if n > 4 else None
    val, _ = integrate.quad(integrand, 0.0, 1.0, points=brk, limit=400, epsabs=1e-13, epsrel=1e-10)
    return float(np.clip((n - 1) * val, 0.0, 1.0))


def max_min_ratios(draws: int, rho: float, n: int, rng: np.random.Generator,
                   scale: float = 1.0, chunk: int = 200_000) -> np.ndarray:
    """Monte Carlo samples of max/min over ``n`` iid Gamma(rho, scale) powers."""
    out = np.empty(draws)
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        g = rng.gamma(rho, scale, size=(m, n))
        out[done:done + m] = g.max(axis=1) / g.min(axis=1)
        done += m
    return out


def fwer_monte_carlo(beta, rho: float, n: int, draws: int, rng: np.random.Generator,
                     scale: float = 1.0):
    """Empirical P(max > beta * min) and its binomial standard error.

    ``beta`` may be an array; all values share the same draws.
    """
    ratios = max_min_ratios(draws, rho, n, rng, scale)
    beta = np.asarray(beta, dtype=float)
    p = (ratios[:, None] > beta.reshape(1, -1)).mean(axis=0)
    se = np.sqrt(p * (1 - p) / draws)
    if beta.ndim == 0:
        return float(p[0]), float(se[0])
    return p, se


# --------------------------------------------------------------------------
# end-to-end detection


@dataclass
class DetectionConfig:
    """Detector settings.

    ``beta``/``beta_time`` override the calibrated thresholds when given.
    """

    kappa: int = 1
    delta: float = 1e-3
    delta_time: float | None = None
    beta: float | None = None
    beta_time: float | None = None
    detect_slots: bool = True

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.delta_time is not None and not 0 < self.delta_time < 1:
            raise ValueError("delta_time must lie in (0, 1)")
        for b in (self.beta, self.beta_time):
            if b is not None and b < 1:
                raise ValueError("beta must be >= 1")


@dataclass
class DetectionResult:
    freq_detected: np.ndarray
    time_detected: np.ndarray
    clean_mask: np.ndarray
    freq_index: np.ndarray
    freq_powers: np.ndarray
    time_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    time_powers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: float = 1.0
    beta_time: float | None = None


def detect_interference(y: np.ndarray, alloc: ResourceAllocation, cfg: DetectionConfig) -> DetectionResult:
    """Flag interfered subcarriers, then symbols, and return the clean-set estimate.

    Symbol powers are computed over the subcarriers that survived the first
    test.  An interferer that is active in every symbol otherwise leaves no
    clean reference symbol and the symbol test would fire on noise in the
    interference power.
    """
    N_u = y.shape[-1]
    freq = alloc.freq_sets[0]
    time = alloc.time_sets[0]
    f_idx, gam = subcarrier_powers(y, alloc)
    beta = cfg.beta
    if beta is None:
        beta = calibrate_beta(cfg.delta, time.size * N_u, freq.size) if freq.size >= 2 else np.inf
    f_det = threshold_detect(gam, cfg.kappa, beta, f_idx) if np.isfinite(beta) else f_idx[:0]

    t_idx = time[:0]
    t_gam = np.zeros(0)
    t_det = time[:0]
    beta_t = None
    remaining = np.setdiff1d(freq, f_det)
    if cfg.detect_slots and remaining.size and time.size >= 2:
        t_idx, t_gam = slot_powers(y, alloc, remaining)
        beta_t = cfg.beta_time
        if beta_t is None:
            d_t = cfg.delta if cfg.delta_time is None else cfg.delta_time
            beta_t = calibrate_beta(d_t, remaining.size * N_u, time.size)
        t_det = threshold_detect(t_gam, cfg.kappa, beta_t, t_idx)

    return DetectionResult(
        freq_detected=f_det,
        time_detected=t_det,
        clean_mask=estimate_clean_set(alloc, f_det, t_det),
        freq_index=f_idx,
        freq_powers=gam,
        time_index=t_idx,
        time_powers=t_gam,
        beta=float(beta),
        beta_time=None if beta_t is None else float(beta_t),
    )
