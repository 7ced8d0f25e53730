"""Angle estimation with MUSIC, joint delay/angle estimation with OMP, and the
association step that fuses them.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .scenario import wrap_angle
from .waveform import steering_vector


class EstimationError(RuntimeError):
    """An estimator could not produce the requested number of components."""


@dataclass
class GridConfig:
    """Coarse search grids and the zoom schedule for local refinement.

    The delay grid is over the one-way delay; atoms use the round trip.
    """

    n_angle: int = 721
    angle_min: float = -np.pi / 2
    angle_max: float = np.pi / 2
    n_delay: int = 512
    delay_max: float = 1e-6  # 1 / (4 * delta_f) at 250 kHz
    zoom_rounds: int = 2
    zoom_factor: int = 20

    @classmethod
    def for_spacing(cls, delta_f: float, **kw) -> "GridConfig":
        return cls(delay_max=1.0 / (4.0 * delta_f), **kw)

    def angle_grid(self) -> np.ndarray:
        # open interval: +-pi/2 give the same steering vector
        return np.linspace(self.angle_min, self.angle_max, self.n_angle + 2)[1:-1]

    def delay_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.delay_max, self.n_delay)


# --------------------------------------------------------------------------
# MUSIC


@dataclass
class AngleSpectrum:
    grid: np.ndarray
    spectrum: np.ndarray
    peaks: np.ndarray
    peak_values: np.ndarray
    noise_basis: np.ndarray

    def evaluate(self, theta) -> np.ndarray:
        return _music_spectrum(self.noise_basis, np.atleast_1d(theta))


def _music_spectrum(noise_basis, thetas):
    a = steering_vector(np.asarray(thetas, dtype=float), noise_basis.shape[0])
    proj = noise_basis.conj().T @ a
    return 1.0 / np.maximum(np.sum(np.abs(proj) ** 2, axis=0), np.finfo(float).tiny)


def _local_maxima(values: np.ndarray, circular: bool) -> np.ndarray:
    if circular:
        left, right = np.roll(values, 1), np.roll(values, -1)
        return np.flatnonzero((values > left) & (values >= right))
    inner = np.flatnonzero((values[1:-1] > values[:-2]) & (values[1:-1] >= values[2:])) + 1
    return inner


def _zoom_1d(fn, center, step, rounds, factor):
    """Successive local grid searches of ``fn`` around ``center``."""
    best = center
    for _ in range(rounds):
        fine = step / factor
        cand = best + fine * np.arange(-factor, factor + 1)
        best = cand[int(np.argmax(fn(cand)))]
        step = fine
    return best


def music_estimate(y: np.ndarray, mask: np.ndarray, s: int, grid: GridConfig | None = None) -> AngleSpectrum:
    """MUSIC pseudo-spectrum from all snapshots selected by ``mask``.

    Returns the ``s`` largest local maxima, refined by local zooming, sorted by
    peak value (largest first).
    """
    grid = grid or GridConfig()
    N_u = y.shape[-1]
    snaps = y[mask]  # (M, N_u)
    if s < 0 or s >= N_u:
        raise ValueError("need 0 <= s < N_u")
    if snaps.shape[0] < N_u:
        raise EstimationError("fewer snapshots than antennas")
    cov = snaps.T @ snaps.conj()  # sum of y y^H, not normalized
    _, vecs = np.linalg.eigh(cov)
    noise = vecs[:, : N_u - s]
    thetas = grid.angle_grid()
    spec = _music_spectrum(noise, thetas)
    if s == 0:
        return AngleSpectrum(thetas, spec, np.zeros(0), np.zeros(0), noise)

    circular = np.isclose(grid.angle_min, -np.pi / 2) and np.isclose(grid.angle_max, np.pi / 2)
    idx = _local_maxima(spec, circular)
    if idx.size < s:
        raise EstimationError(f"MUSIC found {idx.size} local maxima, need {s}")
    idx = idx[np.argsort(-spec[idx], kind="stable")[:s]]
    step = thetas[1] - thetas[0]
    fn = lambda th: _music_spectrum(noise, th)
    peaks = np.array([_zoom_1d(fn, thetas[i], step, grid.zoom_rounds, grid.zoom_factor) for i in idx])
    peaks = wrap_angle(peaks)
    values = fn(peaks)
    order = np.argsort(-values, kind="stable")
    return AngleSpectrum(thetas, spec, np.atleast_1d(peaks[order]), values[order], noise)


# --------------------------------------------------------------------------
# OMP


class _Dictionary:
    """Delay-angle atoms ``<a*(theta), x_m> d_n(2 tau) a(theta)`` on a resource set."""

    def __init__(self, x0: np.ndarray, mask: np.ndarray, delta_f: float):
        n_idx, _ = np.nonzero(mask)
        self.X = x0[mask]  # (M, N_u)
        self.n = n_idx
        self.N_u = x0.shape[-1]
        self.delta_f = delta_f
        self.sub, inv = np.unique(n_idx, return_inverse=True)
        self.S = np.zeros((self.sub.size, n_idx.size))
        self.S[inv, np.arange(n_idx.size)] = 1.0

    def atom(self, theta: float, tau: float) -> np.ndarray:
        a = steering_vector(theta, self.N_u)
        d = np.exp(-2j * np.pi * self.delta_f * self.n * 2 * tau)
        return ((self.X @ a) * d)[:, None] * a[None, :]

    def objective(self, R: np.ndarray, thetas, taus) -> np.ndarray:
        """|h^H r|^2 / ||h||^2 on the grid ``taus x thetas``."""
        A = steering_vector(np.atleast_1d(thetas), self.N_u)  # (N_u, G)
        XA = self.X @ A
        RA = R @ A.conj()
        B = self.S @ (XA.conj() * RA)  # (U, G)
        E = np.exp(4j * np.pi * self.delta_f * np.outer(np.atleast_1d(taus), self.sub))
        C = E @ B
        norm2 = np.sum(np.abs(XA) ** 2, axis=0)
        return np.abs(C) ** 2 / np.maximum(norm2, np.finfo(float).tiny)


def _best_atom(D: _Dictionary, R, grid: GridConfig, thetas, taus, around=None):
    if around is None:
        obj = D.objective(R, thetas, taus)
        it, ia = np.unravel_index(int(np.argmax(obj)), obj.shape)
        th, tau, peak = thetas[ia], taus[it], obj[it, ia]
    else:
        th, tau = around
        peak = None
    dth, dtau = thetas[1] - thetas[0], taus[1] - taus[0]
    for _ in range(grid.zoom_rounds):
        dth, dtau = dth / grid.zoom_factor, dtau / grid.zoom_factor
        off = np.arange(-grid.zoom_factor, grid.zoom_factor + 1)
        cth, ctau = th + dth * off, tau + dtau * off
        ctau = ctau[ctau >= 0]
        obj = D.objective(R, cth, ctau)
        it, ia = np.unravel_index(int(np.argmax(obj)), obj.shape)
        th, tau, peak = cth[ia], ctau[it], obj[it, ia]
    return float(th), float(tau), float(peak)


def _project(Psi: np.ndarray, y: np.ndarray):
    gram = Psi.conj().T @ Psi
    rhs = Psi.conj().T @ y
    if np.linalg.cond(gram) > 1e12:
        warnings.warn("rank-deficient OMP atom set; using a regularized solve", RuntimeWarning)
        gram = gram + 1e-10 * np.trace(gram).real / gram.shape[0] * np.eye(gram.shape[0])
    gains = np.linalg.solve(gram, rhs)
    return gains, y - Psi @ gains


@dataclass
class OmpResult:
    delays: np.ndarray
    angles: np.ndarray
    gains: np.ndarray
    residual_norms: list = field(default_factory=list)


def omp_estimate(
    y: np.ndarray,
    x0: np.ndarray,
    mask: np.ndarray,
    s: int,
    delta_f: float,
    grid: GridConfig | None = None,
    refine_cycles: int = 0,
) -> OmpResult:
    """Greedy delay/angle estimation on the resources selected by ``mask``.

    Each iteration picks the atom with the largest normalized correlation to
    the residual, zooms in around it, and re-projects the data onto all atoms
    picked so far.  ``refine_cycles`` extra passes then re-optimize each atom
    against the data with the other atoms' fitted contributions removed.
    """
    grid = grid or GridConfig.for_spacing(delta_f)
    if s < 1:
        raise ValueError("s must be >= 1")
    if not mask.any():
        raise EstimationError("empty resource set")
    D = _Dictionary(x0, mask, delta_f)
    Y = y[mask]
    yv = Y.ravel()
    if not np.any(yv):
        raise EstimationError("observation is identically zero")
    thetas, taus = grid.angle_grid(), grid.delay_grid()

    params: list[tuple[float, float]] = []
    atoms: list[np.ndarray] = []
    R = Y.copy()
    norms = [float(np.linalg.norm(yv))]
    gains = np.zeros(0, dtype=complex)
    for _ in range(s):
        th, tau, peak = _best_atom(D, R, grid, thetas, taus)
        if peak <= 0:
            raise EstimationError("residual has no correlation with the dictionary")
        params.append((th, tau))
        atoms.append(D.atom(th, tau).ravel())
        gains, r = _project(np.stack(atoms, axis=1), yv)
        R = r.reshape(Y.shape)
        norms.append(float(np.linalg.norm(r)))

    for _ in range(refine_cycles if s > 1 else 0):
        for j in range(s):
            others = [k for k in range(s) if k != j]
            partial = yv - np.stack([atoms[k] for k in others], axis=1) @ gains[others]
            th, tau, _ = _best_atom(D, partial.reshape(Y.shape), grid, thetas, taus, around=params[j])
            params[j] = (th, tau)
            atoms[j] = D.atom(th, tau).ravel()
            gains, r = _project(np.stack(atoms, axis=1), yv)
        norms.append(float(np.linalg.norm(r)))

    angles = wrap_angle(np.array([p[0] for p in params]))
    return OmpResult(
        delays=np.array([p[1] for p in params]),
        angles=np.atleast_1d(angles),
        gains=gains,
        residual_norms=norms,
    )


# --------------------------------------------------------------------------
# association


def circular_cost(a, b):
    """min((a-b)^2, (|a-b| - 2 pi)^2), broadcasting."""
    d = np.abs(np.subtract(a, b))
    return np.minimum(d**2, (d - 2 * np.pi) ** 2)


@dataclass
class TargetEstimateSet:
    delays: np.ndarray
    angles: np.ndarray  # OMP angles
    init_angles: np.ndarray  # MUSIC angles
    updated_angles: np.ndarray
    assignment: np.ndarray  # permutation matrix X
    interferer: int  # w


def associate(delays, angles, music_angles, music_values) -> TargetEstimateSet:
    """Match OMP pairs to MUSIC angles and adopt the strongest MUSIC angle.

    Only the OMP pair assigned to the largest MUSIC peak takes over that
    peak's angle; every other pair keeps its OMP angle.
    """
    delays = np.asarray(delays, dtype=float)
    angles = np.asarray(angles, dtype=float)
    music_angles = np.asarray(music_angles, dtype=float)
    music_values = np.asarray(music_values, dtype=float)
    s = angles.size
    if delays.size != s or music_angles.size != s or music_values.size != s:
        raise ValueError("OMP and MUSIC estimate lists must have equal length")
    cost = circular_cost(angles[:, None], music_angles[None, :])
    rows, cols = linear_sum_assignment(cost)
    X = np.zeros((s, s), dtype=int)
    X[rows, cols] = 1
    w = int(np.argmax(music_values))
    updated = angles + X[:, w] * (music_angles[w] - angles)
    return TargetEstimateSet(
        delays=delays,
        angles=angles,
        init_angles=music_angles,
        updated_angles=wrap_angle(updated) if s else updated,
        assignment=X,
        interferer=w,
    )


def brute_force_assignment(cost: np.ndarray):
    """Exhaustive minimum-cost permutation; for small problems and tests."""
    s = cost.shape[0]
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(s)):
        c = cost[np.arange(s), perm].sum()
        if c < best:
            best, best_perm = c, perm
    return best, np.array(best_perm)


# --------------------------------------------------------------------------
# error metrics


def match_to_truth(est_angles, true_angles) -> np.ndarray:
    """Index of the estimate assigned to each truth target (circular angle cost)."""
    cost = circular_cost(np.asarray(true_angles)[:, None], np.asarray(est_angles)[None, :])
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(true_angles), dtype=int)
    out[rows] = cols
    return out


@dataclass
class RmseResult:
    delay: np.ndarray
    angle: np.ndarray
    delay_se: np.ndarray
    angle_se: np.ndarray
    successes: int
    failures: int


def rmse(estimates, true_delays, true_angles) -> RmseResult:
    """Per-target delay and angle RMSE over trials.

    ``estimates`` is a sequence with one ``(delays, angles)`` pair per trial,
    or ``None`` for a failed trial.  Estimates are matched to targets by
    angle before errors are taken; angle errors are wrapped to (-pi, pi].
    """
    true_delays = np.asarray(true_delays, dtype=float)
    true_angles = np.asarray(true_angles, dtype=float)
    de, ae = [], []
    failures = 0
    for est in estimates:
        if est is None:
            failures += 1
            continue
        d, a = (np.asarray(v, dtype=float) for v in est)
        idx = match_to_truth(a, true_angles)
        de.append(d[idx] - true_delays)
        ae.append(wrap_angle(a[idx] - true_angles))
    if not de:
        raise EstimationError("no successful trials")
    de2 = np.asarray(de) ** 2
    ae2 = np.atleast_2d(np.asarray(ae)) ** 2
    k = de2.shape[0]

    def _se(sq):
        # delta method on sqrt(mean)
        r = np.sqrt(sq.mean(axis=0))
        sd = sq.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else np.zeros(sq.shape[1])
        return np.where(r > 0, sd / (2 * np.maximum(r, 1e-300)), 0.0)

    return RmseResult(
        delay=np.sqrt(de2.mean(axis=0)),
        angle=np.sqrt(ae2.mean(axis=0)),
        delay_se=_se(de2),
        angle_se=_se(ae2),
        successes=k,
        failures=failures,
    )
