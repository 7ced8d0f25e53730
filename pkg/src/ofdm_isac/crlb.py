"""Fisher information and delay/angle error bounds under the Gaussian model.

Given the reference UE's symbols, ``y_{n,t} ~ CN(mu_{n,t}, Sigma_{n,t})``: the
monostatic echoes form the mean and the interferers' unknown Gaussian symbols
enter the covariance.  The parameter vector is ordered

    [tau_1..tau_{O+L}, theta_1..theta_{O+L}, Re(g_1..g_G), Im(g_1..g_G)]

where the complex gains ``g`` are the monostatic gains, then the direct
iUE gains, then the cross gains (row-major over ``(i, l)``, ``l != i``).
Departure angles and the extra cross-path delays are treated as known.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .scenario import ChannelParams, ScenarioConfig, derive_channel_params
from .waveform import (
    ResourceAllocation,
    allocate_resources,
    delay_response,
    steering_derivative,
    steering_vector,
    synthesize_transmit,
)


class IllConditionedError(np.linalg.LinAlgError):
    def __init__(self, msg, condition):
        super().__init__(msg)
        self.condition = condition


# --------------------------------------------------------------------------
# parameter vector


def num_gains(params: ChannelParams) -> int:
    return params.num_objects + params.num_iue + int(params.cross_mask.sum())


def pack(params: ChannelParams) -> np.ndarray:
    g = np.concatenate([params.mono_gains, params.direct_gains, params.cross_gains[params.cross_mask]])
    return np.concatenate([params.toa, params.aoa, g.real, g.imag])


def unpack(eta: np.ndarray, template: ChannelParams) -> ChannelParams:
    """Rebuild channel parameters from ``eta``; fixed quantities come from ``template``."""
    L = template.num_objects
    O = template.num_iue
    G = num_gains(template)
    tau = eta[:L]
    theta = eta[L : 2 * L]
    g = eta[2 * L : 2 * L + G] + 1j * eta[2 * L + G : 2 * L + 2 * G]
    mask = template.cross_mask
    cross = np.zeros_like(template.cross_gains)
    cross[mask] = g[L + O :]
    toa_cross = np.where(mask, tau[None, :] + template.delay_offsets, 0.0)
    return ChannelParams(
        wavelength_m=template.wavelength_m,
        mono_gains=g[:L].copy(),
        direct_gains=g[L : L + O].copy(),
        cross_gains=cross,
        aoa=theta.copy(),
        aod=template.aod.copy(),
        aod_cross=template.aod_cross.copy(),
        toa=tau.copy(),
        toa_cross=toa_cross,
    )


def fd_steps(params: ChannelParams, delay_step=1e-12, angle_step=1e-7, gain_step=1e-9) -> np.ndarray:
    L = params.num_objects
    G = num_gains(params)
    return np.concatenate([np.full(L, delay_step), np.full(L, angle_step), np.full(2 * G, gain_step)])


# --------------------------------------------------------------------------
# mean


def mean_vectors(params: ChannelParams, X: np.ndarray, n: np.ndarray, delta_f: float) -> np.ndarray:
    """mu for each resource; ``X`` holds the reference UE's symbols, shape (M, N_u)."""
    N_u = X.shape[-1]
    A = steering_vector(params.aoa, N_u)  # (N_u, L)
    S = X @ A  # a^T(theta_l) x, (M, L)
    D = delay_response(n[:, None], 2 * params.toa[None, :], delta_f)
    return (S * D * params.mono_gains[None, :]) @ A.T


def mean_vector(n: int, t: int, params: ChannelParams, x0: np.ndarray, delta_f: float) -> np.ndarray:
    """mu_{n,t} from the full transmit grid ``x0`` of shape (N, T, N_u)."""
    return mean_vectors(params, x0[n, t][None, :], np.array([n]), delta_f)[0]


def mean_jacobian(params: ChannelParams, X: np.ndarray, n: np.ndarray, delta_f: float) -> np.ndarray:
    """Analytic d mu / d eta, shape (M, P, N_u)."""
    M, N_u = X.shape
    L = params.num_objects
    G = num_gains(params)
    P = 2 * L + 2 * G
    A = steering_vector(params.aoa, N_u)
    dA = steering_derivative(params.aoa, N_u)
    S = X @ A
    dS = X @ dA
    D = delay_response(n[:, None], 2 * params.toa[None, :], delta_f)
    g = params.mono_gains
    J = np.zeros((M, P, N_u), dtype=complex)
    base = (S * D)[:, :, None] * A.T[None, :, :]  # (M, L, N_u)
    w = -4j * np.pi * delta_f * n[:, None, None]
    J[:, :L] = g[None, :, None] * w * base
    J[:, L : 2 * L] = g[None, :, None] * D[:, :, None] * (
        dS[:, :, None] * A.T[None] + S[:, :, None] * dA.T[None]
    )
    J[:, 2 * L : 3 * L] = base
    J[:, 2 * L + G : 3 * L + G] = 1j * base
    return J


# --------------------------------------------------------------------------
# covariance


def _outer(u, v):
    return np.outer(u, v.conj())


def covariance_matrix(
    n: int,
    t: int,
    params: ChannelParams,
    alloc: ResourceAllocation,
    noise_power: float,
    variances,
    delta_f: float,
    N_u: int,
) -> np.ndarray:
    """Sigma_{n,t}: noise plus the interferers active on (n, t)."""
    active = [i for i in range(1, alloc.num_users) if alloc.mask(i)[n, t]]
    return _covariance(n, active, params, noise_power, variances, delta_f, N_u)


def _covariance(n, active, params, noise_power, variances, delta_f, N_u):
    sigma = noise_power * np.eye(N_u, dtype=complex)
    mask = params.cross_mask
    a = lambda th: steering_vector(th, N_u)
    for user in active:
        i = user - 1
        ai = a(params.aoa[i])
        phi_i = a(params.aod[i])
        term = abs(params.direct_gains[i]) ** 2 * _outer(ai, ai)
        others = [l for l in range(params.num_objects) if mask[i, l]]
        for l in others:
            al = a(params.aoa[l])
            phi_il = a(params.aod_cross[i, l])
            term += abs(params.cross_gains[i, l]) ** 2 * _outer(al, al)
            V = (
                _outer(ai, al)
                * params.direct_gains[i]
                * np.conj(params.cross_gains[i, l])
                * np.vdot(phi_il, phi_i)
                * delay_response(n, params.toa[i] - params.toa_cross[i, l], delta_f)
            )
            term += V + V.conj().T
            for j in others:
                if j >= l:
                    break
                aj = a(params.aoa[j])
                W = (
                    _outer(al, aj)
                    * params.cross_gains[i, l]
                    * np.conj(params.cross_gains[i, j])
                    * np.vdot(a(params.aod_cross[i, j]), phi_il)
                    * delay_response(n, params.toa_cross[i, l] - params.toa_cross[i, j], delta_f)
                )
                term += W + W.conj().T
        sigma += variances[user] * term
    return sigma


def covariance_jacobian(n, active, params, noise_power, variances, delta_f, N_u, steps=None,
                        check_tol: float = 1e-4):
    """Central-difference d Sigma / d eta, shape (P, N_u, N_u).

    Each derivative is taken with step h and 2h; the pair is combined by
    Richardson extrapolation and a warning is raised when they disagree by
    more than ``check_tol`` (relative Frobenius).
    """
    eta0 = pack(params)
    steps = fd_steps(params) if steps is None else steps
    P = eta0.size
    out = np.zeros((P, N_u, N_u), dtype=complex)
    if not active:
        return out

    def sig(eta):
        return _covariance(n, active, unpack(eta, params), noise_power, variances, delta_f, N_u)

    worst = 0.0
    for p in range(P):
        e = np.zeros(P)
        e[p] = steps[p]
        d1 = (sig(eta0 + e) - sig(eta0 - e)) / (2 * steps[p])
        d2 = (sig(eta0 + 2 * e) - sig(eta0 - 2 * e)) / (4 * steps[p])
        scale = np.linalg.norm(d1)
        if scale > 0:
            worst = max(worst, np.linalg.norm(d1 - d2) / scale)
        out[p] = (4 * d1 - d2) / 3
    if worst > check_tol:
        warnings.warn(f"covariance derivative step check off by {worst:.2e}", RuntimeWarning)
    return out


# --------------------------------------------------------------------------
# Fisher information


def fim(
    params: ChannelParams,
    resource_mask: np.ndarray,
    x0: np.ndarray,
    alloc: ResourceAllocation,
    noise_power: float,
    variances,
    delta_f: float,
    mean_jac=mean_jacobian,
    cov_jac=covariance_jacobian,
) -> np.ndarray:
    """Slepian-Bangs information accumulated over the resources in ``resource_mask``.

    ``x0`` is the reference UE's symbol grid, shape (N, T, N_u).  Resources
    are grouped by subcarrier and set of active interferers, which share
    Sigma and its derivatives.
    """
    N_u = x0.shape[-1]
    P = pack(params).size
    F = np.zeros((P, P))
    if not np.any(resource_mask):
        return F
    n_idx, t_idx = np.nonzero(resource_mask & alloc.mask(0))
    user_masks = [alloc.mask(i) for i in range(1, alloc.num_users)]
    keys = np.zeros(n_idx.size, dtype=np.int64)
    for bit, m in enumerate(user_masks):
        keys |= m[n_idx, t_idx].astype(np.int64) << bit
    X = x0[n_idx, t_idx]
    J = mean_jac(params, X, n_idx, delta_f)

    groups = {}
    for r, key in enumerate(zip(n_idx.tolist(), keys.tolist())):
        groups.setdefault(key, []).append(r)
    for (n, key), rows in sorted(groups.items()):
        active = [b + 1 for b in range(len(user_masks)) if key >> b & 1]
        sigma = _covariance(n, active, params, noise_power, variances, delta_f, N_u)
        sinv = np.linalg.inv(sigma)
        sinv = 0.5 * (sinv + sinv.conj().T)
        Jg = J[rows]
        F += 2 * np.einsum("mpk,kl,mql->pq", Jg.conj(), sinv, Jg).real
        if active:
            dS = cov_jac(n, active, params, noise_power, variances, delta_f, N_u)
            Q = sinv[None] @ dS
            F += len(rows) * np.einsum("pij,qji->pq", Q, Q).real
    return 0.5 * (F + F.T)


@dataclass
class CrlbReport:
    F: np.ndarray
    K: np.ndarray
    deb: np.ndarray
    aeb: np.ndarray
    condition: float
    active: np.ndarray  # parameters kept (nonzero information)


def phase_null_vectors(params: ChannelParams) -> np.ndarray:
    """Directions of zero information, one column per interferer.

    Sigma sees an interferer's gains only through products like
    ``alpha_i conj(alpha_il)``, so rotating all of them by a common phase
    leaves the model unchanged.
    """
    L, O = params.num_objects, params.num_iue
    G = num_gains(params)
    g = pack(params)[2 * L :]
    re, im = g[:G], g[G:]
    owner = np.concatenate([np.full(L, -1), np.arange(O), np.nonzero(params.cross_mask)[0]])
    out = np.zeros((2 * L + 2 * G, O))
    for i in range(O):
        sel = owner == i
        out[2 * L : 2 * L + G, i] = np.where(sel, -im, 0.0)
        out[2 * L + G :, i] = np.where(sel, re, 0.0)
    return out


def bounds(F: np.ndarray, num_objects: int, null_vectors: np.ndarray | None = None,
           max_condition: float = 1e12) -> CrlbReport:
    """Invert the information matrix and read off DEB and AEB per target.

    Nuisance parameters with zero information (gains that do not touch the
    chosen resources) are dropped.  Known unidentifiable directions
    (``null_vectors``, e.g. from :func:`phase_null_vectors`) are projected
    out, which yields the pseudo-inverse on the identifiable subspace.  The
    inversion runs on the diagonally scaled matrix via Cholesky, gated by
    its condition number.
    """
    L = num_objects
    diag = np.diag(F).copy()
    active = diag > 0
    if not np.all(active[: 2 * L]):
        raise IllConditionedError("zero information on a delay or angle", np.inf)
    Fa = F[np.ix_(active, active)]
    d = np.sqrt(np.diag(Fa))
    Fs = Fa / np.outer(d, d)
    basis = np.eye(Fs.shape[0])
    if null_vectors is not None:
        nv = null_vectors[active] * d[:, None]
        nv = nv[:, np.linalg.norm(nv, axis=0) > 0]
        if nv.size:
            u, sv, _ = np.linalg.svd(nv, full_matrices=True)
            rank = int(np.sum(sv > 1e-12 * sv.max()))
            basis = u[:, rank:]
    Fr = basis.T @ Fs @ basis
    cond = float(np.linalg.cond(Fr))
    if not np.isfinite(cond) or cond > max_condition:
        raise IllConditionedError(f"information matrix ill-conditioned (cond={cond:.3g})", cond)
    c = np.linalg.cholesky(Fr)
    cinv = np.linalg.solve(c, np.eye(c.shape[0]))
    Ks = basis @ (cinv.T @ cinv) @ basis.T
    Ka = Ks / np.outer(d, d)
    K = np.full_like(F, np.nan)
    K[np.ix_(active, active)] = Ka
    dk = np.diag(K)
    return CrlbReport(
        F=F,
        K=K,
        deb=np.sqrt(dk[:L]),
        aeb=np.sqrt(dk[L : 2 * L]),
        condition=cond,
        active=active,
    )


@dataclass
class AveragedBounds:
    deb_all: np.ndarray
    aeb_all: np.ndarray
    deb_clean: np.ndarray
    aeb_clean: np.ndarray
    realizations: int


def realization_bounds(params, alloc, x0, noise_power, variances, delta_f):
    """Bounds over all used resources and over the clean resources."""
    L = params.num_objects
    used = alloc.mask(0)
    F_all = fim(params, used, x0, alloc, noise_power, variances, delta_f)
    F_clean = fim(params, alloc.clean_mask, x0, alloc, noise_power, variances, delta_f)
    nulls = phase_null_vectors(params)
    return bounds(F_all, L, nulls), bounds(F_clean, L, nulls)


def average_bounds(
    config: ScenarioConfig,
    n_rue: int,
    n_iue: int,
    overlap: int,
    realizations: int = 50,
    rng: np.random.Generator | None = None,
) -> AveragedBounds:
    """Mean of sqrt(K) over random allocations, phases and symbol draws."""
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    dfreq = config.subcarrier_spacing_hz
    acc = []
    for _ in range(realizations):
        params = derive_channel_params(config, rng)
        alloc = allocate_resources(config.num_subcarriers, config.num_symbols, n_rue, n_iue, overlap, rng)
        tx = synthesize_transmit(alloc, config.tx_power_w, config.num_antennas, rng)
        b_all, b_clean = realization_bounds(params, alloc, tx.x[0], config.noise_power_w, tx.variances, dfreq)
        acc.append((b_all.deb, b_all.aeb, b_clean.deb, b_clean.aeb))
    arr = np.array(acc)
    m = arr.mean(axis=0)
    return AveragedBounds(m[0], m[1], m[2], m[3], realizations)
