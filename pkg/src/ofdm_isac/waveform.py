"""Spectrally interleaved OFDM resources, Gaussian transmit symbols and the
received-signal model at the reference UE.

Subcarriers and symbols are indexed from zero.  User 0 is the reference UE;
users ``1..O`` are the interfering UEs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenario import ChannelParams


class AllocationError(ValueError):
    """Raised for infeasible resource-allocation requests."""


@dataclass
class ResourceAllocation:
    """Per-user frequency and time support on an ``N x T`` grid."""

    num_subcarriers: int
    num_symbols: int
    freq_sets: list  # sorted int arrays, one per user
    time_sets: list

    def __post_init__(self):
        self.freq_sets = [np.unique(np.asarray(f, dtype=int)) for f in self.freq_sets]
        self.time_sets = [np.unique(np.asarray(t, dtype=int)) for t in self.time_sets]
        if len(self.freq_sets) != len(self.time_sets):
            raise AllocationError("frequency and time sets must have equal length")
        for f, t in zip(self.freq_sets, self.time_sets):
            if f.size and (f.min() < 0 or f.max() >= self.num_subcarriers):
                raise AllocationError("subcarrier index out of range")
            if t.size and (t.min() < 0 or t.max() >= self.num_symbols):
                raise AllocationError("symbol index out of range")

    @property
    def num_users(self) -> int:
        return len(self.freq_sets)

    def mask(self, user: int) -> np.ndarray:
        """Boolean ``N x T`` mask of the user's resources."""
        m = np.zeros((self.num_subcarriers, self.num_symbols), dtype=bool)
        m[np.ix_(self.freq_sets[user], self.time_sets[user])] = True
        return m

    def count(self, user: int) -> int:
        return self.freq_sets[user].size * self.time_sets[user].size

    @property
    def interference_mask(self) -> np.ndarray:
        """Resources used by the reference UE and at least one interferer."""
        m = np.zeros((self.num_subcarriers, self.num_symbols), dtype=bool)
        for i in range(1, self.num_users):
            m |= self.mask(i)
        return m & self.mask(0)

    @property
    def clean_mask(self) -> np.ndarray:
        return self.mask(0) & ~self.interference_mask

    @property
    def interfered_subcarriers(self) -> np.ndarray:
        """Reference-UE subcarriers carrying interference in some used slot."""
        return np.flatnonzero(self.interference_mask.any(axis=1))

    @property
    def interfered_symbols(self) -> np.ndarray:
        return np.flatnonzero(self.interference_mask.any(axis=0))


def allocate_resources(
    N: int,
    T: int,
    n_rue: int,
    n_iue,
    n_overlap,
    rng: np.random.Generator,
) -> ResourceAllocation:
    """Draw random interleaved subcarrier sets with a controlled overlap.

    The reference UE gets ``n_rue`` subcarriers uniformly without replacement.
    Each interferer gets ``n_overlap`` of them plus ``n_iue - n_overlap``
    from the complement.  ``n_iue``/``n_overlap`` may be per-interferer
    sequences.  All users occupy every symbol.
    """
    n_iue_list = list(np.atleast_1d(n_iue))
    n_ovl_list = list(np.atleast_1d(n_overlap))
    if len(n_ovl_list) == 1 and len(n_iue_list) > 1:
        n_ovl_list *= len(n_iue_list)
    if len(n_ovl_list) != len(n_iue_list):
        raise AllocationError("n_iue and n_overlap lengths differ")
    if not 0 < n_rue <= N:
        raise AllocationError(f"cannot place {n_rue} subcarriers on a grid of {N}")
    for ni, k in zip(n_iue_list, n_ovl_list):
        if k < 0 or ni < 0 or k > min(n_rue, ni) or n_rue + ni - k > N:
            raise AllocationError(
                f"infeasible allocation: n_rue={n_rue}, n_iue={ni}, overlap={k}, N={N}"
            )

    rue = np.sort(rng.choice(N, size=n_rue, replace=False))
    complement = np.setdiff1d(np.arange(N), rue)
    freq = [rue]
    for ni, k in zip(n_iue_list, n_ovl_list):
        shared = rng.choice(rue, size=int(k), replace=False)
        own = rng.choice(complement, size=int(ni - k), replace=False)
        freq.append(np.sort(np.concatenate([shared, own])))
    times = [np.arange(T)] * len(freq)
    return ResourceAllocation(N, T, freq, times)


def steering_vector(theta, N_u: int) -> np.ndarray:
    """Half-wavelength ULA response, unit norm.

    A scalar angle gives shape ``(N_u,)``; an array of angles gives
    ``(N_u, len(theta))``.
    """
    k = np.arange(N_u)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        return np.exp(1j * np.pi * np.sin(theta) * k) / np.sqrt(N_u)
    return np.exp(1j * np.pi * np.outer(k, np.sin(theta))) / np.sqrt(N_u)


def steering_derivative(theta, N_u: int) -> np.ndarray:
    """d a(theta) / d theta, same shape convention as :func:`steering_vector`."""
    k = np.arange(N_u)
    theta = np.asarray(theta, dtype=float)
    a = steering_vector(theta, N_u)
    if theta.ndim == 0:
        return a * (1j * np.pi * np.cos(theta) * k)
    return a * (1j * np.pi * np.outer(k, np.cos(theta)))


def delay_response(n, tau, delta_f: float):
    """exp(-j 2 pi delta_f n tau); broadcasts over ``n`` and ``tau``."""
    return np.exp(-2j * np.pi * delta_f * np.multiply(n, tau))


@dataclass
class TransmitGrid:
    """Transmit vectors of every user; ``x[i, n, t]`` is user i's N_u-vector."""

    x: np.ndarray  # (O+1, N, T, N_u)
    variances: np.ndarray  # per-entry variance sigma_i^2


def synthesize_transmit(
    alloc: ResourceAllocation,
    powers: Sequence[float],
    N_u: int,
    rng: np.random.Generator,
) -> TransmitGrid:
    """Draw iid circularly-symmetric Gaussian symbols on each user's support.

    Every user is normalized by the reference UE's resource count:
    ``sigma_i^2 = E_i / (M0 * N_u)``.
    """
    if len(powers) != alloc.num_users:
        raise ValueError(f"expected {alloc.num_users} powers, got {len(powers)}")
    m0 = alloc.count(0)
    variances = np.array([p / (m0 * N_u) for p in powers], dtype=float)
    shape = (alloc.num_users, alloc.num_subcarriers, alloc.num_symbols, N_u)
    x = np.zeros(shape, dtype=complex)
    for i in range(alloc.num_users):
        m = alloc.mask(i)
        cnt = int(m.sum())
        if cnt == 0 or variances[i] == 0:
            continue
        draws = rng.standard_normal((cnt, N_u)) + 1j * rng.standard_normal((cnt, N_u))
        x[i][m] = draws * np.sqrt(variances[i] / 2)
    return TransmitGrid(x=x, variances=variances)


@dataclass
class ReceivedTensor:
    y: np.ndarray  # (N, T, N_u)
    alloc: ResourceAllocation
    params: ChannelParams | None = None
    tx: TransmitGrid | None = None


def _path_term(x_user, phi, theta, tau, gain, delta_f, N_u):
    """gain * <a*(phi), x> d_n(tau) a(theta) on the full grid."""
    n = np.arange(x_user.shape[0])
    beam = x_user @ steering_vector(phi, N_u)  # a^T(phi) x, shape (N, T)
    d = delay_response(n, tau, delta_f)
    return gain * (beam * d[:, None])[..., None] * steering_vector(theta, N_u)


def noiseless_received(params: ChannelParams, tx: TransmitGrid, delta_f: float) -> np.ndarray:
    """Sum of the monostatic, direct and cross path groups (no noise)."""
    x = tx.x
    N, T, N_u = x.shape[1:]
    y = np.zeros((N, T, N_u), dtype=complex)
    for l in range(params.num_objects):
        th = params.aoa[l]
        y += _path_term(x[0], th, th, 2 * params.toa[l], params.mono_gains[l], delta_f, N_u)
    mask = params.cross_mask
    for i in range(params.num_iue):
        y += _path_term(
            x[i + 1], params.aod[i], params.aoa[i], params.toa[i],
            params.direct_gains[i], delta_f, N_u,
        )
        for l in range(params.num_objects):
            if not mask[i, l]:
                continue
            y += _path_term(
                x[i + 1], params.aod_cross[i, l], params.aoa[l], params.toa_cross[i, l],
                params.cross_gains[i, l], delta_f, N_u,
            )
    return y


def synthesize_received(
    params: ChannelParams,
    tx: TransmitGrid,
    alloc: ResourceAllocation,
    noise_power: float,
    rng: np.random.Generator,
    delta_f: float,
) -> ReceivedTensor:
    """Received tensor at the reference UE plus iid CN(0, noise_power) noise."""
    y = noiseless_received(params, tx, delta_f)
    if noise_power > 0:
        w = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        y = y + w * np.sqrt(noise_power / 2)
    return ReceivedTensor(y=y, alloc=alloc, params=params, tx=tx)


def dump_realization(rx: ReceivedTensor, path) -> None:
    """Write masks and the tensor for offline debugging.

    ``<path>.bin`` holds the tensor row-major over (n, t, k) as interleaved
    little-endian float64 real/imag pairs; ``<path>_masks.csv`` lists, per
    (n, t), the user-usage flags.
    """
    path = Path(path)
    inter = np.empty(rx.y.shape + (2,), dtype="<f8")
    inter[..., 0] = rx.y.real
    inter[..., 1] = rx.y.imag
    inter.tofile(path.with_suffix(".bin"))
    alloc = rx.alloc
    masks = [alloc.mask(i) for i in range(alloc.num_users)]
    with open(path.with_name(path.stem + "_masks.csv"), "w") as fh:
        fh.write("n,t," + ",".join(f"user{i}" for i in range(alloc.num_users)) + "\n")
        for n in range(alloc.num_subcarriers):
            for t in range(alloc.num_symbols):
                flags = ",".join(str(int(m[n, t])) for m in masks)
                fh.write(f"{n},{t},{flags}\n")


def load_tensor(path, shape) -> np.ndarray:
    raw = np.fromfile(Path(path).with_suffix(".bin"), dtype="<f8").reshape(tuple(shape) + (2,))
    return raw[..., 0] + 1j * raw[..., 1]
