"""Scenario geometry, radio constants and deterministic channel parameters.

Objects are indexed ``l = 0 .. O+L-1`` with the interfering UEs first,
followed by the passive scatter points.  The reference UE sits at the origin.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class DegenerateGeometryError(ValueError):
    """Raised when two positions coincide (a distance would be zero)."""


def wrap_angle(theta):
    """Map angles to the half-open interval (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return out if out.ndim else float(out)


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass
class ScenarioConfig:
    """Geometry, radio and power settings of one sensing scenario.

    Positions are 2-D, in meters.  ``tx_power_w[0]`` is the reference UE's
    power and ``tx_power_w[i]`` the power of the i-th interfering UE.
    ``noise_power_w`` is the complex noise variance per resource element.
    """

    iue_positions: list
    sp_positions: list
    carrier_freq_hz: float = 15e9
    subcarrier_spacing_hz: float = 250e3
    num_subcarriers: int = 64
    num_symbols: int = 30
    num_antennas: int = 6
    noise_power_w: float = dbm_to_watt(-173.85) * 250e3
    tx_power_w: list = field(default_factory=lambda: [0.05, 0.05])
    rng_seed: int = 0
    rue_position: list = field(default_factory=lambda: [0.0, 0.0])

    def __post_init__(self):
        self.rue_position = [float(v) for v in self.rue_position]
        self.iue_positions = [[float(v) for v in p] for p in self.iue_positions]
        self.sp_positions = [[float(v) for v in p] for p in self.sp_positions]
        self.tx_power_w = [float(v) for v in self.tx_power_w]
        self.validate()

    @property
    def num_iue(self) -> int:
        return len(self.iue_positions)

    @property
    def num_sp(self) -> int:
        return len(self.sp_positions)

    @property
    def num_objects(self) -> int:
        return self.num_iue + self.num_sp

    @property
    def object_positions(self) -> np.ndarray:
        return np.array(self.iue_positions + self.sp_positions, dtype=float).reshape(-1, 2)

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq_hz

    def validate(self) -> None:
        if any(v != 0.0 for v in self.rue_position):
            raise ValueError("the reference UE must be located at the origin")
        if self.num_iue < 1:
            raise ValueError("at least one interfering UE is required")
        if len(self.tx_power_w) != self.num_iue + 1:
            raise ValueError(
                f"expected {self.num_iue + 1} transmit powers, got {len(self.tx_power_w)}"
            )
        if any(p < 0 for p in self.tx_power_w):
            raise ValueError("transmit powers must be nonnegative")
        if self.noise_power_w <= 0:
            raise ValueError("noise power must be positive")
        for name in ("num_subcarriers", "num_symbols", "num_antennas"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_antennas < 2:
            raise ValueError("at least two antennas are required")
        if self.carrier_freq_hz <= 0 or self.subcarrier_spacing_hz <= 0:
            raise ValueError("frequencies must be positive")
        pts = np.vstack([np.zeros((1, 2)), self.object_positions])
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if np.any(dist <= 0.0):
            raise DegenerateGeometryError("two scenario positions coincide")

    def with_powers(self, *powers: float) -> "ScenarioConfig":
        data = asdict(self)
        data["tx_power_w"] = list(powers)
        return ScenarioConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_config(path) -> ScenarioConfig:
    """Read a :class:`ScenarioConfig` from a JSON file (SI units)."""
    with open(Path(path), "r") as fh:
        return ScenarioConfig.from_dict(json.load(fh))


def save_config(config: ScenarioConfig, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)


def table1_config(e0: float = 0.05, e1: float = 0.05, seed: int = 0) -> ScenarioConfig:
    """The single-iUE, single-SP reference scenario.

    The tabulated -173.85 dBm noise figure is a density (dBm/Hz); it is
    integrated over one subcarrier to obtain the per-element variance.
    """
    return ScenarioConfig(
        iue_positions=[[5.0, 14.0]],
        sp_positions=[[17.0, 6.0]],
        carrier_freq_hz=15e9,
        subcarrier_spacing_hz=250e3,
        num_subcarriers=64,
        num_symbols=30,
        num_antennas=6,
        noise_power_w=dbm_to_watt(-173.85) * 250e3,
        tx_power_w=[e0, e1],
        rng_seed=seed,
    )


@dataclass
class ChannelParams:
    """All channel quantities of one realization.

    Cross-path arrays have shape ``(O, O+L)``; entries with ``l == i`` are
    unused and set to zero (see ``cross_mask``).
    """

    wavelength_m: float
    mono_gains: np.ndarray  # (O+L,) rUE -> object -> rUE
    direct_gains: np.ndarray  # (O,) iUE -> rUE
    cross_gains: np.ndarray  # (O, O+L) iUE -> object -> rUE
    aoa: np.ndarray  # (O+L,)
    aod: np.ndarray  # (O,)
    aod_cross: np.ndarray  # (O, O+L)
    toa: np.ndarray  # (O+L,)
    toa_cross: np.ndarray  # (O, O+L)

    @property
    def num_iue(self) -> int:
        return self.direct_gains.shape[0]

    @property
    def num_objects(self) -> int:
        return self.mono_gains.shape[0]

    @property
    def cross_mask(self) -> np.ndarray:
        mask = np.ones((self.num_iue, self.num_objects), dtype=bool)
        mask[np.arange(self.num_iue), np.arange(self.num_iue)] = False
        return mask

    @property
    def delay_offsets(self) -> np.ndarray:
        """``toa_cross - toa``: the fixed extra path length of each cross path."""
        return np.where(self.cross_mask, self.toa_cross - self.toa[None, :], 0.0)

    def scaled(self, mono=1.0, direct=1.0, cross=1.0) -> "ChannelParams":
        """Copy with the three gain groups multiplied by the given factors."""
        return ChannelParams(
            wavelength_m=self.wavelength_m,
            mono_gains=self.mono_gains * mono,
            direct_gains=self.direct_gains * direct,
            cross_gains=self.cross_gains * cross,
            aoa=self.aoa.copy(),
            aod=self.aod.copy(),
            aod_cross=self.aod_cross.copy(),
            toa=self.toa.copy(),
            toa_cross=self.toa_cross.copy(),
        )


def derive_channel_params(config: ScenarioConfig, rng: np.random.Generator) -> ChannelParams:
    """Compute path gains, angles and delays from the scenario geometry.

    Magnitudes, angles and delays are deterministic.  Every path phase is
    drawn iid uniform on [0, 2*pi) from ``rng``.  Monostatic gains use the
    scatter-path law with the reference UE as transmitter, which gives the
    two-way ``|p_l|**-4`` power decay.
    """
    config.validate()
    lam = config.wavelength_m
    pos = config.object_positions
    n_iue, n_obj = config.num_iue, config.num_objects
    rng_ = np.linalg.norm(pos, axis=1)

    aoa = wrap_angle(np.arctan2(pos[:, 1], pos[:, 0]))
    toa = rng_ / SPEED_OF_LIGHT

    mono_mag2 = lam**2 * (4 * np.pi) ** -3 * rng_**-4
    direct_mag2 = lam**2 * (4 * np.pi) ** -2 * rng_[:n_iue] ** -2

    theta_i = aoa[:n_iue]
    aod = wrap_angle(np.where(theta_i >= 0, theta_i - np.pi, theta_i + np.pi))

    rel = pos[None, :, :] - pos[:n_iue, None, :]  # p_l - p_i, shape (O, O+L, 2)
    sep = np.linalg.norm(rel, axis=-1)
    mask = np.ones((n_iue, n_obj), dtype=bool)
    mask[np.arange(n_iue), np.arange(n_iue)] = False
    safe_sep = np.where(mask, sep, 1.0)
    cross_mag2 = np.where(mask, lam**2 * (4 * np.pi) ** -3 * safe_sep**-2 * rng_[None, :] ** -2, 0.0)
    aod_cross = np.where(mask, wrap_angle(np.arctan2(rel[..., 1], rel[..., 0])), 0.0)
    toa_cross = np.where(mask, toa[None, :] + safe_sep / SPEED_OF_LIGHT, 0.0)

    two_pi = 2 * np.pi
    mono = np.sqrt(mono_mag2) * np.exp(1j * rng.uniform(0, two_pi, n_obj))
    direct = np.sqrt(direct_mag2) * np.exp(1j * rng.uniform(0, two_pi, n_iue))
    cross = np.sqrt(cross_mag2) * np.exp(1j * rng.uniform(0, two_pi, (n_iue, n_obj)))
    cross = np.where(mask, cross, 0.0)

    return ChannelParams(
        wavelength_m=lam,
        mono_gains=mono,
        direct_gains=direct,
        cross_gains=cross,
        aoa=np.atleast_1d(aoa),
        aod=np.atleast_1d(aod),
        aod_cross=aod_cross,
        toa=toa,
        toa_cross=toa_cross,
    )
