"""Network geometry: random AP/UE drops and the deterministic per-link
quantities everything downstream consumes (3-D distances, departure angles,
blockage-driven LoS probabilities, NLoS path loss).

All quantities are linear (not dB). dB conversions happen only at the CLI.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np
from scipy.special import erf as _scipy_erf

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299792458.0


class ConfigError(ValueError):
    """A configuration is malformed or physically inconsistent."""


@dataclass(frozen=True)
class NetworkConfig:
    """Scenario parameters for one cell-free deployment.

    Defaults follow the reference scenario: 1 km^2 area, 3.5 GHz carrier,
    10 m APs serving 1.5 m UEs through a built-up blockage field.
    """

    num_aps: int = 1024            # M
    antennas_per_ap: int = 1       # N, uniform linear array per AP
    num_ues: int = 64              # K, single-antenna users
    area_side: float = 1000.0      # m, square deployment region
    ap_height: float = 10.0        # m
    ue_height: float = 1.5         # m
    carrier_freq: float = 3.5e9    # Hz
    antenna_spacing: float = 0.0   # m; 0 means half a wavelength
    ap_gain: float = 1.0           # linear
    ue_gain: float = 1.0           # linear
    built_fraction: float = 0.5    # fraction of area covered by blockages
    blockage_density: float = 300e-6   # blockages per m^2
    avg_blockage_height: float = 20.0  # m
    noise_ul: float = 1e-10        # normalized uplink pilot noise power
    noise_dl: float = 1e-12        # normalized downlink pilot noise power
    noise_data: float = 1e-2       # normalized data-phase noise power
    pathloss_exponent: float = 3.67
    pathloss_ref_distance: float = 1.0  # m
    shadowing_db: float = 0.0      # lognormal NLoS shadowing std; 0 disables
    power_budget: float = 1.0      # per-AP budget; per-UE budget scales by M/K

    def __post_init__(self):
        if self.num_aps < 1 or self.antennas_per_ap < 1 or self.num_ues < 1:
            raise ConfigError("num_aps, antennas_per_ap and num_ues must be positive")
        if self.num_aps * self.antennas_per_ap < self.num_ues:
            raise ConfigError(
                f"need M*N >= K, got M*N={self.num_aps * self.antennas_per_ap} "
                f"and K={self.num_ues}"
            )
        positive = (
            "area_side", "ap_height", "ue_height", "carrier_freq", "ap_gain",
            "ue_gain", "blockage_density", "avg_blockage_height", "noise_ul",
            "noise_dl", "noise_data", "pathloss_exponent",
            "pathloss_ref_distance", "power_budget",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if not 0.0 < self.built_fraction <= 1.0:
            raise ConfigError("built_fraction must lie in (0, 1]")
        if self.antenna_spacing < 0:
            raise ConfigError("antenna_spacing must be nonnegative")
        if self.shadowing_db < 0:
            raise ConfigError("shadowing_db must be nonnegative")
        if self.ap_height <= self.ue_height:
            raise ConfigError("ap_height must exceed ue_height")
        # fail early on inconsistent blockage statistics
        blockage_aspect(self)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def spacing(self) -> float:
        """Antenna spacing in meters, defaulting to half a wavelength."""
        return self.antenna_spacing if self.antenna_spacing > 0 else 0.5 * self.wavelength


def erf(z):
    """Standard error function, (2/sqrt(pi)) * int_0^z exp(-t^2) dt.

    Odd, bounded by 1 in magnitude; accepts scalars or arrays.
    """
    return _scipy_erf(z)


@lru_cache(maxsize=None)
def _omega(ap_height: float, ue_height: float, blockage_height: float) -> float:
    rho = blockage_height
    val = (
        math.sqrt(math.pi / 2.0)
        * rho / (ap_height - ue_height)
        * (math.erf(ap_height / (rho * math.sqrt(2.0)))
           - math.erf(ue_height / (rho * math.sqrt(2.0))))
    )
    return val


def blockage_aspect(config: NetworkConfig) -> float:
    """Per-config blockage aspect ratio entering the LoS probability.

    Cached per (heights, blockage height); values outside [0, 1] indicate
    physically inconsistent blockage parameters and are rejected.
    """
    val = _omega(config.ap_height, config.ue_height, config.avg_blockage_height)
    if not 0.0 <= val <= 1.0:
        raise ConfigError(
            f"blockage aspect {val:.6g} outside [0, 1]; "
            "heights/blockage statistics are inconsistent"
        )
    return val


def los_probability(d2d, config: NetworkConfig):
    """Probability that a link with ground distance ``d2d`` is unblocked.

    Base (1 - omega) raised to the expected number of blockages crossed,
    sqrt(eta * mu) * d2d.  Decreasing in distance, built fraction and
    blockage density; equals 1 at zero distance.
    """
    omega = blockage_aspect(config)
    d2d = np.asarray(d2d, dtype=float)
    exponent = math.sqrt(config.built_fraction * config.blockage_density) * d2d
    q = np.power(1.0 - omega, exponent)
    return np.clip(q, 0.0, 1.0)


def nlos_pathloss(d3d, config: NetworkConfig):
    """Log-distance NLoS slow-fading gain, free-space anchored at d0.

    beta = (lambda / (4 pi d0))^2 * (d0 / d)^exponent.  Distances below the
    reference distance are clamped to it (and flagged in the log).
    """
    d0 = config.pathloss_ref_distance
    d3d = np.asarray(d3d, dtype=float)
    n_below = int(np.count_nonzero(d3d < d0))
    if n_below:
        log.warning("clamping %d link distance(s) below d0=%g m", n_below, d0)
        d3d = np.maximum(d3d, d0)
    ref_gain = (config.wavelength / (4.0 * math.pi * d0)) ** 2
    return ref_gain * np.power(d0 / d3d, config.pathloss_exponent)


@dataclass(frozen=True)
class Deployment:
    """One random network drop plus all derived per-link geometry.

    Arrays are write-protected after construction; a Deployment can be
    shared freely across threads and Monte-Carlo workers.
    """

    config: NetworkConfig
    ap_positions: np.ndarray    # (M, 2) m
    ue_positions: np.ndarray    # (K, 2) m
    orientations: np.ndarray    # (M,) rad, array broadside per AP
    dist2d: np.ndarray          # (M, K) ground distances
    dist3d: np.ndarray          # (M, K) link distances
    angle: np.ndarray           # (M, K) departure angles from broadside
    los_prob: np.ndarray        # (M, K) in [0, 1]
    beta: np.ndarray            # (M, K) NLoS slow-fading gains

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                value.flags.writeable = False


def deploy(config: NetworkConfig, seed: int,
           ap_positions=None, ue_positions=None) -> Deployment:
    """Sample a deployment: i.i.d. uniform AP/UE positions over the square.

    The same seed always yields the same drop.  Explicit ``ap_positions`` /
    ``ue_positions`` (shape (M,2) / (K,2)) override the sampled ones, which
    is the hook used by geometry edge-case tests; derived matrices are
    always recomputed.
    """
    rng = np.random.default_rng(seed)
    side = config.area_side
    aps = rng.uniform(0.0, side, size=(config.num_aps, 2))
    ues = rng.uniform(0.0, side, size=(config.num_ues, 2))
    orientations = rng.uniform(0.0, 2.0 * math.pi, size=config.num_aps)
    if ap_positions is not None:
        aps = np.array(ap_positions, dtype=float).reshape(config.num_aps, 2)
    if ue_positions is not None:
        ues = np.array(ue_positions, dtype=float).reshape(config.num_ues, 2)

    delta = ues[None, :, :] - aps[:, None, :]          # (M, K, 2)
    dist2d = np.hypot(delta[..., 0], delta[..., 1])
    height_gap = config.ap_height - config.ue_height
    dist3d = np.sqrt(dist2d ** 2 + height_gap ** 2)
    bearing = np.arctan2(delta[..., 1], delta[..., 0])
    angle = np.mod(bearing - orientations[:, None] + math.pi, 2.0 * math.pi) - math.pi

    beta = nlos_pathloss(dist3d, config)
    if config.shadowing_db > 0:
        # per-link lognormal shadowing, frozen for the lifetime of the drop
        shadow = rng.standard_normal(dist2d.shape) * config.shadowing_db
        beta = beta * np.power(10.0, shadow / 10.0)

    return Deployment(
        config=config,
        ap_positions=aps,
        ue_positions=ues,
        orientations=orientations,
        dist2d=dist2d,
        dist3d=dist3d,
        angle=angle,
        los_prob=los_probability(dist2d, config),
        beta=beta,
    )


# --- flat "key = value" config files -------------------------------------

_CONFIG_FIELDS = {f.name: f.type for f in fields(NetworkConfig)}
_INT_FIELDS = {"num_aps", "antennas_per_ap", "num_ues"}


def parse_config_text(text: str) -> dict:
    """Parse the flat config grammar: one ``key = value`` per line,
    ``#`` starts a comment.  Returns raw string values."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_mapping(mapping: dict) -> NetworkConfig:
    """Build a NetworkConfig from string values; unknown keys are errors."""
    kwargs = {}
    for key, value in mapping.items():
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = int(value) if key in _INT_FIELDS else float(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return NetworkConfig(**kwargs)


def load_config(path) -> NetworkConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_mapping(parse_config_text(fh.read()))
