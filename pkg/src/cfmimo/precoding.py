"""Conjugate precoders for the four beamforming schemes and the two
power-control normalizations.

Scheme column compositions (before the power coefficient x_mk):
  accurate        conj(h_mk)                     full channel known
  estimated       conj(alpha*hdot + sqrt(beta)*est)   LoS known, NLoS estimated
  statistical(*)  conj(hdot) * alpha             LoS component only

Power control fixes either the expected per-AP radiated power or the
expected per-UE received-stream power; within a constraint group the budget
is split equally across active streams, then scaled so the group identity
holds exactly in expectation.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, LinkStatistics

log = logging.getLogger(__name__)


class Scheme(enum.Enum):
    ACCURATE_CSI = "accurate_csi"
    ESTIMATED_CSI = "estimated_csi"
    STATISTICAL_NO_DL = "statistical_no_dl"
    STATISTICAL_WITH_DL = "statistical_with_dl"

    @property
    def statistical(self) -> bool:
        return self in (Scheme.STATISTICAL_NO_DL, Scheme.STATISTICAL_WITH_DL)

    @property
    def uses_estimates(self) -> bool:
        return self is Scheme.ESTIMATED_CSI

    @property
    def has_dl_training(self) -> bool:
        """Whether the UE runs the downlink LMMSE step (the accurate-CSI UE
        knows its effective channel outright, which is the noiseless limit)."""
        return self in (Scheme.ESTIMATED_CSI, Scheme.STATISTICAL_WITH_DL)


class PowerControlMode(enum.Enum):
    PER_AP = "per_ap"   # E||y_m||^2 = budget for every transmitting AP
    PER_UE = "per_ue"   # sum_m E||y_mk||^2 = budget for every served UE


@dataclass(frozen=True)
class PowerAllocation:
    """Solved power coefficients plus bookkeeping of silent groups."""

    x: np.ndarray                 # (M, K), nonnegative
    mode: PowerControlMode
    budget: float
    silent_aps: frozenset         # APs with an all-zero row
    silent_ues: frozenset         # UEs with an all-zero column

    def to_csv(self, path) -> None:
        """Row per AP, column per UE."""
        header = ",".join(f"ue{k}" for k in range(self.x.shape[1]))
        np.savetxt(path, self.x, delimiter=",", header=header, comments="")


def expected_stream_power(scheme: Scheme, stats: LinkStatistics,
                          sigma_u2: float = 0.0) -> np.ndarray:
    """E||p_mk||^2 / x_mk^2 for every link, as an (M, K) matrix.

    accurate:    q*zeta + N*beta
    estimated:   q*zeta + N*beta^2/(beta + sigma_u2)
    statistical: q*zeta
    """
    zkk = stats.zeta_kk()
    n = stats.n_antennas
    if scheme is Scheme.ACCURATE_CSI:
        return stats.q * zkk + n * stats.beta
    if scheme is Scheme.ESTIMATED_CSI:
        denom = stats.beta + sigma_u2
        with np.errstate(divide="ignore", invalid="ignore"):
            nlos_part = np.where(denom > 0,
                                 stats.beta ** 2 / np.where(denom > 0, denom, 1.0), 0.0)
        return stats.q * zkk + n * nlos_part
    return stats.q * zkk


def solve_power(mode: PowerControlMode, scheme: Scheme, stats: LinkStatistics,
                sigma_u2: float, budget: float) -> PowerAllocation:
    """Equal split across active streams, scaled to meet the constraint.

    A stream is active when its expected unscaled power is nonzero; a
    constraint group with no active stream gets a zero allocation (logged,
    not an error -- an AP with no LoS link under a statistical scheme is
    expected to stay silent).
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    s = expected_stream_power(scheme, stats, sigma_u2)
    active = s > 0.0
    x2 = np.zeros_like(s)
    axis = 1 if mode is PowerControlMode.PER_AP else 0
    counts = active.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(active, budget / (counts * s), 0.0)
    x2 = np.where(active & (counts > 0), share, 0.0)
    x = np.sqrt(x2)

    silent_groups = int((counts == 0).sum())
    if silent_groups:
        kind = "AP" if mode is PowerControlMode.PER_AP else "UE"
        log.info("%d %s group(s) have no active stream and stay silent",
                 silent_groups, kind)
    return PowerAllocation(
        x=x,
        mode=mode,
        budget=budget,
        silent_aps=frozenset(np.flatnonzero(~x.any(axis=1)).tolist()),
        silent_ues=frozenset(np.flatnonzero(~x.any(axis=0)).tolist()),
    )


def build_precoders(scheme: Scheme, realization: ChannelRealization,
                    alloc: PowerAllocation) -> np.ndarray:
    """Per-AP precoder columns p_mk as an (M, K, N) array.

    The transmitted vector at AP m is y_m = sum_k p_mk s_k.
    """
    if scheme is Scheme.ACCURATE_CSI:
        basis = realization.composite
    elif scheme is Scheme.ESTIMATED_CSI:
        basis = realization.estimated_composite
    else:
        basis = realization.alpha[..., None] * realization.stats.los_vec
    return alloc.x[..., None] * basis.conj()


def effective_channels(realization: ChannelRealization, precoders: np.ndarray,
                       alloc: PowerAllocation):
    """Effective channel matrix and its slow/fast split.

    Returns (gamma, gamma_dot, gamma_bar) where gamma[k, i] = sum_m
    h_mk^T p_mi, gamma_dot[k] = sum_m x_mk alpha_mk zeta_mkk is the
    slow-fading part known at the UE, and gamma_bar = diag(gamma) -
    gamma_dot is the fast-fading remainder.
    """
    h = realization.composite
    gamma = np.einsum("mkn,min->ki", h, precoders)
    gamma_dot = np.sum(alloc.x * realization.alpha * realization.stats.zeta_kk(), axis=0)
    gamma_bar = np.diagonal(gamma) - gamma_dot
    return gamma, gamma_dot, gamma_bar
