"""Pilot correlation and the two LMMSE estimators.

Uplink: each AP de-spreads the pilot block, strips its known LoS component
and LMMSE-estimates the unit-variance NLoS vector.  Downlink: each UE
de-spreads, strips the known slow-fading part of its effective channel and
LMMSE-estimates the fast-fading remainder as a scalar.

The fast-path helpers draw the pre-correlated observations directly, which
is statistically identical to simulating the pilot block and what the
Monte-Carlo loops use; the explicit block simulation exists for validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, complex_normal


@dataclass(frozen=True)
class UplinkEstimate:
    """LMMSE estimate of the unit-variance NLoS vector hbar.

    est_var + err_var = 1 because the prior has unit per-entry variance.
    """

    est: np.ndarray     # estimate of hbar
    est_var: float      # per-entry variance of the estimate, beta/(beta+sigma_u2)
    err_var: float      # per-entry variance of the error, sigma_u2/(beta+sigma_u2)


@dataclass(frozen=True)
class DownlinkEstimate:
    """LMMSE estimate of the fast-fading effective-channel scalar."""

    gamma_hat: complex
    hat_var: float      # E|gamma_hat|^2 = v^2 / (v + sigma_d2)
    tilde_var: float    # E|gamma_tilde|^2 = v * sigma_d2 / (v + sigma_d2)


def dft_pilots(n_seq: int, length: int | None = None) -> np.ndarray:
    """Orthonormal pilot set: rows of the unitary DFT matrix, shape (n, T).

    T defaults to n_seq (the pilot block never needs more channel uses than
    users).  Rows satisfy sum_n psi_k[n] conj(psi_l[n]) = delta[k-l].
    """
    t = n_seq if length is None else length
    if t < n_seq:
        raise ValueError("pilot block shorter than the number of sequences")
    n = np.arange(t)
    k = np.arange(n_seq)
    return np.exp(-2j * np.pi * np.outer(k, n) / t) / np.sqrt(t)


def _check_orthonormal(pilots: np.ndarray) -> None:
    gram = pilots @ pilots.conj().T
    if not np.allclose(gram, np.eye(pilots.shape[0]), atol=1e-10):
        raise ValueError("pilot sequences are not orthonormal over the block")


def uplink_correlate(received: np.ndarray, pilots: np.ndarray, k: int,
                     los_component: np.ndarray, alpha) -> np.ndarray:
    """De-spread an AP's pilot block for user k and strip its LoS part.

    ``received`` is (T, N): one N-vector per pilot use.  Returns the
    observation sqrt(beta)*hbar + sigma_u*w', free of other users'
    contributions by pilot orthonormality.
    """
    _check_orthonormal(pilots)
    despread = pilots[k].conj() @ received          # (N,)
    return despread - alpha * np.asarray(los_component)


def uplink_lmmse(yprime: np.ndarray, beta: float, sigma_u2: float) -> UplinkEstimate:
    """Scale the stripped observation into the LMMSE estimate of hbar."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if sigma_u2 < 0:
        raise ValueError("sigma_u2 must be nonnegative")
    denom = beta + sigma_u2
    return UplinkEstimate(
        est=(np.sqrt(beta) / denom) * np.asarray(yprime),
        est_var=beta / denom,
        err_var=sigma_u2 / denom,
    )


def downlink_correlate_and_strip(received: np.ndarray, pilots: np.ndarray,
                                 k: int, dot_gamma: complex) -> complex:
    """De-spread UE k's downlink pilot block and strip the known slow part.

    ``received`` is the length-T scalar sequence at the UE.  Returns
    gamma_bar + sigma_d * w'.
    """
    _check_orthonormal(pilots)
    return complex(pilots[k].conj() @ np.asarray(received) - dot_gamma)


def downlink_lmmse(ybar: complex, gammabar_var: float, sigma_d2: float) -> DownlinkEstimate:
    """LMMSE estimate of gamma_bar from its noisy stripped observation.

    ``gammabar_var`` is the closed-form E|gamma_bar|^2 for the active
    scheme (statistical knowledge, never estimated online).
    """
    if gammabar_var < 0 or sigma_d2 < 0:
        raise ValueError("variances must be nonnegative")
    denom = gammabar_var + sigma_d2
    if denom == 0.0:
        return DownlinkEstimate(gamma_hat=0j, hat_var=0.0, tilde_var=0.0)
    gain = gammabar_var / denom
    return DownlinkEstimate(
        gamma_hat=gain * ybar,
        hat_var=gammabar_var * gain,
        tilde_var=sigma_d2 * gain,
    )


def estimate_uplink(realization: ChannelRealization, sigma_u2: float,
                    rng: np.random.Generator) -> None:
    """Fast-path uplink estimation for every link of a realization.

    Draws the pre-correlated observation sqrt(beta)*hbar + sigma_u*w
    directly and stores the LMMSE estimate of hbar in ``est_nlos``.
    """
    beta = realization.stats.beta[..., None]
    noise = complex_normal(rng, realization.nlos.shape)
    yprime = np.sqrt(beta) * realization.nlos + np.sqrt(sigma_u2) * noise
    denom = beta + sigma_u2
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(denom > 0, np.sqrt(beta) / np.where(denom > 0, denom, 1.0), 0.0)
    realization.est_nlos = gain * yprime


def simulate_uplink_training(realization: ChannelRealization, sigma_u2: float,
                             rng: np.random.Generator) -> np.ndarray:
    """End-to-end pilot-block simulation of the uplink estimates.

    Builds the received (T, N) block per AP from all users' pilots, then
    de-spreads, strips and scales per user.  Returns the (M, K, N) estimate
    array (also stored on the realization).  Exists to validate the fast
    path; identical in distribution, not draw-for-draw.
    """
    stats = realization.stats
    m_aps, k_ues, n_ant = stats.shape
    pilots = dft_pilots(k_ues)
    t_uses = pilots.shape[1]
    h = realization.composite
    est = np.empty((m_aps, k_ues, n_ant), dtype=complex)
    sigma_u = np.sqrt(sigma_u2)
    for m in range(m_aps):
        block = pilots.T @ h[m] + sigma_u * complex_normal(rng, (t_uses, n_ant))
        for k in range(k_ues):
            yprime = uplink_correlate(block, pilots, k,
                                      stats.los_vec[m, k], realization.alpha[m, k])
            est[m, k] = uplink_lmmse(yprime, stats.beta[m, k], sigma_u2).est
    realization.est_nlos = est
    return est
