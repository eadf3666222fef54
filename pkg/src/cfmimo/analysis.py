"""Closed-form second moments of the effective channels, the per-user rate
bounds they induce, Monte-Carlo instantaneous rates, and a brute-force
moment oracle used for validation.

Moment bookkeeping per user k and scheme:
  e_gkk2    E|gamma_kk|^2
  e_gki2    E|gamma_ki|^2 for the interfering streams (stored (K, K), diag 0)
  e_gdot2   E|gamma_dot|^2, slow-fading part known at the UE
  e_gbar2   E|gamma_kk|^2 - E|gamma_dot|^2, the fast-fading remainder
  e_ghat2   second moment of the UE's estimate of the remainder
  e_gtilde2 second moment of the residual self-interference

The hat/tilde split encodes what the UE knows: with accurate CSI the UE
knows the remainder outright (hat = bar, tilde = 0), without downlink
pilots it knows nothing (hat = 0, tilde = bar), and with downlink pilots
the scalar LMMSE split applies.  Under this convention every scheme's rate
bound is log(1 + (e_gdot2 + e_ghat2) / (e_gtilde2 + interference + noise)).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .channel import LinkStatistics, complex_normal
from .precoding import PowerAllocation, PowerControlMode, Scheme, solve_power

log = logging.getLogger(__name__)

MOMENT_FIELDS = ("e_gkk2", "e_gki2", "e_gdot2", "e_gbar2", "e_ghat2", "e_gtilde2")

_ZETA_CHUNK = 64          # AP rows per zeta-tensor chunk
_MC_BATCH_ELEMS = 4_000_000  # target complex elements per Monte-Carlo batch


def _lmmse_gain(beta, sigma_u2: float):
    """beta / (beta + sigma_u2), defined as 0 for a zero-variance prior."""
    beta = np.asarray(beta, dtype=float)
    denom = beta + sigma_u2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, beta / np.where(denom > 0, denom, 1.0), 0.0)


def csum(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Neumaier-compensated sum along an axis.

    Keeps the long AP sums (M up to a few thousand) and cross-term
    cancellations well below 1e-10 relative error.
    """
    a = np.moveaxis(np.asarray(a), axis, 0)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:], dtype=a.dtype)
    total = np.zeros(a.shape[1:], dtype=np.result_type(a.dtype, float))
    comp = np.zeros_like(total)
    for row in a:
        t = total + row
        big = np.abs(total) >= np.abs(row)
        comp = comp + np.where(big, (total - t) + row, (row - t) + total)
        total = t
    return total + comp


@dataclass(frozen=True)
class MomentSet:
    """Closed-form second-order statistics for one scheme.

    ``e_gki2[k, i]`` is the interference moment of stream i at user k
    (diagonal fixed to zero; the direct stream lives in ``e_gkk2``).
    """

    scheme: Scheme
    e_gkk2: np.ndarray
    e_gki2: np.ndarray
    e_gdot2: np.ndarray
    e_gbar2: np.ndarray
    e_ghat2: np.ndarray
    e_gtilde2: np.ndarray

    def interference(self) -> np.ndarray:
        """Per-user total inter-stream interference power."""
        return self.e_gki2.sum(axis=1)

    def to_csv(self, path) -> None:
        """Stable schema: one row per user, aggregate interference column."""
        k = self.e_gkk2.shape[0]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("scheme,user,e_gkk2,interference,e_gdot2,e_gbar2,e_ghat2,e_gtilde2\n")
            interf = self.interference()
            for i in range(k):
                fh.write(
                    f"{self.scheme.value},{i},{self.e_gkk2[i]:.17g},{interf[i]:.17g},"
                    f"{self.e_gdot2[i]:.17g},{self.e_gbar2[i]:.17g},"
                    f"{self.e_ghat2[i]:.17g},{self.e_gtilde2[i]:.17g}\n"
                )


def _dl_split(scheme: Scheme, gbar: np.ndarray, sigma_d2: float):
    """Fill the hat/tilde pair from the remainder moment per scheme."""
    if scheme is Scheme.ACCURATE_CSI:
        return gbar.copy(), np.zeros_like(gbar)
    if scheme is Scheme.STATISTICAL_NO_DL:
        return np.zeros_like(gbar), gbar.copy()
    denom = gbar + sigma_d2
    with np.errstate(divide="ignore", invalid="ignore"):
        hat = np.where(denom > 0, gbar ** 2 / denom, 0.0)
        tilde = np.where(denom > 0, gbar * sigma_d2 / denom, 0.0)
    return hat, tilde


def _pair_cross(a: np.ndarray) -> np.ndarray:
    """sum_{m != m'} a_m a_m' for real per-AP terms a of shape (M, K)."""
    return csum(a) ** 2 - csum(a ** 2)


def _dot_moment(stats: LinkStatistics, x: np.ndarray) -> np.ndarray:
    zkk = stats.zeta_kk()
    a = x * stats.q * zkk
    return csum(x ** 2 * stats.q * zkk ** 2) + _pair_cross(a)


def _sep(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(K, K) matrix of sum_m f[m, k] * g[m, i] (separable per-AP terms)."""
    return f.T @ g


def _los_interference(stats: LinkStatistics, x: np.ndarray):
    """LoS-coupling pieces of E|gamma_ki|^2, chunked over APs.

    Returns (per_ap, cross): per_ap[k, i] = sum_m x_mi^2 q_mk q_mi
    |zeta_mki|^2 and cross[k, i] = |sum_m x_mi q_mk q_mi zeta_mki|^2 -
    sum_m x_mi^2 (q_mk q_mi)^2 |zeta_mki|^2.
    """
    m_aps, k_ues, _ = stats.shape
    q = stats.q
    per_parts, diag_parts, s_parts = [], [], []
    for m0 in range(0, m_aps, _ZETA_CHUNK):
        sl = slice(m0, min(m0 + _ZETA_CHUNK, m_aps))
        v = stats.los_vec[sl]
        zeta = np.einsum("mkn,min->mki", v, v.conj())
        abs2 = zeta.real ** 2 + zeta.imag ** 2
        per_parts.append(np.einsum("mki,mk,mi->ki", abs2, q[sl], q[sl] * x[sl] ** 2))
        diag_parts.append(np.einsum("mki,mk,mi->ki", abs2, q[sl] ** 2,
                                    (q[sl] * x[sl]) ** 2))
        s_parts.append(np.einsum("mki,mk,mi->ki", zeta, q[sl], q[sl] * x[sl]))
    per_ap = csum(np.stack(per_parts))
    s = csum(np.stack(s_parts))
    cross = np.abs(s) ** 2 - csum(np.stack(diag_parts))
    return per_ap, cross


def moments_accurate(stats: LinkStatistics, alloc: PowerAllocation) -> MomentSet:
    """Second moments under accurate CSI at APs and UEs."""
    x, q, b = alloc.x, stats.q, stats.beta
    zkk = stats.zeta_kk()
    n = stats.n_antennas

    per_ap_kk = x ** 2 * (q * zkk ** 2 + n * (n + 1) * b ** 2
                          + 2.0 * (n + 1) * q * b * zkk)
    e_gkk2 = csum(per_ap_kk) + _pair_cross(x * (q * zkk + n * b))
    e_gdot2 = _dot_moment(stats, x)
    e_gbar2 = e_gkk2 - e_gdot2

    per_ap, cross = _los_interference(stats, x)
    e_gki2 = (per_ap + cross
              + n * _sep(b, x ** 2 * b)
              + _sep(q * zkk, x ** 2 * b)
              + _sep(b, x ** 2 * q * zkk))
    np.fill_diagonal(e_gki2, 0.0)

    ghat, gtilde = _dl_split(Scheme.ACCURATE_CSI, e_gbar2, 0.0)
    return MomentSet(Scheme.ACCURATE_CSI, e_gkk2, e_gki2, e_gdot2,
                     e_gbar2, ghat, gtilde)


def moments_estimated(stats: LinkStatistics, alloc: PowerAllocation,
                      sigma_u2: float, sigma_d2: float) -> MomentSet:
    """Second moments when the NLoS parts are LMMSE-estimated from uplink
    pilots and the UE estimates its effective channel from downlink pilots."""
    x, q, b = alloc.x, stats.q, stats.beta
    zkk = stats.zeta_kk()
    n = stats.n_antennas
    d = _lmmse_gain(b, sigma_u2)

    per_ap_kk = x ** 2 * (
        q * zkk ** 2
        + n * (n + 1) * (b * d) ** 2
        + n * b ** 2 * d * (1.0 - d)
        + q * b * (1.0 + d) * zkk
        + 2.0 * n * q * b * d * zkk
    )
    e_gkk2 = csum(per_ap_kk) + _pair_cross(x * (q * zkk + n * b * d))
    e_gdot2 = _dot_moment(stats, x)
    e_gbar2 = e_gkk2 - e_gdot2

    per_ap, cross = _los_interference(stats, x)
    e_gki2 = (per_ap + cross
              + n * _sep(b, x ** 2 * b * d)
              + _sep(q * zkk, x ** 2 * b * d)
              + _sep(b, x ** 2 * q * zkk))
    np.fill_diagonal(e_gki2, 0.0)

    ghat, gtilde = _dl_split(Scheme.ESTIMATED_CSI, e_gbar2, sigma_d2)
    return MomentSet(Scheme.ESTIMATED_CSI, e_gkk2, e_gki2, e_gdot2,
                     e_gbar2, ghat, gtilde)


def moments_statistical(stats: LinkStatistics, alloc: PowerAllocation,
                        sigma_d2: float, with_dl_training: bool) -> MomentSet:
    """Second moments when precoding uses the LoS components only."""
    x, q, b = alloc.x, stats.q, stats.beta
    zkk = stats.zeta_kk()

    e_gdot2 = _dot_moment(stats, x)
    e_gbar2 = csum(x ** 2 * b * q * zkk)
    e_gkk2 = e_gdot2 + e_gbar2   # remainder is zero mean: split is exact

    per_ap, cross = _los_interference(stats, x)
    e_gki2 = per_ap + cross + _sep(b, x ** 2 * q * zkk)
    np.fill_diagonal(e_gki2, 0.0)

    scheme = Scheme.STATISTICAL_WITH_DL if with_dl_training else Scheme.STATISTICAL_NO_DL
    ghat, gtilde = _dl_split(scheme, e_gbar2, sigma_d2)
    return MomentSet(scheme, e_gkk2, e_gki2, e_gdot2, e_gbar2, ghat, gtilde)


def compute_moments(scheme: Scheme, stats: LinkStatistics, alloc: PowerAllocation,
                    sigma_u2: float = 0.0, sigma_d2: float = 0.0) -> MomentSet:
    if scheme is Scheme.ACCURATE_CSI:
        return moments_accurate(stats, alloc)
    if scheme is Scheme.ESTIMATED_CSI:
        return moments_estimated(stats, alloc, sigma_u2, sigma_d2)
    return moments_statistical(stats, alloc, sigma_d2,
                               scheme is Scheme.STATISTICAL_WITH_DL)


def rate_bound(moments: MomentSet, sigma_o2, base: float = 2.0) -> np.ndarray:
    """Per-user achievable-rate upper bound in log-``base`` units.

    ``sigma_o2`` may be a scalar or an array of noise powers; the result has
    the noise axis first when an array is given.  sigma_o2 = 0 is allowed
    for saturation analysis (the bound is then purely interference-limited).
    """
    sigma_o2 = np.asarray(sigma_o2, dtype=float)
    if np.any(sigma_o2 < 0):
        raise ValueError("sigma_o2 must be nonnegative")
    num = moments.e_gdot2 + moments.e_ghat2
    den = moments.e_gtilde2 + moments.interference() + sigma_o2[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)
        snr = np.where((num > 0) & (den == 0), np.inf, snr)
    return np.log1p(snr) / math.log(base)


def _solve_power_batch(mode: PowerControlMode, s_cond: np.ndarray,
                       budget: float) -> np.ndarray:
    """Per-draw equal-split solution for batched conditional stream powers
    of shape (batch, M, K); used when statistical allocations follow the
    per-realization LoS indicators."""
    active = s_cond > 0.0
    axis = 2 if mode is PowerControlMode.PER_AP else 1
    counts = active.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        x2 = np.where(active & (counts > 0), budget / (counts * s_cond), 0.0)
    return np.sqrt(x2)


def _mc_batches(trials: int, per_draw_elems: int):
    batch = max(1, min(trials, _MC_BATCH_ELEMS // max(per_draw_elems, 1)))
    done = 0
    while done < trials:
        size = min(batch, trials - done)
        yield size
        done += size


def mc_rate(scheme: Scheme, stats: LinkStatistics, alloc: PowerAllocation,
            sigma_o2, *, sigma_u2: float = 0.0, sigma_d2: float = 0.0,
            trials: int = 1000, rng: np.random.Generator | None = None,
            moments: MomentSet | None = None,
            instantaneous_interference: bool = False,
            resolve_per_draw: bool = False):
    """Monte-Carlo per-user rate: mean and standard error over fading draws.

    The instantaneous log term keeps the closed-form expectations of the
    interference and self-interference in its denominator, matching how the
    corresponding ergodic-rate expressions are assembled; pass
    ``instantaneous_interference=True`` for the (deliberately non-standard)
    fully instantaneous SINR variant used in sensitivity studies.

    ``sigma_o2`` may be a scalar or an array of noise powers (rates are
    evaluated at every value from the same draws).  With
    ``resolve_per_draw`` the statistical schemes renormalize transmit power
    to the LoS indicators of each draw.

    Returns ``(mean, stderr)`` of shape (K,) or (S, K) for array input.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    m_aps, k_ues, n_ant = stats.shape
    sig_in = np.asarray(sigma_o2, dtype=float)
    scalar_noise = sig_in.ndim == 0
    sig = np.atleast_1d(sig_in)

    if moments is None:
        moments = compute_moments(scheme, stats, alloc, sigma_u2, sigma_d2)
    den_fixed = moments.e_gtilde2 + moments.interference() + sig[:, None]  # (S, K)
    gbar = moments.e_gbar2
    with np.errstate(divide="ignore", invalid="ignore"):
        c_dl = np.where(gbar + sigma_d2 > 0, gbar / (gbar + sigma_d2), 0.0)

    zkk = stats.zeta_kk()
    v = stats.los_vec
    sqrt_b = np.sqrt(stats.beta)[..., None]
    log_base = math.log(2.0)

    sums, sumsqs = [], []
    for bsz in _mc_batches(trials, m_aps * k_ues * n_ant):
        alpha = (rng.random((bsz, m_aps, k_ues)) < stats.q).astype(float)
        hbar = complex_normal(rng, (bsz, m_aps, k_ues, n_ant))
        h = alpha[..., None] * v + sqrt_b * hbar

        if scheme is Scheme.ACCURATE_CSI:
            basis = h
        elif scheme is Scheme.ESTIMATED_CSI:
            w = complex_normal(rng, (bsz, m_aps, k_ues, n_ant))
            d = _lmmse_gain(stats.beta, sigma_u2)[..., None]
            basis = alpha[..., None] * v + d * (sqrt_b * hbar + np.sqrt(sigma_u2) * w)
        else:
            basis = alpha[..., None] * v

        if resolve_per_draw and scheme.statistical:
            x = _solve_power_batch(alloc.mode, alpha * zkk, alloc.budget)
        else:
            x = np.broadcast_to(alloc.x, (bsz, m_aps, k_ues))

        g_kk = np.einsum("bmkn,bmkn,bmk->bk", h, basis.conj(), x)
        g_dot = np.einsum("bmk,mk,bmk->bk", alpha, zkk, x)
        g_bar = g_kk - g_dot
        if scheme is Scheme.ACCURATE_CSI:
            g_hat = g_bar
        elif scheme.has_dl_training:
            w_dl = complex_normal(rng, (bsz, k_ues))
            g_hat = c_dl * (g_bar + np.sqrt(sigma_d2) * w_dl)
        else:
            g_hat = np.zeros_like(g_bar)
        num = np.abs(g_dot + g_hat) ** 2                      # (b, K)

        if instantaneous_interference:
            gamma = np.einsum("bmkn,bmin,bmi->bki", h, basis.conj(), x)
            inter = (np.abs(gamma) ** 2).sum(axis=2) - np.abs(
                np.diagonal(gamma, axis1=1, axis2=2)) ** 2
            self_int = np.abs(g_bar - g_hat) ** 2
            den = (inter + self_int)[:, None, :] + sig[None, :, None]
        else:
            den = den_fixed[None, :, :]
        rates = np.log1p(num[:, None, :] / den) / log_base    # (b, S, K)
        sums.append(rates.sum(axis=0))
        sumsqs.append((rates ** 2).sum(axis=0))

    total = csum(np.stack(sums))
    total_sq = csum(np.stack(sumsqs))
    mean = total / trials
    if trials > 1:
        var = np.maximum(total_sq / trials - mean ** 2, 0.0) * trials / (trials - 1)
        stderr = np.sqrt(var / trials)
    else:
        stderr = np.zeros_like(mean)
    if scalar_noise:
        return mean[0], stderr[0]
    return mean, stderr


@dataclass(frozen=True)
class RateReport:
    """Per-user closed-form bound and Monte-Carlo rate for one scheme,
    in bits per channel use."""

    scheme: Scheme
    bound_rate: np.ndarray
    mc_rate: np.ndarray
    mc_stderr: np.ndarray

    def mean(self):
        return float(np.mean(self.bound_rate)), float(np.mean(self.mc_rate))

    def percentiles(self, levels=(5.0, 50.0, 95.0)) -> dict:
        return {
            "bound": {p: float(np.percentile(self.bound_rate, p)) for p in levels},
            "mc": {p: float(np.percentile(self.mc_rate, p)) for p in levels},
        }

    def dominance_holds(self, slack: float = 0.0) -> bool:
        """Bound above the sampled rate for every user, up to sampling noise."""
        return bool(np.all(self.bound_rate
                           >= self.mc_rate - 3.0 * self.mc_stderr - slack))

    def to_csv(self, path) -> None:
        """Stable schema: one row per user."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("scheme,user,bound_rate,mc_rate,mc_stderr\n")
            for k in range(self.bound_rate.shape[0]):
                fh.write(f"{self.scheme.value},{k},{self.bound_rate[k]:.17g},"
                         f"{self.mc_rate[k]:.17g},{self.mc_stderr[k]:.17g}\n")


def rate_report(scheme: Scheme, stats: LinkStatistics, alloc: PowerAllocation,
                sigma_o2: float, *, sigma_u2: float = 0.0, sigma_d2: float = 0.0,
                trials: int = 1000,
                rng: np.random.Generator | None = None) -> RateReport:
    """Convenience wrapper: closed-form bound plus MC rate for one scheme."""
    moments = compute_moments(scheme, stats, alloc, sigma_u2, sigma_d2)
    bound = rate_bound(moments, sigma_o2)
    mc, se = mc_rate(scheme, stats, alloc, sigma_o2, sigma_u2=sigma_u2,
                     sigma_d2=sigma_d2, trials=trials, rng=rng, moments=moments)
    return RateReport(scheme=scheme, bound_rate=bound, mc_rate=mc, mc_stderr=se)


# --- brute-force oracle ----------------------------------------------------

@dataclass(frozen=True)
class OracleMoments:
    """Sampled moment estimates with standard errors, keyed like MomentSet."""

    scheme: Scheme
    values: dict
    stderrs: dict
    trials: int

    def value(self, name: str) -> np.ndarray:
        return self.values[name]

    def stderr(self, name: str) -> np.ndarray:
        return self.stderrs[name]


class _Accumulator:
    """Streaming mean/variance over draws of an array statistic."""

    def __init__(self, shape):
        self.n = 0
        self.s = np.zeros(shape)
        self.s2 = np.zeros(shape)

    def add(self, batch: np.ndarray) -> None:
        self.n += batch.shape[0]
        self.s += batch.sum(axis=0)
        self.s2 += (batch ** 2).sum(axis=0)

    def mean(self) -> np.ndarray:
        return self.s / self.n

    def sem(self) -> np.ndarray:
        m = self.mean()
        var = np.maximum(self.s2 / self.n - m ** 2, 0.0)
        if self.n > 1:
            var *= self.n / (self.n - 1)
        return np.sqrt(var / self.n)


def oracle_moments(scheme: Scheme, stats: LinkStatistics, alloc: PowerAllocation,
                   sigma_u2: float, sigma_d2: float, trials: int,
                   rng: np.random.Generator) -> OracleMoments:
    """Brute-force estimate of every moment field by direct sampling.

    Draws (alpha, hbar, pilot noises) and assembles the effective channels
    from their definitions, independently of the closed-form code paths.
    The remainder moment is estimated as the per-draw difference
    |gamma_kk|^2 - |gamma_dot|^2, matching how the closed form defines it.
    The downlink split is simulated with pilot noise where the remainder is
    zero-mean (statistical beamforming with training); for estimated CSI it
    is the deterministic scalar-LMMSE transform of the remainder moment, so
    the oracle applies that transform to its own estimate (delta-method
    standard errors).
    """
    m_aps, k_ues, n_ant = stats.shape
    x = alloc.x
    v = stats.los_vec
    zkk = np.sum(np.abs(v) ** 2, axis=2)
    sqrt_b = np.sqrt(stats.beta)[..., None]
    d_gain = _lmmse_gain(stats.beta, sigma_u2)[..., None]

    acc_kk = _Accumulator((k_ues,))
    acc_ki = _Accumulator((k_ues, k_ues))
    acc_dot = _Accumulator((k_ues,))
    acc_u = _Accumulator((k_ues,))
    acc_hat = _Accumulator((k_ues,))
    acc_til = _Accumulator((k_ues,))

    # phase 1 pins the estimator gain for the simulated downlink split
    phase1 = max(trials // 2, 1)
    c_hat = None

    done = 0
    for bsz in _mc_batches(trials, m_aps * k_ues * n_ant):
        alpha = (rng.random((bsz, m_aps, k_ues)) < stats.q).astype(float)
        hbar = complex_normal(rng, (bsz, m_aps, k_ues, n_ant))
        h = alpha[..., None] * v + sqrt_b * hbar

        if scheme is Scheme.ACCURATE_CSI:
            cols = h.conj()
        elif scheme is Scheme.ESTIMATED_CSI:
            w = complex_normal(rng, (bsz, m_aps, k_ues, n_ant))
            est_full = d_gain * (sqrt_b * hbar + np.sqrt(sigma_u2) * w)
            cols = (alpha[..., None] * v + est_full).conj()
        else:
            cols = (alpha[..., None] * v).conj()

        gamma = np.einsum("bmkn,bmin,mi->bki", h, cols, x)
        g_dot = np.einsum("bmk,mk->bk", alpha, x * zkk)
        g_kk = np.diagonal(gamma, axis1=1, axis2=2)
        g_bar = g_kk - g_dot

        a_kk = np.abs(g_kk) ** 2
        a_dot = np.abs(g_dot) ** 2
        acc_kk.add(a_kk)
        acc_dot.add(a_dot)
        acc_u.add(a_kk - a_dot)
        a_ki = np.abs(gamma) ** 2
        idx = np.arange(k_ues)
        a_ki[:, idx, idx] = 0.0
        acc_ki.add(a_ki)

        if scheme is Scheme.STATISTICAL_WITH_DL and done + bsz > phase1:
            if c_hat is None:
                vhat = np.maximum(acc_u.mean(), 0.0)
                c_hat = np.where(vhat + sigma_d2 > 0, vhat / (vhat + sigma_d2), 0.0)
            start = max(phase1 - done, 0)
            gb = g_bar[start:]
            ybar = gb + np.sqrt(sigma_d2) * complex_normal(rng, gb.shape)
            g_hat = c_hat * ybar
            acc_hat.add(np.abs(g_hat) ** 2)
            acc_til.add(np.abs(gb - g_hat) ** 2)
        done += bsz

    values = {
        "e_gkk2": acc_kk.mean(),
        "e_gki2": acc_ki.mean(),
        "e_gdot2": acc_dot.mean(),
        "e_gbar2": acc_u.mean(),
    }
    stderrs = {
        "e_gkk2": acc_kk.sem(),
        "e_gki2": acc_ki.sem(),
        "e_gdot2": acc_dot.sem(),
        "e_gbar2": acc_u.sem(),
    }

    vbar, se_v = values["e_gbar2"], stderrs["e_gbar2"]
    if scheme is Scheme.ACCURATE_CSI:
        values["e_ghat2"], stderrs["e_ghat2"] = vbar, se_v
        values["e_gtilde2"] = np.zeros_like(vbar)
        stderrs["e_gtilde2"] = np.zeros_like(vbar)
    elif scheme is Scheme.STATISTICAL_NO_DL:
        values["e_ghat2"] = np.zeros_like(vbar)
        stderrs["e_ghat2"] = np.zeros_like(vbar)
        values["e_gtilde2"], stderrs["e_gtilde2"] = vbar, se_v
    elif scheme is Scheme.STATISTICAL_WITH_DL:
        # the simulated |gamma_hat|^2 mean also carries the uncertainty of
        # the phase-1 estimator gain (2 c (v+sd2) * dc/dv * se_v1); the
        # tilde moment is first-order insensitive to the gain at the
        # LMMSE optimum and needs no such term
        se_v1 = se_v * math.sqrt(trials / phase1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dc_dv = np.where(vbar + sigma_d2 > 0,
                             sigma_d2 / (vbar + sigma_d2) ** 2, 0.0)
            c_bar = np.where(vbar + sigma_d2 > 0, vbar / (vbar + sigma_d2), 0.0)
        se_gain = 2.0 * c_bar * (vbar + sigma_d2) * dc_dv * se_v1
        values["e_ghat2"] = acc_hat.mean()
        stderrs["e_ghat2"] = np.sqrt(acc_hat.sem() ** 2 + se_gain ** 2)
        values["e_gtilde2"], stderrs["e_gtilde2"] = acc_til.mean(), acc_til.sem()
    else:
        denom = vbar + sigma_d2
        safe = denom > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            hat = np.where(safe, vbar ** 2 / denom, 0.0)
            til = np.where(safe, vbar * sigma_d2 / denom, 0.0)
            dhat = np.where(safe, (vbar ** 2 + 2.0 * vbar * sigma_d2) / denom ** 2, 0.0)
            dtil = np.where(safe, (sigma_d2 / denom) ** 2, 0.0)
        values["e_ghat2"], stderrs["e_ghat2"] = hat, np.abs(dhat) * se_v
        values["e_gtilde2"], stderrs["e_gtilde2"] = til, np.abs(dtil) * se_v

    return OracleMoments(scheme=scheme, values=values, stderrs=stderrs, trials=trials)


def moments_agree(closed: MomentSet, oracle: OracleMoments,
                  n_sigma: float = 3.0, rel: float = 0.02) -> dict:
    """Per-field verdicts: |closed - oracle| within n_sigma standard errors,
    or within ``rel`` relative where sampling noise happens to sit beyond
    the n_sigma band (a chance exceedance, not a formula error -- wrong
    formulas miss by orders of magnitude on unit-scale instances)."""
    out = {}
    for name in MOMENT_FIELDS:
        cf = np.asarray(getattr(closed, name), dtype=float)
        val, se = oracle.value(name), oracle.stderr(name)
        tol = np.maximum(n_sigma * se, rel * np.abs(val)) + 1e-12 * (1.0 + np.abs(cf))
        out[name] = bool(np.all(np.abs(cf - val) <= tol))
    return out


def moment_discrepancies(closed: MomentSet, oracle: OracleMoments,
                         abs_floor: float = 1e-12) -> dict:
    """Worst z-score (|closed - oracle| / stderr) per moment field.

    Entries with zero standard error must agree within ``abs_floor``
    (scaled by the field magnitude); they report 0.0 when they do and
    ``inf`` when they do not.
    """
    out = {}
    for name in MOMENT_FIELDS:
        cf = np.asarray(getattr(closed, name), dtype=float)
        val, se = oracle.value(name), oracle.stderr(name)
        diff = np.abs(cf - val)
        floor = abs_floor * (1.0 + np.abs(cf))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / np.where(se > 0, se, 1.0),
                         np.where(diff <= floor, 0.0, np.inf))
        out[name] = float(np.max(z))
    return out


def random_instance(seed: int, m: int | None = None, n: int | None = None,
                    k: int | None = None):
    """Small synthetic instance for oracle validation.

    Unit-scale LoS amplitudes, Bernoulli probabilities, NLoS gains and
    power coefficients are drawn so that every closed-form term is
    numerically significant.  Returns (stats, alloc, sigma_u2, sigma_d2).
    """
    rng = np.random.default_rng(seed)
    m = m if m is not None else int(rng.integers(2, 5))
    n = n if n is not None else int(rng.integers(1, 3))
    k = k if k is not None else int(rng.integers(2, 4))
    amps = rng.uniform(0.3, 1.5, size=(m, k))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(m, k))
    angles = rng.uniform(-np.pi / 2, np.pi / 2, size=(m, k))
    steer = np.exp(1j * np.pi * np.sin(angles)[..., None] * np.arange(n))
    los = (amps * np.exp(1j * phases))[..., None] * steer
    stats = LinkStatistics(
        los_vec=los,
        q=rng.uniform(0.05, 0.95, size=(m, k)),
        beta=rng.uniform(0.1, 2.0, size=(m, k)),
    )
    x = rng.uniform(0.2, 1.0, size=(m, k))
    alloc = PowerAllocation(x=x, mode=PowerControlMode.PER_AP, budget=float("nan"),
                            silent_aps=frozenset(), silent_ues=frozenset())
    sigma_u2 = float(rng.uniform(0.05, 1.0))
    sigma_d2 = float(rng.uniform(0.05, 1.0))
    return stats, alloc, sigma_u2, sigma_d2
