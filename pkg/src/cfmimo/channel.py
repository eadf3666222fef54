"""Channel model: deterministic LoS steering vectors and fast-fading draws.

Per link (m, k) the channel is h = alpha * hdot + sqrt(beta) * hbar with
alpha ~ Bernoulli(q), hbar ~ CN(0, I_N) (real/imag parts N(0, 1/2) each) and
hdot the deterministic LoS vector built from the link geometry.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .netgeom import Deployment, NetworkConfig


def array_response(theta, n_antennas: int, spacing: float, wavelength: float):
    """Uniform-linear-array response for a departure angle off broadside.

    Entry p is exp(1j * 2 pi * p * (spacing/wavelength) * sin(theta)).
    ``theta`` may be any array shape; the antenna axis is appended last.
    """
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    theta = np.asarray(theta, dtype=float)
    p = np.arange(n_antennas)
    phase = 2.0 * np.pi * (spacing / wavelength) * np.sin(theta)[..., None] * p
    return np.exp(1j * phase)


def los_channel(dist3d, theta, config: NetworkConfig):
    """Deterministic LoS channel vector(s) for given link geometry.

    Steering vector scaled by sqrt(Gm*Gk) * (ue_h*ap_h / (4 pi x)) and the
    carrier phase exp(+1j * 2 pi x / lambda).  Shapes broadcast over links,
    antenna axis last.
    """
    dist3d = np.asarray(dist3d, dtype=float)
    a = array_response(theta, config.antennas_per_ap, config.spacing, config.wavelength)
    amp = (
        np.sqrt(config.ap_gain * config.ue_gain)
        * (config.ue_height * config.ap_height) / (4.0 * np.pi * dist3d)
    )
    phase = np.exp(1j * 2.0 * np.pi * dist3d / config.wavelength)
    return (amp * phase)[..., None] * a


@dataclass
class LinkStatistics:
    """Deterministic second-order link state consumed by every closed form.

    ``los_vec[m, k]`` is the LoS vector, ``q`` the LoS probabilities and
    ``beta`` the NLoS gains.  The LoS inner products zeta_mki are memoized
    per AP slice; construction of a slice is cheap (K^2 * N flops).
    """

    los_vec: np.ndarray   # (M, K, N) complex
    q: np.ndarray         # (M, K)
    beta: np.ndarray      # (M, K)
    _zeta_slices: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def shape(self):
        return self.los_vec.shape

    @property
    def n_antennas(self) -> int:
        return self.los_vec.shape[2]

    def zeta_kk(self) -> np.ndarray:
        """Self inner products ||hdot_mk||^2 as an (M, K) real matrix."""
        with self._lock:
            if "kk" not in self._zeta_slices:
                self._zeta_slices["kk"] = np.sum(np.abs(self.los_vec) ** 2, axis=2)
            return self._zeta_slices["kk"]

    def zeta_slice(self, m: int) -> np.ndarray:
        """(K, K) matrix of zeta_mki = hdot_mk^T conj(hdot_mi) for AP m."""
        with self._lock:
            if m not in self._zeta_slices:
                v = self.los_vec[m]
                self._zeta_slices[m] = v @ v.conj().T
            return self._zeta_slices[m]

    def zeta(self, m: int, k: int, i: int) -> complex:
        """Single LoS inner product zeta_mki (cached per AP slice)."""
        return complex(self.zeta_slice(m)[k, i])

    def condition_on(self, alpha: np.ndarray) -> "LinkStatistics":
        """Statistics conditioned on realized LoS indicators.

        Replaces q by alpha, which turns the ensemble moment formulas into
        their per-drop conditional counterparts (frozen-alpha pipelines).
        """
        return LinkStatistics(
            los_vec=self.los_vec,
            q=np.asarray(alpha, dtype=float),
            beta=self.beta,
        )


def build_link_statistics(deployment: Deployment) -> LinkStatistics:
    cfg = deployment.config
    vec = los_channel(deployment.dist3d, deployment.angle, cfg)
    return LinkStatistics(
        los_vec=vec,
        q=np.array(deployment.los_prob),
        beta=np.array(deployment.beta),
    )


@dataclass
class ChannelRealization:
    """One fast-fading draw: LoS indicators and the NLoS vectors.

    ``est_nlos`` holds the LMMSE estimate of the unit-variance NLoS part
    (filled in by the estimation step when a scheme needs it).
    """

    stats: LinkStatistics
    alpha: np.ndarray               # (M, K) in {0, 1}
    nlos: np.ndarray                # (M, K, N) complex, unit entry variance
    est_nlos: np.ndarray | None = None

    @property
    def composite(self) -> np.ndarray:
        """h = alpha * hdot + sqrt(beta) * hbar, shape (M, K, N)."""
        s = self.stats
        return (self.alpha[..., None] * s.los_vec
                + np.sqrt(s.beta)[..., None] * self.nlos)

    @property
    def estimated_composite(self) -> np.ndarray:
        """AP-side channel estimate alpha * hdot + sqrt(beta) * est_nlos."""
        if self.est_nlos is None:
            raise ValueError("realization carries no channel estimates")
        s = self.stats
        return (self.alpha[..., None] * s.los_vec
                + np.sqrt(s.beta)[..., None] * self.est_nlos)


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circular complex Gaussian with unit per-entry variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)


def sample_realization(stats: LinkStatistics, rng: np.random.Generator) -> ChannelRealization:
    """Draw alpha ~ Bernoulli(q) and hbar ~ CN(0, I), independent per link."""
    m, k, n = stats.shape
    alpha = (rng.random((m, k)) < stats.q).astype(np.int8)
    nlos = complex_normal(rng, (m, k, n))
    return ChannelRealization(stats=stats, alpha=alpha, nlos=nlos)


_MAGIC = b"CFRZ"


def dump_realization(path, realization: ChannelRealization) -> None:
    """Binary dump for golden-file tests.

    Little-endian layout: 4-byte magic, three uint32 dims (M, K, N), one
    uint8 flag for estimate presence, alpha as M*K uint8 (row major), then
    the NLoS vectors (and estimates, if flagged) as row-major complex64.
    """
    m, k, n = realization.nlos.shape
    has_est = realization.est_nlos is not None
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIB", m, k, n, int(has_est)))
        fh.write(realization.alpha.astype(np.uint8).tobytes(order="C"))
        fh.write(realization.nlos.astype("<c8").tobytes(order="C"))
        if has_est:
            fh.write(realization.est_nlos.astype("<c8").tobytes(order="C"))


def load_realization(path, stats: LinkStatistics) -> ChannelRealization:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a realization dump")
        m, k, n, has_est = struct.unpack("<IIIB", fh.read(13))
        if (m, k, n) != stats.shape:
            raise ValueError(f"dump dims {(m, k, n)} do not match statistics {stats.shape}")
        alpha = np.frombuffer(fh.read(m * k), dtype=np.uint8).reshape(m, k).astype(np.int8)
        count = m * k * n
        nlos = np.frombuffer(fh.read(8 * count), dtype="<c8").reshape(m, k, n).astype(np.complex128)
        est = None
        if has_est:
            est = np.frombuffer(fh.read(8 * count), dtype="<c8").reshape(m, k, n).astype(np.complex128)
    return ChannelRealization(stats=stats, alpha=alpha, nlos=nlos, est_nlos=est)
