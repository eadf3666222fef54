"""Acceptance suite: every gate below runs at its stated tolerance and
prints one PASS/FAIL line.  Run with ``pytest tests/test_acceptance.py -s``
to see the lines for passing gates too.

The desk-scale rate runs (used by the dominance and ordering gates) fix
their operating point as: 256 APs / 16 UEs over 1 km^2, uplink pilot noise
1e-10, downlink pilot noise 1e-14, per-UE power mode, data SNR swept to
120 dB so the interference- and self-interference-limited regimes are
visible.
"""

import filecmp
import itertools

import numpy as np
import pytest

from cfmimo.analysis import (compute_moments, mc_rate, moments_accurate,
                             moments_agree, moments_estimated, oracle_moments,
                             random_instance, rate_bound)
from cfmimo.channel import build_link_statistics, complex_normal
from cfmimo.cli import main
from cfmimo.harness import ExperimentSpec, run_los_pmf
from cfmimo.netgeom import NetworkConfig, deploy, erf
from cfmimo.precoding import (PowerControlMode, Scheme, expected_stream_power,
                              solve_power)
from oracles import erf_series

ACC_SEED = 20250809


def report(number, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    return ok


# --- shared desk-scale rate runs -------------------------------------------

def _drop_rates(config, mode, noise, seed, drop, scheme, j, trials):
    """Bounds and MC rates for one (drop, scheme), frozen-alpha pipeline."""
    budget = (config.power_budget if mode is PowerControlMode.PER_AP
              else config.power_budget * config.num_aps / config.num_ues)
    stats = build_link_statistics(deploy(config, seed=[seed, drop]))
    rng = np.random.default_rng([seed, drop, 1])
    alpha = (rng.random(stats.q.shape) < stats.q).astype(float)
    stats = stats.condition_on(alpha)
    alloc = solve_power(mode, scheme, stats, config.noise_ul, budget)
    moments = compute_moments(scheme, stats, alloc, config.noise_ul,
                              config.noise_dl)
    bounds = rate_bound(moments, noise)
    mc, se = mc_rate(scheme, stats, alloc, noise,
                     sigma_u2=config.noise_ul, sigma_d2=config.noise_dl,
                     trials=trials,
                     rng=np.random.default_rng([seed, drop, 2, j, trials]),
                     moments=moments)
    return bounds, mc, se


def _rate_run(config, mode, snrs_db, drops, trials, seed):
    """Per-drop bounds and MC rates for all schemes, plus run metadata."""
    noise = 10.0 ** (-np.asarray(snrs_db, dtype=float) / 10.0)
    out = {scheme: [] for scheme in Scheme}
    for drop in range(drops):
        for j, scheme in enumerate(Scheme):
            out[scheme].append(_drop_rates(config, mode, noise, seed, drop,
                                           scheme, j, trials))
    results = {s: tuple(np.stack(arr) for arr in zip(*v)) for s, v in out.items()}
    meta = dict(config=config, mode=mode, noise=noise, seed=seed, trials=trials)
    return results, meta


DESK_SNRS = (20.0, 110.0, 120.0)


@pytest.fixture(scope="module")
def desk_per_ue():
    config = NetworkConfig(num_aps=256, num_ues=16,
                           noise_ul=1e-10, noise_dl=1e-14)
    return _rate_run(config, PowerControlMode.PER_UE, DESK_SNRS,
                     drops=50, trials=200, seed=ACC_SEED)


@pytest.fixture(scope="module")
def dense128_per_ap():
    config = NetworkConfig(num_aps=128, num_ues=16,
                           noise_ul=1e-10, noise_dl=1e-14)
    return _rate_run(config, PowerControlMode.PER_AP, (20.0,),
                     drops=50, trials=200, seed=ACC_SEED + 1)


# --- 1: closed-form moments vs brute-force oracle ---------------------------

def test_criterion_1_moment_oracle_equivalence():
    dims = list(itertools.product((2, 3, 4), (1, 2), (2, 3)))   # all 12 combos
    instances = [(i, dict(zip(("m", "n", "k"), dims[i]))) for i in range(12)]
    instances += [(i, {}) for i in range(12, 20)]
    failures = []
    for i, kw in instances:
        stats, alloc, su2, sd2 = random_instance(ACC_SEED + i, **kw)
        for j, scheme in enumerate(Scheme):
            closed = compute_moments(scheme, stats, alloc, su2, sd2)
            oracle = oracle_moments(scheme, stats, alloc, su2, sd2, 1_000_000,
                                    np.random.default_rng([ACC_SEED, i, j]))
            verdict = moments_agree(closed, oracle, n_sigma=3.0, rel=0.02)
            bad = [name for name, ok in verdict.items() if not ok]
            if bad:
                failures.append((i, scheme.value, bad))
    ok = not failures
    assert report(1, ok, "closed-form moments match the 1e6-draw oracle on "
                  f"20 instances x 4 schemes ({'no' if ok else failures} "
                  "disagreements)"), failures


# --- 2: LoS-count PMF endpoints ---------------------------------------------

def test_criterion_2_los_pmf_endpoints():
    spec = ExperimentSpec(kind="los_pmf", config=NetworkConfig(),
                          sweep=(128.0, 1024.0), drops=200, seed=ACC_SEED)
    rows = run_los_pmf(spec)
    p0 = {r.sweep_value: r.value for r in rows if r.statistic == "pmf[0]"}
    ok_lo = abs(p0[128.0] - 0.60) <= 0.05
    ok_hi = abs(p0[1024.0] - 0.02) <= 0.01
    assert report(2, ok_lo and ok_hi,
                  f"P(no LoS link) = {p0[128.0]:.3f} at M=128 (0.60 +/- 0.05) "
                  f"and {p0[1024.0]:.4f} at M=1024 (0.02 +/- 0.01), 200 drops")


# --- 3: silent-AP and radiated-power fractions ------------------------------

def test_criterion_3_silent_ap_fraction():
    config = NetworkConfig()   # M=1024, K=64
    silent, radiated = [], []
    for drop in range(30):
        stats = build_link_statistics(deploy(config, seed=[ACC_SEED, drop]))
        rng = np.random.default_rng([ACC_SEED, drop, 1])
        alpha = (rng.random(stats.q.shape) < stats.q).astype(float)
        stats = stats.condition_on(alpha)
        alloc = solve_power(PowerControlMode.PER_AP, Scheme.STATISTICAL_NO_DL,
                            stats, config.noise_ul, config.power_budget)
        silent.append(len(alloc.silent_aps) / config.num_aps)
        s = expected_stream_power(Scheme.STATISTICAL_NO_DL, stats, config.noise_ul)
        radiated.append(float((alloc.x ** 2 * s).sum())
                        / (config.num_aps * config.power_budget))
    silent_frac, power_frac = np.mean(silent), np.mean(radiated)
    ok = abs(silent_frac - 0.76) <= 0.04 and abs(power_frac - 0.24) <= 0.04
    assert report(3, ok, f"silent-AP fraction {silent_frac:.3f} (0.76 +/- 0.04), "
                  f"radiated-power fraction {power_frac:.3f} (0.24 +/- 0.04)")


# --- 4: Jensen dominance across every rate run ------------------------------

def _dominance_flags(bounds, mc, se):
    # strict inequality up to float resolution: equality is attained by
    # deterministic users, whose bound and sampled rate agree to the ulp
    return bounds < mc - 3.0 * se - 1e-9 * (1.0 + np.abs(mc))


def test_criterion_4_jensen_dominance(desk_per_ue, dense128_per_ap):
    """bound >= mc - 3 stderr with zero violations.

    A studentized mean grazes its own 3-sigma band with small but nonzero
    probability even under a valid bound, so any flagged point is
    re-measured with 25x the draws from an independent stream; a genuine
    violation persists and grows, a fluke vanishes.
    """
    violations = []
    total = 0
    for results, meta in (desk_per_ue, dense128_per_ap):
        for j, scheme in enumerate(Scheme):
            bounds, mc, se = results[scheme]
            total += mc.size
            for drop in np.unique(np.where(_dominance_flags(bounds, mc, se))[0]):
                b2, mc2, se2 = _drop_rates(meta["config"], meta["mode"],
                                           meta["noise"], meta["seed"],
                                           int(drop), scheme, j,
                                           trials=25 * meta["trials"])
                if np.any(_dominance_flags(b2, mc2, se2)):
                    violations.append((scheme.value, int(drop)))
    ok = not violations
    assert report(4, ok, f"bound >= mc - 3*stderr across all {total} "
                  f"(drop, scheme, user, SNR) points "
                  f"({'no' if ok else violations} confirmed violations)")


# --- 5: estimated-CSI moments reduce to accurate-CSI ones -------------------

def test_criterion_5_limit_consistency():
    worst = 0.0
    for i in range(10):
        stats, alloc, _, _ = random_instance(ACC_SEED + 100 + i)
        exact = moments_accurate(stats, alloc)
        limit = moments_estimated(stats, alloc, sigma_u2=0.0, sigma_d2=0.0)
        for name in ("e_gkk2", "e_gki2", "e_gdot2", "e_gbar2", "e_ghat2",
                     "e_gtilde2"):
            a = np.asarray(getattr(exact, name))
            b = np.asarray(getattr(limit, name))
            scale = np.maximum(np.abs(a), 1e-300)
            mask = np.abs(a) > 0
            if np.any(mask):
                worst = max(worst, float(np.max(np.abs(a - b)[mask] / scale[mask])))
            assert np.array_equal(a == 0.0, b == 0.0)
    ok = worst <= 1e-12
    assert report(5, ok, f"noiseless-training limit matches field-by-field, "
                  f"worst relative deviation {worst:.2e} (<= 1e-12)")


# --- 6: qualitative orderings at desk scale ---------------------------------

def _mean_bound(run, scheme, snr_index):
    results, _ = run
    return float(np.mean(results[scheme][0][:, snr_index, :]))


def test_criterion_6a_statistical_beats_full_at_high_snr(desk_per_ue):
    hi = len(DESK_SNRS) - 1
    stat = min(_mean_bound(desk_per_ue, Scheme.STATISTICAL_NO_DL, hi),
               _mean_bound(desk_per_ue, Scheme.STATISTICAL_WITH_DL, hi))
    full = max(_mean_bound(desk_per_ue, Scheme.ACCURATE_CSI, hi),
               _mean_bound(desk_per_ue, Scheme.ESTIMATED_CSI, hi))
    ok = stat > full
    assert report("6a", ok, "per-UE mode at high SNR: worst statistical mean "
                  f"bound {stat:.2f} > best full-beamforming {full:.2f}")


def test_criterion_6b_low_density_statistical_penalty(dense128_per_ap):
    stat = _mean_bound(dense128_per_ap, Scheme.STATISTICAL_NO_DL, 0)
    est = _mean_bound(dense128_per_ap, Scheme.ESTIMATED_CSI, 0)
    ok = stat < est
    assert report("6b", ok, "per-AP mode at M=128: statistical-without-training "
                  f"mean bound {stat:.3f} < estimated-CSI {est:.3f}")


def test_criterion_6c_saturation_pattern(desk_per_ue):
    lo, hi = len(DESK_SNRS) - 2, len(DESK_SNRS) - 1
    assert DESK_SNRS[hi] - DESK_SNRS[lo] == 10.0
    gains = {scheme: _mean_bound(desk_per_ue, scheme, hi)
             - _mean_bound(desk_per_ue, scheme, lo) for scheme in Scheme}
    ok = (gains[Scheme.ESTIMATED_CSI] < 0.1
          and gains[Scheme.STATISTICAL_NO_DL] < 0.1
          and gains[Scheme.STATISTICAL_WITH_DL] > 0.5)
    assert report("6c", ok, "final-10dB mean-rate gains: estimated "
                  f"{gains[Scheme.ESTIMATED_CSI]:.3f} (<0.1), statistical "
                  f"{gains[Scheme.STATISTICAL_NO_DL]:.3f} (<0.1), "
                  f"with-training {gains[Scheme.STATISTICAL_WITH_DL]:.3f} (>0.5)")


# --- 7: estimator properties -------------------------------------------------

def test_criterion_7_estimator_properties():
    rng = np.random.default_rng(ACC_SEED)
    draws = 100_000
    beta, su2 = 0.8, 0.4
    hbar = complex_normal(rng, (draws,))
    y = np.sqrt(beta) * hbar + np.sqrt(su2) * complex_normal(rng, (draws,))
    hhat = (np.sqrt(beta) / (beta + su2)) * y
    htilde = hbar - hhat
    corr_ul = np.mean(htilde * hhat.conj())
    sem_ul = np.std(htilde) * np.std(hhat) / np.sqrt(draws)

    v, sd2 = 1.7, 0.6
    gbar = np.sqrt(v) * complex_normal(rng, (draws,))
    ybar = gbar + np.sqrt(sd2) * complex_normal(rng, (draws,))
    ghat = (v / (v + sd2)) * ybar
    gtilde = gbar - ghat
    corr_dl = np.mean(ghat * gtilde.conj())
    sem_dl = np.std(ghat) * np.std(gtilde) / np.sqrt(draws)

    worst_identity = 0.0
    for _ in range(50):
        b = float(rng.uniform(0.01, 5.0))
        s = float(rng.uniform(0.0, 5.0))
        worst_identity = max(worst_identity,
                             abs(b / (b + s) + s / (b + s) - 1.0),
                             abs(b ** 2 / (b + s) + b * s / (b + s) - b) / b)
    ok = (abs(corr_ul) < 3 * sem_ul and abs(corr_dl) < 3 * sem_dl
          and worst_identity <= 1e-12)
    assert report(7, ok, f"orthogonality |corr| = {abs(corr_ul):.2e} (UL), "
                  f"{abs(corr_dl):.2e} (DL), both < 3 sigma at 1e5 draws; "
                  f"variance identities exact to {worst_identity:.1e}")


# --- 8: determinism across worker counts ------------------------------------

SPEC_TEXT = """
num_aps = 32
num_ues = 4
area_side = 400
kind = rate_vs_snr
sweep = 0, 20
drops = 16
trials_per_drop = 20
seed = 77
"""


def test_criterion_8_worker_determinism(tmp_path):
    spec_file = tmp_path / "exp.cfg"
    spec_file.write_text(SPEC_TEXT)
    out1, out8 = tmp_path / "w1", tmp_path / "w8"
    assert main(["simulate", str(spec_file), "--workers", "1",
                 "--out", str(out1)]) == 0
    assert main(["simulate", str(spec_file), "--workers", "8",
                 "--out", str(out8)]) == 0
    files1 = sorted(p.name for p in out1.iterdir())
    files8 = sorted(p.name for p in out8.iterdir())
    same_names = files1 == files8 and len(files1) == 1
    identical = same_names and filecmp.cmp(out1 / files1[0], out8 / files8[0],
                                           shallow=False)
    assert report(8, identical,
                  f"workers 1 and 8 produced byte-identical CSV {files1[0]}")


# --- 9: error-function accuracy ----------------------------------------------

def test_criterion_9_erf_accuracy():
    grid = np.linspace(-4.0, 4.0, 801)
    reference = np.array([erf_series(z) for z in grid])
    err = float(np.max(np.abs(erf(grid) - reference)))
    ok = err <= 1e-6
    assert report(9, ok, f"erf matches the series oracle on 801 points in "
                  f"[-4, 4], max error {err:.2e} (<= 1e-6)")
