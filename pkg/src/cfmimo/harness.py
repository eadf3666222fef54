"""Experiment orchestration: the four experiment families, drop-level
parallelism with deterministic seeding, and CSV/SVG emission.

Every emitted statistic is a row (kind, sweep_value, scheme, statistic,
value, stderr).  Outputs are a pure function of (spec, seed) regardless of
the worker count: each drop derives its random streams from (seed, drop)
alone and drops are reduced in index order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .analysis import compute_moments, csum, mc_rate, rate_bound
from .channel import build_link_statistics
from .netgeom import ConfigError, NetworkConfig, config_from_mapping, deploy, parse_config_text
from .precoding import PowerControlMode, Scheme, solve_power

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("los_pmf", "rate_vs_snr", "rate_cdf", "rate_vs_density")
ALPHA_MODES = ("per_drop", "per_realization")

# rng stream tags: one namespace per purpose, all keyed by (seed, drop)
_TAG_DEPLOY, _TAG_ALPHA, _TAG_MC = 1, 2, 3

_EXPERIMENT_KEYS = ("kind", "schemes", "power_mode", "sweep", "drops",
                    "trials_per_drop", "alpha_mode", "seed")

_DEFAULT_SWEEPS = {
    "los_pmf": (128.0, 256.0, 512.0, 1024.0),
    "rate_vs_snr": (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0),
    "rate_cdf": (20.0,),
    "rate_vs_density": (128.0, 256.0, 512.0, 1024.0, 2048.0),
}

PRESETS = {
    # full-scale reproduction parameters (long runtime)
    "paper": {"num_aps": "1024", "num_ues": "64", "drops": "100",
              "trials_per_drop": "200"},
    # reduced scale that preserves orderings and curve shapes
    "desk": {"num_aps": "256", "num_ues": "16", "drops": "50",
             "trials_per_drop": "200"},
}


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: kind, scenario, schemes, sweep and sampling depth."""

    kind: str
    config: NetworkConfig
    schemes: tuple = tuple(Scheme)
    power_mode: PowerControlMode = PowerControlMode.PER_AP
    sweep: tuple = ()
    drops: int = 50
    trials_per_drop: int = 200
    alpha_mode: str = "per_drop"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.sweep:
            raise ConfigError("sweep must not be empty")
        if self.drops < 1 or self.trials_per_drop < 1:
            raise ConfigError("drops and trials_per_drop must be >= 1")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}")
        if not self.schemes:
            raise ConfigError("at least one scheme is required")

    def canonical(self) -> str:
        parts = [f"kind={self.kind}",
                 f"schemes={','.join(s.value for s in self.schemes)}",
                 f"power_mode={self.power_mode.value}",
                 f"sweep={','.join(f'{v:.17g}' for v in self.sweep)}",
                 f"drops={self.drops}",
                 f"trials_per_drop={self.trials_per_drop}",
                 f"alpha_mode={self.alpha_mode}"]
        for f in dataclasses.fields(NetworkConfig):
            parts.append(f"{f.name}={getattr(self.config, f.name)!r}")
        return "\n".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:8]


def experiment_from_mapping(mapping: dict, preset: str | None = None) -> ExperimentSpec:
    """Build an ExperimentSpec from flat string key/values.

    Preset values fill in keys the mapping does not provide; leftover keys
    must be NetworkConfig fields (unknown keys are errors).
    """
    merged = dict(PRESETS[preset]) if preset else {}
    merged.update(mapping)
    kind = merged.pop("kind", None)
    if kind is None:
        raise ConfigError("experiment file must set 'kind'")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")

    schemes = tuple(Scheme)
    if "schemes" in merged:
        try:
            schemes = tuple(Scheme(tok.strip()) for tok in merged.pop("schemes").split(","))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    power_mode = PowerControlMode.PER_AP
    if "power_mode" in merged:
        try:
            power_mode = PowerControlMode(merged.pop("power_mode"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    sweep = _DEFAULT_SWEEPS[kind]
    if "sweep" in merged:
        try:
            sweep = tuple(float(tok) for tok in merged.pop("sweep").split(","))
        except ValueError as exc:
            raise ConfigError(f"bad sweep: {exc}") from exc
    try:
        drops = int(merged.pop("drops", 50))
        trials = int(merged.pop("trials_per_drop", 200))
        seed = int(merged.pop("seed", 0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    alpha_mode = merged.pop("alpha_mode", "per_drop")

    config = config_from_mapping(merged)
    return ExperimentSpec(kind=kind, config=config, schemes=schemes,
                          power_mode=power_mode, sweep=sweep, drops=drops,
                          trials_per_drop=trials, alpha_mode=alpha_mode, seed=seed)


def load_experiment(path, preset: str | None = None, **overrides) -> ExperimentSpec:
    with open(path, "r", encoding="utf-8") as fh:
        mapping = parse_config_text(fh.read())
    spec = experiment_from_mapping(mapping, preset=preset)
    return replace(spec, **overrides) if overrides else spec


def budget_for(config: NetworkConfig, mode: PowerControlMode) -> float:
    """Per-group budget keeping the total system power comparable across
    modes: the per-UE budget is (M/K) times the per-AP budget."""
    if mode is PowerControlMode.PER_AP:
        return config.power_budget
    return config.power_budget * config.num_aps / config.num_ues


@dataclass(frozen=True)
class Row:
    kind: str
    sweep_value: float
    scheme: str
    statistic: str
    value: float
    stderr: float


def _snr_db_to_noise(snr_db: float) -> float:
    return 10.0 ** (-snr_db / 10.0)


def _drop_stats(spec: ExperimentSpec, config: NetworkConfig, drop: int):
    """Deploy one drop and return its (possibly alpha-conditioned) statistics."""
    dep = deploy(config, seed=[spec.seed, drop, _TAG_DEPLOY])
    stats = build_link_statistics(dep)
    if spec.alpha_mode == "per_drop":
        rng = np.random.default_rng([spec.seed, drop, _TAG_ALPHA])
        alpha = (rng.random(stats.q.shape) < stats.q).astype(float)
        stats = stats.condition_on(alpha)
    return stats


def _rate_drop(spec: ExperimentSpec, config: NetworkConfig,
               power_mode: PowerControlMode, noise_powers: np.ndarray, drop: int):
    """Bounds and MC rates for one drop: per scheme, arrays (S, K)."""
    stats = _drop_stats(spec, config, drop)
    cfg = config
    budget = budget_for(cfg, power_mode)
    out = {}
    for si, scheme in enumerate(spec.schemes):
        alloc = solve_power(power_mode, scheme, stats, cfg.noise_ul, budget)
        moments = compute_moments(scheme, stats, alloc, cfg.noise_ul, cfg.noise_dl)
        bounds = rate_bound(moments, noise_powers)
        rng = np.random.default_rng([spec.seed, drop, _TAG_MC, si])
        mc, se = mc_rate(scheme, stats, alloc, noise_powers,
                         sigma_u2=cfg.noise_ul, sigma_d2=cfg.noise_dl,
                         trials=spec.trials_per_drop, rng=rng, moments=moments)
        out[scheme] = (np.atleast_2d(bounds), np.atleast_2d(mc), np.atleast_2d(se))
    return out


def _pmf_drop(spec: ExperimentSpec, config: NetworkConfig, drop: int):
    """LoS-link counts per UE for one drop (alpha drawn once per drop)."""
    dep = deploy(config, seed=[spec.seed, drop, _TAG_DEPLOY])
    rng = np.random.default_rng([spec.seed, drop, _TAG_ALPHA])
    alpha = rng.random(dep.los_prob.shape) < dep.los_prob
    return alpha.sum(axis=0)


def _drop_task(payload):
    spec, kind_args, drop = payload
    if spec.kind == "los_pmf":
        return _pmf_drop(spec, kind_args, drop)
    config, power_mode, noise_powers = kind_args
    return _rate_drop(spec, config, power_mode, noise_powers, drop)


def _map_drops(spec: ExperimentSpec, kind_args, workers: int):
    payloads = [(spec, kind_args, drop) for drop in range(spec.drops)]
    if workers <= 1:
        return [_drop_task(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunk = max(1, spec.drops // (4 * workers))
        return list(pool.map(_drop_task, payloads, chunksize=chunk))


def _aggregate_rate_rows(spec: ExperimentSpec, results, sweep_values) -> list:
    """Average bounds and MC rates over drops and users, per scheme/point."""
    rows = []
    n_drops = len(results)
    for scheme in spec.schemes:
        bounds = np.stack([r[scheme][0] for r in results])   # (D, S, K)
        mcs = np.stack([r[scheme][1] for r in results])
        ses = np.stack([r[scheme][2] for r in results])
        n_samples = n_drops * bounds.shape[2]
        for s, sweep_value in enumerate(sweep_values):
            b = bounds[:, s, :]
            rows.append(Row(spec.kind, sweep_value, scheme.value, "bound_mean",
                            float(csum(b.reshape(-1)) / n_samples), 0.0))
            m = mcs[:, s, :].reshape(-1)
            se = ses[:, s, :].reshape(-1)
            mean = float(csum(m) / n_samples)
            spread = float(np.sqrt((np.var(m) + np.mean(se ** 2)) / n_samples))
            rows.append(Row(spec.kind, sweep_value, scheme.value, "mc_mean",
                            mean, spread))
    return rows


def run_los_pmf(spec: ExperimentSpec, workers: int = 1) -> list:
    """PMF of the number of LoS links per UE, for each AP count in sweep."""
    rows = []
    for m_aps in spec.sweep:
        config = replace(spec.config, num_aps=int(m_aps))
        counts = np.concatenate(_map_drops(spec, config, workers))
        n = counts.size
        pmf = np.bincount(counts)
        for count, hits in enumerate(pmf):
            if hits == 0 and count > 0:
                continue
            p = hits / n
            rows.append(Row("los_pmf", m_aps, "-", f"pmf[{count}]", float(p),
                            float(math.sqrt(p * (1.0 - p) / n))))
    return rows


def run_rate_vs_snr(spec: ExperimentSpec, workers: int = 1) -> list:
    """Mean per-user rate (bound and MC) versus data SNR in dB."""
    noise_powers = np.array([_snr_db_to_noise(s) for s in spec.sweep])
    results = _map_drops(spec, (spec.config, spec.power_mode, noise_powers), workers)
    return _aggregate_rate_rows(spec, results, spec.sweep)


def run_rate_cdf(spec: ExperimentSpec, workers: int = 1) -> list:
    """Pooled per-user MC rates across drops at the sweep's first SNR."""
    noise_powers = np.array([_snr_db_to_noise(spec.sweep[0])])
    results = _map_drops(spec, (spec.config, spec.power_mode, noise_powers), workers)
    rows = []
    for scheme in spec.schemes:
        samples = np.sort(np.concatenate([r[scheme][1][0] for r in results]))
        n = samples.size
        for quant in (5.0, 50.0, 95.0):
            rows.append(Row("rate_cdf", spec.sweep[0], scheme.value,
                            f"q{quant:02.0f}", float(np.percentile(samples, quant)), 0.0))
        p_zero = float(np.mean(samples <= 0.0))
        rows.append(Row("rate_cdf", spec.sweep[0], scheme.value, "p_zero",
                        p_zero, float(math.sqrt(p_zero * (1 - p_zero) / n))))
        for j, value in enumerate(samples):
            level = (j + 0.5) / n
            rows.append(Row("rate_cdf", level, scheme.value, "cdf_sample",
                            float(value), 0.0))
    return rows


def run_rate_vs_density(spec: ExperimentSpec, workers: int = 1) -> list:
    """Mean per-user rate versus AP count at the configured data noise."""
    rows = []
    for m_aps in spec.sweep:
        config = replace(spec.config, num_aps=int(m_aps))
        noise = np.array([config.noise_data])
        results = _map_drops(spec, (config, spec.power_mode, noise), workers)
        sub = replace(spec, config=config)
        rows.extend(Row("rate_vs_density", m_aps, r.scheme, r.statistic,
                        r.value, r.stderr)
                    for r in _aggregate_rate_rows(sub, results, [m_aps]))
    return rows


_RUNNERS = {
    "los_pmf": run_los_pmf,
    "rate_vs_snr": run_rate_vs_snr,
    "rate_cdf": run_rate_cdf,
    "rate_vs_density": run_rate_vs_density,
}


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> list:
    log.info("running %s: %d drops, %d sweep points, workers=%d",
             spec.kind, spec.drops, len(spec.sweep), workers)
    return _RUNNERS[spec.kind](spec, workers)


# --- emission ---------------------------------------------------------------

CSV_HEADER = ("kind", "sweep_value", "scheme", "statistic", "value", "stderr")


def write_rows_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.kind, f"{r.sweep_value:.17g}", r.scheme,
                             r.statistic, f"{r.value:.17g}", f"{r.stderr:.17g}"])


def read_results_csv(path) -> list:
    """Bundled reader: returns the same Row list that produced the file."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header!r}")
        for rec in reader:
            rows.append(Row(rec[0], float(rec[1]), rec[2], rec[3],
                            float(rec[4]), float(rec[5])))
    return rows


def _plot_rows(rows, spec: ExperimentSpec, path) -> None:
    """Minimal SVG plot: sweep lines with MC error bars, or CDF steps."""
    from matplotlib.backends.backend_svg import FigureCanvasSVG
    from matplotlib.figure import Figure

    fig = Figure(figsize=(7, 5))
    FigureCanvasSVG(fig)
    ax = fig.add_subplot(111)
    if spec.kind == "rate_cdf":
        for scheme in spec.schemes:
            pts = [(r.value, r.sweep_value) for r in rows
                   if r.scheme == scheme.value and r.statistic == "cdf_sample"]
            if pts:
                xs, ys = zip(*pts)
                ax.step(xs, ys, where="post", label=scheme.value)
        ax.set_xlabel("per-user rate [bit/channel use]")
        ax.set_ylabel("empirical CDF")
    elif spec.kind == "los_pmf":
        for m_aps in spec.sweep:
            pts = sorted((int(r.statistic[4:-1]), r.value) for r in rows
                         if r.sweep_value == m_aps and r.statistic.startswith("pmf["))
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=f"M={int(m_aps)}")
        ax.set_xlabel("LoS links per UE")
        ax.set_ylabel("probability")
    else:
        xlabel = "data SNR [dB]" if spec.kind == "rate_vs_snr" else "AP count"
        for scheme in spec.schemes:
            for stat, style in (("bound_mean", "-"), ("mc_mean", "--")):
                pts = [(r.sweep_value, r.value, r.stderr) for r in rows
                       if r.scheme == scheme.value and r.statistic == stat]
                if not pts:
                    continue
                xs, ys, es = zip(*sorted(pts))
                if stat == "mc_mean" and any(e > 0 for e in es):
                    ax.errorbar(xs, ys, yerr=es, fmt=style,
                                label=f"{scheme.value} ({stat})")
                else:
                    ax.plot(xs, ys, style, label=f"{scheme.value} ({stat})")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("mean per-user rate [bit/channel use]")
    ax.grid(True)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")


def emit(rows, spec: ExperimentSpec, out_dir, formats=("csv",)) -> list:
    """Write results; filenames embed the spec digest and seed."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    base = f"{spec.kind}_{spec.digest()}_s{spec.seed}"
    paths = []
    for fmt in formats:
        path = os.path.join(out_dir, f"{base}.{'csv' if fmt == 'csv' else 'svg'}")
        if fmt == "csv":
            write_rows_csv(rows, path)
        elif fmt == "svg":
            _plot_rows(rows, spec, path)
        else:
            raise ConfigError(f"unknown output format {fmt!r}")
        paths.append(path)
    return paths
