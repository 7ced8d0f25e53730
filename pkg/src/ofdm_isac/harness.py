"""Monte Carlo experiments: FWER versus threshold and overlap, detection power,
and estimator RMSE against the error bounds.

Every trial draws its own generator from ``SeedSequence([seed, experiment,
point, trial])`` so results do not depend on execution order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crlb import average_bounds
from .detect import DetectionConfig, detect_interference, fwer_theoretical, subcarrier_powers
from .estimate import (
    EstimationError,
    GridConfig,
    associate,
    music_estimate,
    omp_estimate,
    rmse,
)
from .scenario import ScenarioConfig, derive_channel_params, table1_config
from .waveform import allocate_resources, synthesize_received, synthesize_transmit

log = logging.getLogger(__name__)

EXPERIMENT_IDS = {"beta": 1, "fwer": 2, "power": 3, "rmse": 4, "bounds": 5}
METHODS = ("naive", "oracle", "proposed")


@dataclass
class ExperimentSpec:
    """One sweep.

    ``kind`` is one of ``beta``, ``fwer``, ``power``, ``rmse``.  ``sweep`` names
    the swept quantity (``beta``, ``overlap``, ``e1`` or ``e0``) and ``grid``
    its values.
    """

    kind: str
    sweep: str
    grid: list
    config: ScenarioConfig = field(default_factory=table1_config)
    trials: int = 500
    seed: int = 0
    deltas: list = field(default_factory=lambda: [1e-3])
    kappa: int = 1
    overlap: int = 8
    n_rue: int = 32
    n_iue: int = 32
    e0: float = 0.05
    e1: float = 0.05
    bound_realizations: int = 50
    grid_config: GridConfig | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_IDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if len(self.grid) == 0:
            raise ValueError("sweep grid is empty")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    binding: bool = True


@dataclass
class ResultTable:
    """Long-format result rows plus the pass/fail checks of the run."""

    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)

    COLUMNS = ("experiment", "sweep", "value", "method", "target", "metric",
               "estimate", "se", "trials", "failures")

    def add(self, experiment, sweep, value, method, target, metric, estimate,
            se=float("nan"), trials=0, failures=0):
        self.rows.append(dict(
            experiment=experiment, sweep=sweep, value=value, method=method,
            target=target, metric=metric, estimate=estimate, se=se,
            trials=trials, failures=failures,
        ))

    def select(self, **kw):
        return [r for r in self.rows if all(r[k] == v for k, v in kw.items())]

    def get(self, **kw):
        rows = self.select(**kw)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {kw}")
        return rows[0]

    def check(self, name, passed, detail, binding=True):
        self.checks.append(Check(name, bool(passed), detail, binding))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.binding)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.COLUMNS])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "NA" if np.isnan(v) else repr(float(v))
    return str(v)


def trial_rng(seed: int, experiment: str, point: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, EXPERIMENT_IDS[experiment], point, trial]))


def simulate_trial(config: ScenarioConfig, n_rue: int, n_iue: int, overlap: int,
                   rng: np.random.Generator):
    """Fresh phases, allocation, symbols and noise on the fixed geometry."""
    params = derive_channel_params(config, rng)
    alloc = allocate_resources(config.num_subcarriers, config.num_symbols, n_rue, n_iue, overlap, rng)
    tx = synthesize_transmit(alloc, config.tx_power_w, config.num_antennas, rng)
    rx = synthesize_received(params, tx, alloc, config.noise_power_w, rng, config.subcarrier_spacing_hz)
    return params, alloc, tx, rx


def run_methods(rx, tx, alloc, s, delta_f, grid, det_cfg, methods=METHODS):
    """Estimates ``{method: (delays, angles) or None}`` for one realization."""
    y, x0 = rx.y, tx.x[0]
    out = {}
    spectrum = None
    det = None
    for m in methods:
        try:
            if m == "naive":
                o = omp_estimate(y, x0, alloc.mask(0), s, delta_f, grid)
                out[m] = (o.delays, o.angles)
                continue
            if spectrum is None:
                spectrum = music_estimate(y, alloc.mask(0), s, grid)
            if m == "oracle":
                mask = alloc.clean_mask
            else:
                det = det or detect_interference(y, alloc, det_cfg)
                mask = det.clean_mask
            o = omp_estimate(y, x0, mask, s, delta_f, grid)
            a = associate(o.delays, o.angles, spectrum.peaks, spectrum.peak_values)
            out[m] = (a.delays, a.updated_angles)
        except EstimationError as exc:
            log.debug("trial failure (%s): %s", m, exc)
            out[m] = None
    return out


# --------------------------------------------------------------------------
# experiments


def run_beta_sweep(spec: ExperimentSpec) -> ResultTable:
    """Theoretical and empirical FWER under the global null for each beta."""
    cfg = spec.config
    table = ResultTable()
    ratios = np.empty(spec.trials)
    for k in range(spec.trials):
        rng = trial_rng(spec.seed, "beta", 0, k)
        _, alloc, _, rx = simulate_trial(cfg, spec.n_rue, spec.n_iue, 0, rng)
        _, gam = subcarrier_powers(rx.y, alloc)
        ratios[k] = gam.max() / gam.min()
    rho = cfg.num_symbols * cfg.num_antennas
    for b in spec.grid:
        b = float(b)
        theo = fwer_theoretical(b, rho, spec.n_rue)
        emp = float(np.mean(ratios > b))
        se = float(np.sqrt(emp * (1 - emp) / spec.trials))
        table.add("beta", "beta", b, "theoretical", "all", "fwer", theo)
        table.add("beta", "beta", b, "empirical", "all", "fwer", emp, se, spec.trials)
        # agreement is judged with the theoretical value's binomial error
        se_t = np.sqrt(theo * (1 - theo) / spec.trials)
        table.check(f"beta={b:.4g}: empirical vs theoretical", abs(emp - theo) <= 3 * se_t + 1e-12,
                    f"empirical={emp:.4f} theoretical={theo:.4f} 3se={3 * se_t:.4f}")
    return table


def _fwer_trial(rx, alloc, det_cfgs):
    inter = alloc.interference_mask
    bad_f = set(np.flatnonzero(inter.any(axis=1)).tolist())
    bad_t = set(np.flatnonzero(inter.any(axis=0)).tolist())
    out = []
    for cfg in det_cfgs:
        det = detect_interference(rx.y, alloc, cfg)
        ff = any(n not in bad_f for n in det.freq_detected.tolist())
        ft = any(t not in bad_t for t in det.time_detected.tolist())
        out.append((ff, ft))
    return out


def run_fwer_vs_overlap(spec: ExperimentSpec) -> ResultTable:
    """Empirical FWER on truly clean subcarriers and symbols for each overlap."""
    cfg = spec.config
    table = ResultTable()
    det_cfgs = [DetectionConfig(kappa=spec.kappa, delta=d) for d in spec.deltas]
    for p, k in enumerate(spec.grid):
        k = int(k)
        hits = np.zeros((spec.trials, len(det_cfgs), 2), dtype=bool)
        for t in range(spec.trials):
            rng = trial_rng(spec.seed, "fwer", p, t)
            _, alloc, _, rx = simulate_trial(cfg, spec.n_rue, spec.n_iue, k, rng)
            hits[t] = _fwer_trial(rx, alloc, det_cfgs)
        for j, d in enumerate(spec.deltas):
            se_d = float(np.sqrt(d * (1 - d) / spec.trials))
            for label, col in (("fwer_freq", hits[:, j, 0]), ("fwer_time", hits[:, j, 1]),
                               ("fwer_any", hits[:, j].any(axis=1))):
                est = float(col.mean())
                se = float(np.sqrt(est * (1 - est) / spec.trials))
                table.add("fwer", "overlap", k, f"delta={d:g}", "all", label, est, se, spec.trials)
            for label in ("fwer_freq", "fwer_time"):
                est = table.get(value=k, method=f"delta={d:g}", metric=label)["estimate"]
                table.check(f"overlap={k} delta={d:g} {label}", est <= d + 3 * se_d,
                            f"{est:.4f} <= {d + 3 * se_d:.4f}")
    for d in spec.deltas:
        vals = [r["estimate"] for r in table.select(method=f"delta={d:g}", metric="fwer_freq")]
        table.check(f"delta={d:g}: FWER does not grow with overlap", vals[-1] <= vals[0] + 1e-12,
                    f"first={vals[0]:.4f} last={vals[-1]:.4f}", binding=False)
    return table


def run_detection_power(spec: ExperimentSpec) -> ResultTable:
    """Fraction of truly interfered subcarriers that are detected, per E_1."""
    base = spec.config
    table = ResultTable()
    det_cfgs = [DetectionConfig(kappa=spec.kappa, delta=d) for d in spec.deltas]
    rates = {d: [] for d in spec.deltas}
    for p, e1 in enumerate(spec.grid):
        e1 = float(e1)
        cfg = base.with_powers(spec.e0, e1)
        hit = np.zeros(len(det_cfgs))
        total = 0
        for t in range(spec.trials):
            rng = trial_rng(spec.seed, "power", p, t)
            _, alloc, _, rx = simulate_trial(cfg, spec.n_rue, spec.n_iue, spec.overlap, rng)
            truth = alloc.interfered_subcarriers if e1 > 0 else np.zeros(0, dtype=int)
            total += truth.size
            for j, dc in enumerate(det_cfgs):
                det = detect_interference(rx.y, alloc, dc)
                hit[j] += np.intersect1d(det.freq_detected, truth).size
        for j, d in enumerate(spec.deltas):
            rate = hit[j] / total if total else float("nan")
            se = float(np.sqrt(rate * (1 - rate) / total)) if total else float("nan")
            table.add("power", "e1", e1, f"delta={d:g}", "all", "detection_rate", rate, se, spec.trials)
            if total:
                rates[d].append(rate)
    for d, r in rates.items():
        # nonbinding: within Monte Carlo noise
        ok = all(b >= a - 0.02 for a, b in zip(r, r[1:]))
        table.check(f"delta={d:g}: detection rate nondecreasing in E1", ok,
                    "rates=" + ",".join(f"{v:.4f}" for v in r), binding=False)
    return table


def run_rmse_sweep(spec: ExperimentSpec) -> ResultTable:
    """Delay/angle RMSE per target for the three methods plus the error bounds.

    ``spec.sweep`` is ``e0`` (overlap fixed at ``spec.overlap``) or ``overlap``
    (E_0 fixed at ``spec.e0``).
    """
    table = ResultTable()
    delta = spec.deltas[0]
    det_cfg = DetectionConfig(kappa=spec.kappa, delta=delta)
    for p, v in enumerate(spec.grid):
        if spec.sweep == "e0":
            e0, k = float(v), spec.overlap
        elif spec.sweep == "overlap":
            e0, k = spec.e0, int(v)
        else:
            raise ValueError("rmse sweeps run over e0 or overlap")
        cfg = spec.config.with_powers(e0, spec.e1)
        dfreq = cfg.subcarrier_spacing_hz
        grid = spec.grid_config or GridConfig.for_spacing(dfreq)
        s = cfg.num_objects
        ests = {m: [] for m in METHODS}
        truth = None
        for t in range(spec.trials):
            rng = trial_rng(spec.seed, "rmse", p, t)
            params, alloc, tx, rx = simulate_trial(cfg, spec.n_rue, spec.n_iue, k, rng)
            truth = (params.toa, params.aoa)
            res = run_methods(rx, tx, alloc, s, dfreq, grid, det_cfg)
            for m in METHODS:
                ests[m].append(res[m])
        b = average_bounds(cfg, spec.n_rue, spec.n_iue, k, spec.bound_realizations,
                           trial_rng(spec.seed, "bounds", p, 0))
        for l in range(s):
            for name, arr in (("deb_all", b.deb_all), ("deb_clean", b.deb_clean),
                              ("aeb_all", b.aeb_all), ("aeb_clean", b.aeb_clean)):
                table.add("rmse", spec.sweep, v, "bound", l + 1, name, float(arr[l]),
                          trials=b.realizations)
        summary = {}
        for m in METHODS:
            r = rmse(ests[m], *truth)
            summary[m] = r
            for l in range(s):
                table.add("rmse", spec.sweep, v, m, l + 1, "rmse_delay", float(r.delay[l]),
                          float(r.delay_se[l]), spec.trials, r.failures)
                table.add("rmse", spec.sweep, v, m, l + 1, "rmse_angle", float(r.angle[l]),
                          float(r.angle_se[l]), spec.trials, r.failures)
            table.add("rmse", spec.sweep, v, m, "all", "failure_rate", r.failures / spec.trials,
                      trials=spec.trials, failures=r.failures)
        _rmse_checks(table, spec, v, k, summary, b, s)
    return table


def _rmse_checks(table, spec, v, overlap, summary, b, s):
    tag = f"{spec.sweep}={v:g}"
    for l in range(s):
        o, p, n = summary["oracle"], summary["proposed"], summary["naive"]
        for kind, est_o, est_p, est_n, bound in (
            ("delay", o.delay[l], p.delay[l], n.delay[l], b.deb_clean[l]),
            ("angle", o.angle[l], p.angle[l], n.angle[l], b.aeb_clean[l]),
        ):
            ratio = est_p / est_o if est_o > 0 else np.inf
            table.check(f"{tag} target {l + 1} {kind}: proposed/oracle in [0.8, 1.25]",
                        0.8 <= ratio <= 1.25, f"ratio={ratio:.3f}")
            if overlap > 0:
                table.check(f"{tag} target {l + 1} {kind}: naive worse than proposed",
                            est_n > est_p, f"naive={est_n:.4g} proposed={est_p:.4g}")
                se_o = (o.delay_se if kind == "delay" else o.angle_se)[l]
                se_n = (n.delay_se if kind == "delay" else n.angle_se)[l]
                table.check(f"{tag} target {l + 1} {kind}: oracle <= naive (2 se)",
                            est_o <= est_n + 2 * np.hypot(se_o, se_n),
                            f"oracle={est_o:.4g} naive={est_n:.4g}", binding=False)
                table.check(f"{tag} target {l + 1} {kind}: naive >= 3 x proposed",
                            est_n >= 3 * est_p, f"ratio={est_n / est_p:.2f}", binding=False)
            if spec.sweep == "e0" and float(v) >= 0.06:
                for m, est in (("oracle", est_o), ("proposed", est_p)):
                    table.check(f"{tag} target {l + 1} {kind}: {m} RMSE <= 1.5 x bound",
                                est <= 1.5 * bound, f"rmse={est:.4g} bound={bound:.4g} "
                                f"ratio={est / bound:.3f}")


RUNNERS = {
    "beta": run_beta_sweep,
    "fwer": run_fwer_vs_overlap,
    "power": run_detection_power,
    "rmse": run_rmse_sweep,
}


def default_specs(config: ScenarioConfig, seed: int = 0, trials: int | None = None) -> dict:
    """The four reference sweeps with their default trial counts."""
    def n(default):
        return default if trials is None else trials

    return {
        "beta": ExperimentSpec("beta", "beta", [1.0, 1.1, 1.2, 1.3, 1.4, 1.45, 1.5, 1.561, 1.6, 1.7, 1.8, 2.0],
                               config, n(2000), seed),
        "fwer": ExperimentSpec("fwer", "overlap", list(range(0, 17)), config, n(2000), seed, deltas=[0.1, 0.01]),
        "power": ExperimentSpec("power", "e1", [0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05], config,
                                n(1250), seed, deltas=[0.1, 0.01, 0.001]),
        "rmse": ExperimentSpec("rmse", "e0", [round(0.01 * i, 2) for i in range(1, 11)], config,
                               n(500), seed, deltas=[1e-3]),
        "rmse_overlap": ExperimentSpec("rmse", "overlap", [0, 2, 4, 8, 12, 16], config, n(500), seed,
                                       deltas=[1e-3], e0=0.1),
    }


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import version
    return version("artifact")


def config_hash(config: ScenarioConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def run_all(config: ScenarioConfig, out_dir, experiments=("beta", "fwer", "power", "rmse"),
            seed: int = 0, trials: int | None = None) -> dict:
    """Run the selected sweeps and write one CSV per sweep plus a manifest.

    Returns ``{name: ResultTable}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = default_specs(config, seed, trials)
    wanted = []
    for e in experiments:
        wanted += ["rmse", "rmse_overlap"] if e == "rmse" else [e]
    results = {}
    for name in wanted:
        spec = specs[name]
        log.info("running %s (%d trials per point)", name, spec.trials)
        table = RUNNERS[spec.kind](spec)
        table.write_csv(out / f"{name}.csv")
        results[name] = table
    manifest = {
        "config_sha256": config_hash(config),
        "config": config.to_dict(),
        "seed": seed,
        "version": _version(),
        "experiments": {
            name: {
                "trials": specs[name].trials,
                "passed": t.passed,
                "checks": [c.__dict__ for c in t.checks],
            }
            for name, t in results.items()
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return results
