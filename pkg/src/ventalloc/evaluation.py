"""Survival, allocation and parity metrics over capacity sweeps.

Capacities are expressed as a percentage of the full capacity ``C_full``, the
largest daily ventilator demand seen when nobody is ever refused. A sweep
first calibrates a fixed bed count and the per-seed reference survivors from
unconstrained runs; because arrivals use their own random stream, any
protocol that serves every requester reproduces those runs exactly at
``C_full``, which pins the 100% anchor.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EvaluationError
from .mdp import RewardParams
from .protocols import get_protocol
from .simulator import SimConfig, run_episode
from .trajectory import MAX_LENGTH

DEFAULT_GRID = tuple(range(0, 101, 10))


def normalized_survival(survivors, survivors_at_full) -> float:
    if survivors_at_full <= 0:
        raise EvaluationError("no survivors at full capacity; the cohort is degenerate")
    return 100.0 * survivors / survivors_at_full


def allocation_rate(allocated, requested):
    """Percent of requests served, or None when nothing was requested."""
    if allocated < 0 or allocated > requested:
        raise EvaluationError(f"allocated={allocated} must lie in [0, requested={requested}]")
    if requested == 0:
        return None
    return 100.0 * allocated / requested


def dpr(group_rates) -> float:
    """Smallest over largest defined group allocation rate, in percent."""
    rates = [float(r) for r in group_rates if r is not None and not math.isnan(r)]
    if len(rates) < 2:
        raise EvaluationError("parity needs at least two groups with requests")
    hi = max(rates)
    if hi == 0.0:
        return 100.0  # nobody served anywhere: groups are treated alike
    return 100.0 * (min(rates) / hi)  # ratio first keeps equal rates at exactly 100


def auc(points) -> float:
    """Trapezoidal area under ``[(x, y), ...]`` sorted by x."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise EvaluationError("auc needs at least two (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) < 0):
        raise EvaluationError("points must be sorted by capacity")
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class Calibration:
    """Fixed ward size, full capacity and reference survivors per seed."""

    bed_count: int
    full_capacity: int
    seeds: tuple
    reference: tuple
    arrival_rate: float
    horizon: int

    def capacity_for(self, pct: float) -> int:
        return int(round(self.full_capacity * pct / 100.0))

    def sim_config(self, capacity: int, **kw) -> SimConfig:
        return SimConfig(capacity=capacity, arrival_rate=self.arrival_rate, bed_count=self.bed_count,
                         horizon=self.horizon, **kw)


def calibrate(cohort, seeds, arrival_rate: float = 12.0, horizon: int = 365, bed_count: int | None = None,
              pilot_beds: int | None = None) -> Calibration:
    """Unconstrained runs that fix N, C_full and the reference survivors.

    Without an explicit ``bed_count`` a pilot on a very large ward measures
    the peak load (occupied beds plus arrivals) and N is set to cover it, so
    the reference runs never overflow.
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ConfigurationError("at least one seed is required")
    lottery = get_protocol("lottery")
    if bed_count is None:
        n0 = pilot_beds or int(math.ceil(arrival_rate * MAX_LENGTH + 4 * arrival_rate))
        pilot = SimConfig(capacity=n0, arrival_rate=arrival_rate, bed_count=n0, horizon=horizon)
        peak_load = 0
        for s in seeds:
            log = run_episode(lottery, pilot, cohort, seed=s, record=False)
            peak_load = max(peak_load, max(log.load))
        bed_count = max(peak_load, 1)
    cfg = SimConfig(capacity=bed_count, arrival_rate=arrival_rate, bed_count=bed_count, horizon=horizon)
    ref, full = [], 0
    for s in seeds:
        log = run_episode(lottery, cfg, cohort, seed=s, record=False)
        ref.append(log.survivors)
        full = max(full, log.max_demand)
    return Calibration(bed_count, full, seeds, tuple(ref), arrival_rate, horizon)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class EvalReport:
    protocol: str
    grid_pct: tuple
    capacities: tuple
    seeds: tuple
    groups: tuple
    survivors: np.ndarray  # (P, S)
    reference: np.ndarray  # (S,)
    requested: np.ndarray  # (P, S, G)
    allocated: np.ndarray  # (P, S, G)
    returns: np.ndarray  # (P, S)
    settings: dict = field(default_factory=dict)

    def survival_pct(self) -> np.ndarray:
        if np.any(self.reference <= 0):
            raise EvaluationError("a reference run has no survivors")
        return 100.0 * self.survivors / self.reference[None, :]

    def alloc_pct(self) -> np.ndarray:
        req = self.requested.sum(axis=2)
        alloc = self.allocated.sum(axis=2)
        return np.divide(100.0 * alloc, req, out=np.full(req.shape, np.nan), where=req > 0)

    def group_alloc_pct(self) -> np.ndarray:
        return np.divide(100.0 * self.allocated, self.requested, out=np.full(self.requested.shape, np.nan),
                         where=self.requested > 0)

    def dpr_pct(self) -> np.ndarray:
        rates = self.group_alloc_pct()
        out = np.full(rates.shape[:2], np.nan)
        for i in range(rates.shape[0]):
            for j in range(rates.shape[1]):
                try:
                    out[i, j] = dpr(list(rates[i, j]))
                except EvaluationError:
                    pass
        return out

    @staticmethod
    def _mean_std(a):
        return np.nanmean(a, axis=1), np.nanstd(a, axis=1)

    def survival(self):
        return self._mean_std(self.survival_pct())

    def allocation(self):
        return self._mean_std(self.alloc_pct())

    def parity(self):
        return self._mean_std(self.dpr_pct())

    def auscc(self) -> float:
        return auc(list(zip(self.grid_pct, self.survival()[0])))

    def auacc(self) -> float:
        return auc(list(zip(self.grid_pct, self.allocation()[0])))

    def summary(self) -> dict:
        sm, ss = self.survival()
        am, as_ = self.allocation()
        dm, ds = self.parity()
        out = {
            "protocol": self.protocol,
            "grid_pct": list(self.grid_pct),
            "capacities": list(self.capacities),
            "survival_mean": sm.tolist(), "survival_std": ss.tolist(),
            "alloc_mean": am.tolist(), "alloc_std": as_.tolist(),
            "dpr_mean": dm.tolist(), "dpr_std": ds.tolist(),
        }
        if len(self.grid_pct) >= 2:
            out["auscc"] = self.auscc()
            out["auacc"] = self.auacc()
        return out

    def to_json(self) -> dict:
        doc = self.summary()
        doc.update(
            seeds=list(self.seeds), groups=list(self.groups), settings=self.settings,
            survivors=self.survivors.tolist(), reference=self.reference.tolist(),
            requested=self.requested.tolist(), allocated=self.allocated.tolist(), returns=self.returns.tolist(),
        )
        return json.loads(json.dumps(doc, allow_nan=True))

    def rows(self):
        """Flat rows: protocol, capacity_pct, seed, survival_pct, group, alloc_pct, dpr_pct."""
        surv = self.survival_pct()
        rates = self.group_alloc_pct()
        par = self.dpr_pct()
        for i, pct in enumerate(self.grid_pct):
            for j, seed in enumerate(self.seeds):
                for g, name in enumerate(self.groups):
                    yield (self.protocol, pct, seed, surv[i, j], name, rates[i, j, g], par[i, j])


def _episode(protocol, cfg, cohort, seed, reward_params):
    if isinstance(protocol, str):
        protocol = get_protocol(protocol)
    log = run_episode(protocol, cfg, cohort, seed=seed, reward_params=reward_params, record=False)
    counts = log.group_counts()
    req = [counts[g][0] for g in log.groups]
    alloc = [counts[g][1] for g in log.groups]
    return log.survivors, req, alloc, float(sum(log.rewards))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TRIAGE_RL_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("TRIAGE_RL_THREADS must be an integer") from None


def capacity_sweep(protocol, cohort, calibration: Calibration, grid_pct=DEFAULT_GRID, death_prob: float = 1.0,
                   withdrawal_on: bool = True, reward_params: RewardParams | None = None, name: str | None = None,
                   capacities=None, workers: int | None = None) -> EvalReport:
    """Run ``protocol`` at every grid capacity for every calibration seed.

    ``protocol`` is a protocol object or a name understood by
    :func:`get_protocol`; names are required for multi-process runs.
    ``capacities`` overrides the percentage-to-capacity mapping.
    """
    grid = tuple(float(g) for g in grid_pct)
    if not grid:
        raise ConfigurationError("capacity grid is empty")
    caps = tuple(int(c) for c in capacities) if capacities is not None else tuple(calibration.capacity_for(g) for g in grid)
    if len(caps) != len(grid):
        raise ConfigurationError("capacities and grid differ in length")
    groups = tuple(cohort.groups) if hasattr(cohort, "groups") else tuple(range(cohort.n_groups))
    jobs = []
    for c in caps:
        cfg = calibration.sim_config(min(c, calibration.bed_count), withdrawal_on=withdrawal_on, death_prob=death_prob)
        for s in calibration.seeds:
            jobs.append((cfg, s))
    workers = worker_count() if workers is None else workers
    if workers > 1 and isinstance(protocol, str):
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_episode, [protocol] * len(jobs), [j[0] for j in jobs], [cohort] * len(jobs),
                                  [j[1] for j in jobs], [reward_params] * len(jobs)))
    else:
        results = [_episode(protocol, cfg, cohort, s, reward_params) for cfg, s in jobs]
    P, S, G = len(caps), len(calibration.seeds), len(groups)
    surv = np.array([r[0] for r in results], dtype=np.int64).reshape(P, S)
    req = np.array([r[1] for r in results], dtype=np.int64).reshape(P, S, G)
    alloc = np.array([r[2] for r in results], dtype=np.int64).reshape(P, S, G)
    rets = np.array([r[3] for r in results]).reshape(P, S)
    label = name or (protocol if isinstance(protocol, str) else getattr(protocol, "name", "protocol"))
    settings = {"death_prob": death_prob, "withdrawal_on": withdrawal_on, "bed_count": calibration.bed_count,
                "full_capacity": calibration.full_capacity, "arrival_rate": calibration.arrival_rate,
                "horizon": calibration.horizon}
    return EvalReport(label, grid, caps, calibration.seeds, tuple(str(g) for g in groups), surv,
                      np.asarray(calibration.reference, dtype=np.int64), req, alloc, rets, settings)


# ---------------------------------------------------------------------------
# reports


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))  # numpy scalars repr as np.float64(...)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_reports(reports, out_dir) -> dict:
    """Write ``report.json``, ``report.csv`` and per-protocol curve CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    doc = {r.protocol: r.to_json() for r in reports}
    p = out / "report.json"
    p.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    paths["json"] = p
    p = out / "report.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "capacity_pct", "seed", "survival_pct", "group", "alloc_pct", "dpr_pct"])
        for r in reports:
            for row in r.rows():
                w.writerow([_fmt(v) for v in row])
    paths["csv"] = p
    for r in reports:
        safe = r.protocol.replace(":", "_").replace("/", "_")
        for kind, (mean, std) in (("scc", r.survival()), ("acc", r.allocation())):
            p = out / f"{kind}_{safe}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["capacity_pct", "mean", "std"])
                for pct, m, s in zip(r.grid_pct, mean, std):
                    w.writerow([_fmt(pct), _fmt(m), _fmt(s)])
            paths[f"{kind}_{safe}"] = p
    return paths


# ---------------------------------------------------------------------------
# fairness frontier


@dataclass
class ParetoPoint:
    lam: float
    survival: float
    dpr: float
    survival_std: float = 0.0
    dpr_std: float = 0.0


def pareto_sweep(lambdas, train_fn, eval_fn, tolerance: float = 1.0):
    """Train and evaluate one model per fairness weight.

    ``train_fn(lam)`` returns a protocol; ``eval_fn(protocol)`` returns an
    :class:`EvalReport` at a single capacity. The turning point is the
    largest-DPR point whose survival stays within ``tolerance`` points of the
    smallest-lambda point.
    """
    lams = sorted(float(x) for x in lambdas)
    if not lams:
        raise ConfigurationError("lambda grid is empty")
    points = []
    for lam in lams:
        rep = eval_fn(train_fn(lam))
        sm, ss = rep.survival()
        dm, ds = rep.parity()
        points.append(ParetoPoint(lam, float(sm[0]), float(dm[0]), float(ss[0]), float(ds[0])))
    base = points[0].survival
    ok = [p for p in points if p.survival >= base - tolerance and not math.isnan(p.dpr)]
    turning = max(ok, key=lambda p: (p.dpr, -p.lam)) if ok else points[0]
    return points, turning


def write_pareto(points, turning, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "survival_pct", "survival_std", "dpr_pct", "dpr_std", "turning_point"])
        for p in points:
            w.writerow([_fmt(p.lam), _fmt(p.survival), _fmt(p.survival_std), _fmt(p.dpr), _fmt(p.dpr_std),
                        int(p is turning)])
    return path


def with_seeds(calibration: Calibration, seeds) -> Calibration:
    """Same ward but a different seed subset (reference must already cover them)."""
    idx = {s: i for i, s in enumerate(calibration.seeds)}
    missing = [s for s in seeds if s not in idx]
    if missing:
        raise ConfigurationError(f"seeds {missing} were not calibrated")
    return replace(calibration, seeds=tuple(seeds), reference=tuple(calibration.reference[idx[s]] for s in seeds))
