"""Command-line entry point.

Every command resolves its settings as built-in default < JSON config file <
command-line flag, writes the effective settings next to its outputs and is
a pure function of them. Exit codes: 0 success, 2 usage or configuration
error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .errors import CapabilityError, ConfigurationError, EmptyInputError, ParseError, VentAllocError
from .evaluation import (
    calibrate,
    capacity_sweep,
    pareto_sweep,
    worker_count,
    write_pareto,
    write_reports,
)
from .mdp import RewardParams
from .protocols import get_protocol
from .qnet import ClassicalConfig, ClassicalQNet, QNetConfig
from .simulator import SimConfig, run_episode
from .trainer import DESK_QNET, DESK_TRAIN, TrainConfig, default_model, train
from .trajectory import SyntheticCohortConfig, generate_cohort, load_cohort, normalize_proportions, write_cohort

log = logging.getLogger("ventalloc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
EVAL_SEED_STRIDE = 1000  # evaluation seeds are seed * stride + 0..n-1


class UsageError(ConfigurationError):
    pass


# ---------------------------------------------------------------------------
# value parsing


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def parse_grid(text: str) -> tuple:
    """``start:stop:step`` (inclusive) or a comma list of percentages."""
    if ":" in text:
        try:
            a, b, c = (float(v) for v in text.split(":"))
        except ValueError:
            raise UsageError(f"bad capacity range {text!r}") from None
        if c <= 0 or b < a:
            raise UsageError(f"bad capacity range {text!r}")
        n = int(round((b - a) / c))
        return tuple(a + i * c for i in range(n + 1))
    grid = tuple(_floats(text))
    if not grid:
        raise UsageError("capacity grid is empty")
    return grid


def parse_rows(text: str) -> list:
    rows = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise UsageError(f"row {item!r} is not N:C:arrival_rate")
        try:
            rows.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise UsageError(f"row {item!r} is not N:C:arrival_rate") from None
    return rows


# ---------------------------------------------------------------------------
# settings


DEFAULTS = {
    "cohort": {"path": None, "n_patients": 1000, "group_proportions": None, "separability": None},
    "sim": {"capacity": None, "capacity_pct": None, "arrival_rate": 12.0, "bed_count": None, "horizon": 365,
            "death_prob": 1.0, "withdrawal_on": True},
    "reward": {"lam": 1e3, "mu": -0.1, "enable_terminal": True, "enable_cost": True, "enable_fairness": True},
    "train": {**DESK_TRAIN, "mode": "off_policy", "behavior": None},
    "qnet": {"head": "transformer", **DESK_QNET, "hidden": [128, 128]},
    "eval": {"protocols": "lottery,youngest,sofa,mp,dt", "grid_pct": "0:100:10", "seeds": 30},
}

# flag dest -> (section, key)
FLAG_MAP = {
    "cohort": ("cohort", "path"), "patients": ("cohort", "n_patients"), "group_props": ("cohort", "group_proportions"),
    "separability": ("cohort", "separability"),
    "capacity": ("sim", "capacity"), "capacity_pct": ("sim", "capacity_pct"), "arrival_rate": ("sim", "arrival_rate"),
    "bed_count": ("sim", "bed_count"), "horizon": ("sim", "horizon"), "death_prob": ("sim", "death_prob"),
    "lam": ("reward", "lam"), "mu": ("reward", "mu"),
    "mode": ("train", "mode"), "behavior": ("train", "behavior"), "epochs": ("train", "epochs"),
    "gradient_steps": ("train", "gradient_steps"), "learning_rate": ("train", "learning_rate"),
    "batch_size": ("train", "batch_size"), "update_freq": ("train", "update_freq"), "tau": ("train", "tau"),
    "gamma": ("train", "gamma"), "epsilon": ("train", "epsilon"), "val_seeds": ("train", "val_seeds"),
    "head": ("qnet", "head"),
    "protocols": ("eval", "protocols"), "capacities": ("eval", "grid_pct"), "seeds": ("eval", "seeds"),
}


def resolve(args, command_defaults=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    for section, values in (command_defaults or {}).items():
        cfg[section].update(values)
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        for section, values in doc.items():
            if section == "seed":
                continue
            if section not in cfg or not isinstance(values, dict):
                raise UsageError(f"unknown config section {section!r}")
            cfg[section].update(values)
        if args.seed is None and "seed" in doc:
            args.seed = int(doc["seed"])
    for dest, (section, key) in FLAG_MAP.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg[section][key] = v
    if getattr(args, "reassessment", False):
        cfg["sim"]["withdrawal_on"] = False
    if args.seed is None:
        raise UsageError("--seed is required (or a top-level \"seed\" in the config file)")
    cfg["seed"] = int(args.seed)
    return cfg


def echo_config(cfg: dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _cohort_config(cfg: dict) -> SyntheticCohortConfig:
    c = cfg["cohort"]
    kw = {"n_patients": int(c["n_patients"]), "seed": cfg["seed"]}
    if c.get("group_proportions") is not None:
        props = c["group_proportions"]
        kw["group_proportions"] = normalize_proportions(_floats(props) if isinstance(props, str) else props)
    if c.get("separability") is not None:
        kw["separability"] = float(c["separability"])
    for extra in ("base_mortality", "group_severity_shift"):
        if c.get(extra) is not None:
            kw[extra] = tuple(c[extra])
    return SyntheticCohortConfig(**kw)


def load_or_generate(cfg: dict):
    path = cfg["cohort"]["path"]
    if path:
        if not Path(path).exists():
            raise UsageError(f"cohort file {path} does not exist")
        return load_cohort(path)
    return generate_cohort(_cohort_config(cfg))


def eval_seeds(cfg: dict) -> range:
    n = int(cfg["eval"]["seeds"])
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    base = cfg["seed"] * EVAL_SEED_STRIDE
    return range(base, base + n)


def _calibration(cfg, cohort, bed_count=None):
    s = cfg["sim"]
    return calibrate(cohort, eval_seeds(cfg), arrival_rate=float(s["arrival_rate"]), horizon=int(s["horizon"]),
                     bed_count=bed_count if bed_count is not None else s["bed_count"])


def _capacity(cfg, calib) -> int:
    s = cfg["sim"]
    if s["capacity"] is not None:
        c = int(s["capacity"])
        if c > calib.bed_count:
            raise UsageError(f"capacity {c} exceeds the ward size {calib.bed_count}")
        return c
    if s["capacity_pct"] is not None:
        return calib.capacity_for(float(s["capacity_pct"]))
    raise UsageError("give --capacity or --capacity-pct")


def _reward(cfg) -> RewardParams:
    return RewardParams(**cfg["reward"])


def _train_config(cfg, lam=None) -> TrainConfig:
    t = dict(cfg["train"])
    if t.get("mode") == "offline" and not t.get("behavior"):
        t["behavior"] = "mp"
    reward = _reward(cfg) if lam is None else RewardParams(**{**cfg["reward"], "lam": float(lam)})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(t) - known
    if unknown:
        raise UsageError(f"unknown train settings {sorted(unknown)}")
    return TrainConfig(**t, reward=reward, seed=cfg["seed"])


def _model(cfg, cohort, sim_config):
    q = dict(cfg["qnet"])
    head = q.pop("head")
    hidden = q.pop("hidden")
    arrays = cohort.packed
    if head == "classical":
        return ClassicalQNet(ClassicalConfig(n_beds=sim_config.bed_count, capacity=sim_config.capacity,
                                             hidden=tuple(hidden), k=arrays.k, n_groups=arrays.n_groups))
    if head != "transformer":
        raise UsageError(f"unknown head {head!r}")
    known = {f.name for f in fields(QNetConfig)}
    return default_model(cohort, sim_config, QNetConfig(**{k: v for k, v in q.items() if k in known}))


def _progress(e):
    log.info("epoch %d: survival %.2f dpr %.2f return %.1f (%.1fs)", e["epoch"], e["survival"], e["dpr"],
             e["return"], e["wall"])


def _train_one(cfg, cohort, calib, capacity, lam=None, head=None):
    if head is not None:
        cfg = {**cfg, "qnet": {**cfg["qnet"], "head": head}}
    s = cfg["sim"]
    sc = calib.sim_config(capacity, withdrawal_on=bool(s["withdrawal_on"]), death_prob=float(s["death_prob"]))
    return train(cohort, sc, _train_config(cfg, lam), model=_model(cfg, cohort, sc), progress=_progress)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = resolve(args)
    ds = generate_cohort(_cohort_config(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(ds, out)
    echo_config(cfg, out.with_name(out.stem + ".config.json"))
    log.info("wrote %d patients to %s", len(ds), out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = resolve(args)
    out = Path(args.out_dir)
    cohort = load_or_generate(cfg)
    s = cfg["sim"]
    if s["capacity"] is None:
        raise UsageError("simulate needs --capacity")
    sc = SimConfig(capacity=int(s["capacity"]), arrival_rate=float(s["arrival_rate"]), bed_count=s["bed_count"],
                   withdrawal_on=bool(s["withdrawal_on"]), death_prob=float(s["death_prob"]),
                   horizon=int(s["horizon"]), seed=cfg["seed"])
    episode = run_episode(get_protocol(args.protocol), sc, cohort, reward_params=_reward(cfg))
    out.mkdir(parents=True, exist_ok=True)
    episode.to_jsonl(out / "episode.jsonl", patient_ids=[t.patient_id for t in cohort.trajectories])
    summary = {"protocol": args.protocol, "admissions": episode.admissions, "survivors": episode.survivors,
               "deaths": episode.deaths, "max_demand": episode.max_demand, "return": float(sum(episode.rewards)),
               "group_counts": episode.group_counts()}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    echo_config({**cfg, "protocol": args.protocol}, out / "config.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args)
    out = Path(args.out_dir)
    cohort = load_or_generate(cfg)
    calib = _calibration(cfg, cohort)
    capacity = _capacity(cfg, calib)
    echo_config(cfg, out / "config.json")
    res = _train_one(cfg, cohort, calib, capacity)
    res.save(out / "model.json")
    res.history.write(out)
    log.info("saved model for C=%d (best epoch %d) to %s", capacity, res.best_epoch, out / "model.json")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve(args)
    out = Path(args.out_dir)
    cohort = load_or_generate(cfg)
    calib = _calibration(cfg, cohort)
    grid = cfg["eval"]["grid_pct"]
    grid = parse_grid(grid) if isinstance(grid, str) else tuple(float(g) for g in grid)
    names = cfg["eval"]["protocols"]
    names = [n.strip() for n in names.split(",") if n.strip()] if isinstance(names, str) else list(names)
    if not names:
        raise UsageError("no protocols to evaluate")
    for n in names:
        if n.startswith("learned:") and not Path(n.split(":", 1)[1]).exists():
            raise UsageError(f"model file {n.split(':', 1)[1]} does not exist")
        get_protocol(n)  # fail fast on unknown names
    echo_config(cfg, out / "config.json")
    s = cfg["sim"]
    reports = [capacity_sweep(n, cohort, calib, grid_pct=grid, death_prob=float(s["death_prob"]),
                              withdrawal_on=bool(s["withdrawal_on"]), reward_params=_reward(cfg),
                              workers=worker_count()) for n in names]
    write_reports(reports, out)
    for r in reports:
        log.info("%s: AUSCC %s", r.protocol, r.summary().get("auscc"))
    return EXIT_OK


def cmd_pareto(args) -> int:
    cfg = resolve(args)
    lambdas = _floats(args.lambdas)
    if not lambdas:
        raise UsageError("--lambdas is empty")
    if cfg["sim"]["capacity_pct"] is None and cfg["sim"]["capacity"] is None:
        cfg["sim"]["capacity_pct"] = 50.0
    out = Path(args.out_dir)
    cohort = load_or_generate(cfg)
    calib = _calibration(cfg, cohort)
    capacity = _capacity(cfg, calib)
    echo_config({**cfg, "lambdas": lambdas}, out / "config.json")
    s = cfg["sim"]

    def train_fn(lam):
        res = _train_one(cfg, cohort, calib, capacity, lam=lam)
        res.save(out / f"model_lambda_{lam:g}.json")
        return res

    def eval_fn(res):
        return capacity_sweep(res.protocol(), cohort, calib, grid_pct=(0.0,), capacities=(capacity,),
                              death_prob=float(s["death_prob"]), withdrawal_on=bool(s["withdrawal_on"]))

    points, turning = pareto_sweep(lambdas, train_fn, eval_fn)
    write_pareto(points, turning, out / "pareto.csv")
    return EXIT_OK


def compare_qnets(cfg, cohort, rows, progress=None) -> list:
    """Train both heads per (N, C, arrival rate) row; a head that cannot be built reports its error."""
    results = []
    for n, c, lam_arr in rows:
        rcfg = {**cfg, "sim": {**cfg["sim"], "arrival_rate": lam_arr, "bed_count": n}}
        calib = _calibration(rcfg, cohort, bed_count=n)
        row = {"N": n, "C": c, "arrival_rate": lam_arr}
        for head in ("transformer", "classical"):
            try:
                res = _train_one(rcfg, cohort, calib, c, head=head)
            except CapabilityError as exc:
                row[head] = f"error: {exc}"
                continue
            rep = capacity_sweep(res.protocol(), cohort, calib, grid_pct=(0.0,), capacities=(c,),
                                 withdrawal_on=bool(rcfg["sim"]["withdrawal_on"]))
            row[head] = float(rep.survival()[0][0])
        results.append(row)
        if progress is not None:
            progress(row)
    return results


def cmd_compare_qnets(args) -> int:
    # the head comparison isolates the architecture, so the fairness weight defaults to zero
    cfg = resolve(args, {"reward": {"lam": 0.0}})
    rows = parse_rows(args.rows)
    out = Path(args.out_dir)
    cohort = load_or_generate(cfg)
    echo_config({**cfg, "rows": args.rows}, out / "config.json")
    results = compare_qnets(cfg, cohort, rows, progress=lambda r: log.info("%s", r))
    with open(out / "compare_qnets.csv", "w", encoding="utf-8") as fh:
        fh.write("N,C,arrival_rate,transformer_survival,classical_survival\n")
        for r in results:
            cells = [r[h] if isinstance(r[h], str) else repr(r[h]) for h in ("transformer", "classical")]
            cells = ['"' + v.replace('"', "'") + '"' if v.startswith("error") else v for v in cells]
            fh.write(f"{r['N']},{r['C']},{r['arrival_rate']!r},{cells[0]},{cells[1]}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, out_flag=True):
    p.add_argument("--seed", type=int, help="global seed (mandatory here or in the config file)")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--cohort", help="cohort CSV; a synthetic cohort is generated when absent")
    p.add_argument("--patients", type=int, help="synthetic cohort size")
    p.add_argument("--separability", type=float, help="synthetic cohort outcome separability in [0, 1]")
    p.add_argument("--group-props", dest="group_props", help="comma-separated group shares, renormalized")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if out_flag:
        p.add_argument("-o", "--out-dir", dest="out_dir", required=True, help="output directory")


def _sim_flags(p):
    p.add_argument("--capacity", type=int, help="ventilators C")
    p.add_argument("--arrival-rate", dest="arrival_rate", type=float, help="Poisson arrival rate")
    p.add_argument("--bed-count", dest="bed_count", type=int, help="ward size N")
    p.add_argument("--horizon", type=int, help="days per episode")
    p.add_argument("--death-prob", dest="death_prob", type=float, help="death probability when denied")
    p.add_argument("--reassessment", action="store_true", help="re-award ventilators from scratch each day")
    p.add_argument("--lambda", dest="lam", type=float, help="fairness weight")
    p.add_argument("--mu", type=float, help="per-ventilator cost weight")


def _train_flags(p):
    p.add_argument("--capacity-pct", dest="capacity_pct", type=float, help="capacity as %% of full capacity")
    p.add_argument("--mode", choices=("off-policy", "off_policy", "offline"))
    p.add_argument("--behavior", help="behavior protocol for offline training")
    p.add_argument("--epochs", type=int)
    p.add_argument("--gradient-steps", dest="gradient_steps", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--update-freq", dest="update_freq", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--val-seeds", dest="val_seeds", type=int)
    p.add_argument("--head", choices=("transformer", "classical"))
    p.add_argument("--seeds", type=int, help="evaluation and calibration seeds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ventalloc", description="Ventilator triage simulation and learned policies")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort CSV and manifest")
    _common(p, out_flag=False)
    p.add_argument("-o", "--out", required=True, help="cohort CSV path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="roll one episode under a protocol")
    _common(p)
    _sim_flags(p)
    p.add_argument("--protocol", default="lottery", help="protocol name or learned:<model file>")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a Q-network for one capacity")
    _common(p)
    _sim_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="capacity sweep over protocols")
    _common(p)
    _sim_flags(p)
    p.add_argument("--protocols", help="comma list; learned:<model file> entries allowed")
    p.add_argument("--capacities", help="percent grid, start:stop:step or comma list")
    p.add_argument("--seeds", type=int, help="number of evaluation seeds")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pareto", help="fairness-survival frontier over the fairness weight")
    _common(p)
    _sim_flags(p)
    _train_flags(p)
    p.add_argument("--lambdas", required=True, help="comma list of fairness weights")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("compare-qnets", help="classical against transformer head on small wards")
    _common(p)
    _sim_flags(p)
    _train_flags(p)
    p.add_argument("--rows", required=True, help="comma list of N:C:arrival_rate triples")
    p.set_defaults(func=cmd_compare_qnets)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError, ParseError, EmptyInputError) as exc:
        print(f"ventalloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VentAllocError, OSError, FloatingPointError) as exc:
        print(f"ventalloc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
