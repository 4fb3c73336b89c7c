"""Patient clinical trajectories: synthetic cohorts, CSV I/O and splits.

A trajectory is the day-by-day record of one ventilated ICU admission. The
simulator replays these records verbatim, so everything downstream depends on
the condition vectors being in [0, 1] and on ``length`` matching the number of
recorded days.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, EmptyInputError, ParseError

DEFAULT_GROUPS = ("Asian", "Black", "Hispanic", "White")
# shares of the four groups in the source population; they omit other groups
# and sum to 0.934, so configs use the renormalized simplex
SOURCE_GROUP_SHARES = (0.041, 0.147, 0.108, 0.638)
N_FEATURES = 38
MAX_LENGTH = 30
MIN_AGE, MAX_AGE = 18, 95
OUTCOMES = ("survived", "dead")

SOFA_COMPONENTS = ("sofa_resp", "sofa_coag", "sofa_liver", "sofa_cardio", "sofa_cns", "sofa_renal")
VITALS = ("pulse", "spo2", "resp_rate", "bmi", "sbp", "dbp", "temperature", "lactate")
COMORBIDITIES = (
    "ami", "chf", "pvd", "cvd", "dementia", "copd", "rheumatic", "peptic_ulcer",
    "mild_liver", "diabetes", "diabetes_complicated", "hemiplegia", "renal",
    "cancer", "severe_liver", "metastatic", "aids", "covid",
)
# prevalence in the source ICU population
COMORBIDITY_RATES = (
    0.2227, 0.4006, 0.2877, 0.2845, 0.0490, 0.3120, 0.0446, 0.0506,
    0.1576, 0.3510, 0.2031, 0.0927, 0.3120, 0.1920, 0.0741, 0.0996, 0.0064, 0.1220,
)
SEVERE_COMORBIDITIES = ("dementia", "severe_liver", "metastatic", "aids")
FEATURE_NAMES = SOFA_COMPONENTS + VITALS + COMORBIDITIES + ("age", "sex") + tuple(
    f"group_{i}" for i in range(4)
)
assert len(FEATURE_NAMES) == N_FEATURES

_F_SOFA = slice(0, 6)
_F_PULSE, _F_SPO2, _F_RESP, _F_BMI, _F_SBP, _F_DBP, _F_TEMP, _F_LACTATE = range(6, 14)
_F_COMORB = slice(14, 32)
_F_AGE, _F_SEX = 32, 33
_F_GROUP = 34


@dataclass(eq=False)
class ClinicalTrajectory:
    patient_id: str
    group: str
    age: int
    bmi: float
    sofa_total: np.ndarray  # (length,) int
    severe_comorbidity: bool
    conditions: np.ndarray  # (length, k) float in [0, 1]
    outcome: str

    def __post_init__(self):
        self.conditions = np.asarray(self.conditions, dtype=np.float64)
        self.sofa_total = np.asarray(self.sofa_total, dtype=np.int64)
        if self.conditions.ndim != 2 or self.conditions.shape[0] == 0:
            raise ConfigurationError(f"{self.patient_id}: conditions must be a non-empty 2-D array")
        if len(self.sofa_total) != self.conditions.shape[0]:
            raise ConfigurationError(f"{self.patient_id}: sofa_total length != number of condition vectors")
        if not 1 <= self.length <= MAX_LENGTH:
            raise ConfigurationError(f"{self.patient_id}: length {self.length} outside [1, {MAX_LENGTH}]")
        if not MIN_AGE <= self.age <= MAX_AGE:
            raise ConfigurationError(f"{self.patient_id}: age {self.age} outside [{MIN_AGE}, {MAX_AGE}]")
        if self.outcome not in OUTCOMES:
            raise ConfigurationError(f"{self.patient_id}: unknown outcome {self.outcome!r}")
        if self.conditions.min() < 0.0 or self.conditions.max() > 1.0:
            raise ConfigurationError(f"{self.patient_id}: condition values outside [0, 1]")
        if self.sofa_total.min() < 0 or self.sofa_total.max() > 24:
            raise ConfigurationError(f"{self.patient_id}: SOFA outside [0, 24]")

    @property
    def length(self) -> int:
        return int(self.conditions.shape[0])

    @property
    def k(self) -> int:
        return int(self.conditions.shape[1])

    def __eq__(self, other):
        if not isinstance(other, ClinicalTrajectory):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.group == other.group
            and self.age == other.age
            and self.bmi == other.bmi
            and self.severe_comorbidity == other.severe_comorbidity
            and self.outcome == other.outcome
            and np.array_equal(self.sofa_total, other.sofa_total)
            and np.array_equal(self.conditions, other.conditions)
        )


@dataclass(frozen=True)
class CohortArrays:
    """Packed, index-addressable view of a cohort used by the simulator."""

    features: np.ndarray  # (total_days, k)
    sofa: np.ndarray  # (total_days,)
    offsets: np.ndarray  # (P,) first row of each patient
    lengths: np.ndarray  # (P,)
    dead: np.ndarray  # (P,) bool, terminal outcome
    group: np.ndarray  # (P,) group index
    age: np.ndarray
    bmi: np.ndarray
    comorbid: np.ndarray
    n_groups: int

    @property
    def n_patients(self) -> int:
        return len(self.lengths)

    @property
    def k(self) -> int:
        return self.features.shape[1]


@dataclass(eq=False)
class CohortDataset:
    trajectories: tuple
    groups: tuple = DEFAULT_GROUPS
    split_tag: str = "train"

    def __post_init__(self):
        self.trajectories = tuple(self.trajectories)
        self.groups = tuple(self.groups)
        if self.split_tag not in ("train", "val", "test"):
            raise ConfigurationError(f"unknown split tag {self.split_tag!r}")
        ids = [t.patient_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate patient_id in cohort")
        unknown = {t.group for t in self.trajectories} - set(self.groups)
        if unknown:
            raise ConfigurationError(f"trajectories reference unknown groups {sorted(unknown)}")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, CohortDataset):
            return NotImplemented
        return (
            self.groups == other.groups
            and self.split_tag == other.split_tag
            and self.trajectories == other.trajectories
        )

    @property
    def group_counts(self) -> dict:
        counts = {g: 0 for g in self.groups}
        for t in self.trajectories:
            counts[t.group] += 1
        return counts

    @cached_property
    def packed(self) -> CohortArrays:
        if not self.trajectories:
            raise EmptyInputError("cannot pack an empty cohort")
        lengths = np.array([t.length for t in self.trajectories], dtype=np.int64)
        offsets = np.zeros(len(lengths), dtype=np.int64)
        offsets[1:] = np.cumsum(lengths)[:-1]
        gidx = {g: i for i, g in enumerate(self.groups)}
        return CohortArrays(
            features=np.ascontiguousarray(np.concatenate([t.conditions for t in self.trajectories])),
            sofa=np.concatenate([t.sofa_total for t in self.trajectories]).astype(np.int64),
            offsets=offsets,
            lengths=lengths,
            dead=np.array([t.outcome == "dead" for t in self.trajectories]),
            group=np.array([gidx[t.group] for t in self.trajectories], dtype=np.int64),
            age=np.array([t.age for t in self.trajectories], dtype=np.int64),
            bmi=np.array([t.bmi for t in self.trajectories], dtype=np.float64),
            comorbid=np.array([t.severe_comorbidity for t in self.trajectories]),
            n_groups=len(self.groups),
        )


def normalize_proportions(values) -> tuple:
    """Scale non-negative shares to sum to one."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) == 0 or np.any(v < 0) or not np.all(np.isfinite(v)) or v.sum() <= 0:
        raise ConfigurationError("group proportions must be non-negative with a positive sum")
    return tuple(float(x) for x in v / v.sum())


@dataclass
class SyntheticCohortConfig:
    """Knobs of the synthetic cohort generator.

    Outcome is drawn first from the per-group ``base_mortality``; the latent
    severity chain is then bridged to a terminal severity on the matching side
    of 0.5, so the recorded outcome always agrees with the chain's end point.
    ``separability`` scales how strongly the prognostic features (lactate,
    SpO2) reveal the outcome from the first day; ``group_severity_shift``
    inflates observed severity (SOFA) for some groups without changing their
    true outcome.
    """

    n_patients: int = 1000
    group_proportions: tuple = field(default_factory=lambda: normalize_proportions(SOURCE_GROUP_SHARES))
    base_mortality: tuple = (0.255, 0.236, 0.281, 0.249)
    groups: tuple = DEFAULT_GROUPS
    group_severity_shift: tuple = (0.0, 0.06, 0.06, 0.0)
    severity_separation: float = 0.1
    severity_volatility: float = 0.05
    separability: float = 0.3
    length_signal: float = 0.5
    length_mean: float = 4.8
    length_std: float = 5.9
    group_length_ratio: tuple = (1.02, 1.23, 1.35, 0.90)
    death_length_ratio: float = 1.5
    age_mean: tuple = (62.3, 57.5, 55.9, 64.2)
    age_std: float = 15.5
    feature_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if int(self.n_patients) < 1:
            raise ConfigurationError("n_patients must be >= 1")
        g = len(self.groups)
        props = np.asarray(self.group_proportions, dtype=float)
        if len(props) != g:
            raise ConfigurationError("group_proportions length must match groups")
        if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ConfigurationError("group_proportions must be a probability simplex")
        for name in ("base_mortality", "group_severity_shift", "group_length_ratio", "age_mean"):
            if len(getattr(self, name)) != g:
                raise ConfigurationError(f"{name} length must match groups")
        mort = np.asarray(self.base_mortality, dtype=float)
        if np.any(mort < 0) or np.any(mort > 1):
            raise ConfigurationError("base_mortality entries must lie in [0, 1]")
        if not 0.0 <= self.separability <= 1.0:
            raise ConfigurationError("separability must lie in [0, 1]")
        if self.length_mean < 1 or self.length_std <= 0:
            raise ConfigurationError("length_mean must be >= 1 and length_std > 0")
        if g > 4:
            raise ConfigurationError("the condition vector encodes at most 4 groups")


def _bridge(rng, start, end, length, volatility):
    if length == 1:
        return np.array([end])
    t = np.arange(length) / (length - 1)
    steps = rng.normal(0.0, volatility, size=length)
    steps[0] = 0.0
    walk = np.cumsum(steps)
    walk -= t * walk[-1]  # pin both ends
    return np.clip(start + (end - start) * t + walk, 0.0, 1.0)


def _sample_length(rng, mean, std):
    excess = max(mean - 1.0, 1e-3)
    shape = excess**2 / std**2
    scale = std**2 / excess
    return int(min(MAX_LENGTH, 1 + round(rng.gamma(shape, scale))))


def generate_cohort(config: SyntheticCohortConfig) -> CohortDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = int(config.n_patients)
    g_count = len(config.groups)
    props = np.asarray(config.group_proportions, dtype=float)
    groups = rng.choice(g_count, size=n, p=props / props.sum())
    dead = rng.random(n) < np.asarray(config.base_mortality)[groups]
    noise = config.feature_noise
    sep = config.separability
    rates = np.asarray(COMORBIDITY_RATES)
    severe_idx = [COMORBIDITIES.index(c) for c in SEVERE_COMORBIDITIES]

    trajectories = []
    for i in range(n):
        g = int(groups[i])
        d = bool(dead[i])
        sign = 1.0 if d else -1.0
        age = int(np.clip(round(rng.normal(config.age_mean[g] + 4.0 * sign, config.age_std)), MIN_AGE, MAX_AGE))
        sex = float(rng.random() < 0.393)
        bmi = float(np.clip(round(rng.normal(29.6, 8.74), 1), 15.0, 60.0))
        comorb = (rng.random(len(rates)) < np.minimum(rates * (1.5 if d else 0.85), 0.95)).astype(float)
        severe = bool(comorb[severe_idx].any())

        mean_len = config.length_mean * config.group_length_ratio[g] * (config.death_length_ratio if d else 1.0)
        length = _sample_length(rng, mean_len, config.length_std)

        start = np.clip(rng.normal(0.45 + config.severity_separation * sign, 0.12), 0.0, 1.0)
        end = rng.uniform(0.65, 0.95) if d else rng.uniform(0.05, 0.35)
        latent = _bridge(rng, start, end, length, config.severity_volatility)
        observed = np.clip(latent + config.group_severity_shift[g], 0.0, 1.0)

        x = np.empty((length, N_FEATURES))
        x[:, _F_SOFA] = observed[:, None] + rng.normal(0.0, noise, size=(length, 6))
        x[:, _F_PULSE] = 0.4 + 0.3 * observed + rng.normal(0.0, noise, length)
        x[:, _F_SPO2] = 0.8 - 0.3 * observed - 0.1 * sep * sign + rng.normal(0.0, noise, length)
        length_hint = math.log(length) / math.log(MAX_LENGTH)
        x[:, _F_RESP] = 0.3 + 0.4 * config.length_signal * length_hint + rng.normal(0.0, noise, length)
        x[:, _F_BMI] = (bmi - 15.0) / 45.0
        x[:, _F_SBP] = 0.6 - 0.25 * observed + rng.normal(0.0, noise, length)
        x[:, _F_DBP] = 0.55 - 0.2 * observed + rng.normal(0.0, noise, length)
        x[:, _F_TEMP] = 0.5 + 0.1 * observed + rng.normal(0.0, noise, length)
        x[:, _F_LACTATE] = 0.5 + 0.35 * sep * sign + rng.normal(0.0, 0.1 * (1.5 - sep), length)
        x[:, _F_COMORB] = comorb
        x[:, _F_AGE] = (age - MIN_AGE) / (MAX_AGE - MIN_AGE)
        x[:, _F_SEX] = sex
        x[:, _F_GROUP:] = 0.0
        x[:, _F_GROUP + g] = 1.0
        np.clip(x, 0.0, 1.0, out=x)

        trajectories.append(
            ClinicalTrajectory(
                patient_id=f"P{i:06d}",
                group=config.groups[g],
                age=age,
                bmi=bmi,
                sofa_total=np.rint(24.0 * observed).astype(np.int64),
                severe_comorbidity=severe,
                conditions=x,
                outcome="dead" if d else "survived",
            )
        )
    return CohortDataset(tuple(trajectories), groups=tuple(config.groups), split_tag="train")


# ---------------------------------------------------------------------------
# CSV + manifest I/O

_META_COLUMNS = ("patient_id", "day", "group", "age", "bmi", "severe_comorbidity", "sofa_total")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def csv_header(k: int = N_FEATURES) -> list:
    return list(_META_COLUMNS) + [f"f{j + 1}" for j in range(k)] + ["outcome"]


def write_cohort(dataset: CohortDataset, path, feature_min=None, feature_max=None) -> Path:
    """Write ``dataset`` as cohort CSV plus sidecar manifest; returns the manifest path.

    Features are stored as ``min + x * (max - min)``; with the default bounds
    (0 and 1) values are written verbatim, so a reload is bit-exact.
    """
    if not dataset.trajectories:
        raise EmptyInputError("refusing to write an empty cohort")
    k = dataset.trajectories[0].k
    lo = np.zeros(k) if feature_min is None else np.asarray(feature_min, dtype=float)
    hi = np.ones(k) if feature_max is None else np.asarray(feature_max, dtype=float)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(k))
        for t in dataset.trajectories:
            raw = lo + t.conditions * (hi - lo)
            for day in range(t.length):
                writer.writerow(
                    [t.patient_id, day + 1, t.group, t.age, repr(float(t.bmi)), int(t.severe_comorbidity),
                     int(t.sofa_total[day])]
                    + [repr(float(v)) for v in raw[day]]
                    + [t.outcome if day == t.length - 1 else ""]
                )
    mpath = manifest_path(path)
    manifest = {
        "format": "ventalloc-cohort",
        "version": 1,
        "groups": list(dataset.groups),
        "split_tag": dataset.split_tag,
        "features": [f"f{j + 1}" for j in range(k)],
        "min": [float(v) for v in lo],
        "max": [float(v) for v in hi],
    }
    mpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return mpath


def load_cohort(path, manifest=None) -> CohortDataset:
    path = Path(path)
    mpath = Path(manifest) if manifest is not None else manifest_path(path)
    if not mpath.exists():
        raise ParseError(f"missing normalization manifest {mpath}")
    meta = json.loads(mpath.read_text(encoding="utf-8"))
    features = meta["features"]
    lo = np.asarray(meta["min"], dtype=float)
    hi = np.asarray(meta["max"], dtype=float)
    if len(lo) != len(features) or len(hi) != len(features):
        raise ParseError("manifest min/max length does not match its feature list")
    if np.any(hi <= lo):
        raise ParseError("manifest max must exceed min for every feature")
    groups = tuple(meta.get("groups", DEFAULT_GROUPS))

    rows_by_patient: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty cohort file", row=1) from None
        expected = list(_META_COLUMNS) + list(features) + ["outcome"]
        missing = [c for c in expected if c not in header]
        if missing:
            raise ParseError("missing columns", row=1, column=missing[0])
        col = {name: header.index(name) for name in expected}
        feat_cols = [col[f] for f in features]
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=line_no)
            pid = row[col["patient_id"]]
            rows_by_patient.setdefault(pid, []).append((line_no, row))

    trajectories = []
    for pid, rows in rows_by_patient.items():
        days, conds, sofa = [], [], []
        for line_no, row in rows:
            try:
                day = int(row[col["day"]])
            except ValueError:
                raise ParseError("day is not an integer", row=line_no, column="day") from None
            if days and day <= days[-1]:
                raise ParseError("non-monotone day", row=line_no, column="day")
            days.append(day)
            x = np.empty(len(features))
            for j, c in enumerate(feat_cols):
                try:
                    raw = float(row[c])
                except ValueError:
                    raise ParseError("feature is not a number", row=line_no, column=features[j]) from None
                v = (raw - lo[j]) / (hi[j] - lo[j])
                if not 0.0 <= v <= 1.0:
                    raise ParseError(f"normalized value {v:.6g} outside [0, 1]", row=line_no, column=features[j])
                x[j] = v
            conds.append(x)
            try:
                s = int(row[col["sofa_total"]])
            except ValueError:
                raise ParseError("sofa_total is not an integer", row=line_no, column="sofa_total") from None
            if not 0 <= s <= 24:
                raise ParseError("sofa_total outside [0, 24]", row=line_no, column="sofa_total")
            sofa.append(s)
            is_last = line_no == rows[-1][0]
            outcome = row[col["outcome"]].strip()
            if is_last and outcome not in OUTCOMES:
                raise ParseError("final row must carry outcome survived|dead", row=line_no, column="outcome")
            if not is_last and outcome:
                raise ParseError("outcome present before the final row", row=line_no, column="outcome")
        line_no, first = rows[0]
        try:
            age = int(first[col["age"]])
            bmi = float(first[col["bmi"]])
            severe = bool(int(first[col["severe_comorbidity"]]))
        except ValueError as exc:
            raise ParseError(f"bad demographic field: {exc}", row=line_no) from None
        group = first[col["group"]]
        if group not in groups:
            raise ParseError(f"unknown group {group!r}", row=line_no, column="group")
        if not MIN_AGE <= age <= MAX_AGE:
            raise ParseError("age outside [18, 95]", row=line_no, column="age")
        if not 1 <= len(days) <= MAX_LENGTH:
            raise ParseError(f"trajectory length {len(days)} outside [1, {MAX_LENGTH}]", row=line_no)
        trajectories.append(
            ClinicalTrajectory(pid, group, age, bmi, np.array(sofa), severe, np.vstack(conds),
                               rows[-1][1][col["outcome"]].strip())
        )
    return CohortDataset(tuple(trajectories), groups=groups, split_tag=meta.get("split_tag", "train"))


# ---------------------------------------------------------------------------
# splits and summaries


def split_cohort(dataset: CohortDataset, fractions: Sequence[float], seed: int):
    """Stratified (by group) three-way split; returns (train, val, test)."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigurationError("fractions must be three non-negative numbers summing to 1")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    keys = np.empty(n)
    by_group: dict = {}
    for i, t in enumerate(dataset.trajectories):
        by_group.setdefault(t.group, []).append(i)
    # systematic stratification: spread each group's members evenly over [0, 1)
    for g in dataset.groups:
        idx = np.asarray(by_group.get(g, []), dtype=np.int64)
        if len(idx) == 0:
            continue
        order = rng.permutation(len(idx))
        keys[idx[order]] = (np.arange(len(idx)) + rng.random()) / len(idx)
    ranked = np.lexsort((rng.random(n), keys))
    cut1 = int(round(fr[0] * n))
    cut2 = int(round((fr[0] + fr[1]) * n))
    parts = (ranked[:cut1], ranked[cut1:cut2], ranked[cut2:])
    return tuple(
        CohortDataset(tuple(dataset.trajectories[i] for i in sorted(part)), dataset.groups, tag)
        for part, tag in zip(parts, ("train", "val", "test"))
    )


def _mean_std(values):
    arr = np.asarray(values, dtype=float)
    if len(arr) == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def cohort_stats(dataset: CohortDataset) -> dict:
    """Per-group and overall descriptive statistics (population std)."""
    if len(dataset) == 0:
        raise EmptyInputError("cohort_stats needs a non-empty dataset")
    n = len(dataset)
    report = {}
    for label in tuple(dataset.groups) + ("All",):
        members = [t for t in dataset if label == "All" or t.group == label]
        deaths = sum(t.outcome == "dead" for t in members)
        age_m, age_s = _mean_std([t.age for t in members])
        len_m, len_s = _mean_std([t.length for t in members])
        report[label] = {
            "count": len(members),
            "pct": 100.0 * len(members) / n,
            "age_mean": age_m,
            "age_std": age_s,
            "vent_days_mean": len_m,
            "vent_days_std": len_s,
            "deaths": deaths,
            "death_rate_pct": 100.0 * deaths / len(members) if members else float("nan"),
        }
    return report
