"""State, action feasibility, per-bed clinical transitions and rewards.

Bed conditions are integer codes so that a whole ward can be held in a few
small numpy arrays. Actions are plain length-N 0/1 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ContractError, ShapeError

VACANT, NORMAL, SURVIVED, DEAD = 0, 1, 2, 3
CONDITION_NAMES = {VACANT: "Vacant", NORMAL: "Normal", SURVIVED: "Survived", DEAD: "Dead"}


@dataclass(frozen=True)
class Occupant:
    patient: int  # index into the cohort
    cursor: int  # current day within the trajectory
    length: int
    dead_outcome: bool
    admission: int = -1


@dataclass(frozen=True)
class BedState:
    condition: int
    ventilated: bool = False
    occupant: Optional[Occupant] = None

    def __post_init__(self):
        if self.condition == VACANT and (self.ventilated or self.occupant is not None):
            raise ContractError("a vacant bed cannot be ventilated or occupied")
        if self.condition in (NORMAL, SURVIVED, DEAD) and self.occupant is None:
            raise ContractError(f"{CONDITION_NAMES[self.condition]} bed needs an occupant")


@dataclass(frozen=True)
class FairnessCounters:
    """Cumulative per-group arrivals ``n`` and first-time ventilations ``m``."""

    n: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.int64)
        m = np.asarray(self.m, dtype=np.int64)
        if n.shape != m.shape or n.ndim != 1:
            raise ShapeError("n and m must be 1-D arrays of equal length")
        if np.any(m < 0) or np.any(m > n):
            raise ContractError("counters must satisfy 0 <= m_g <= n_g")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)

    @classmethod
    def zeros(cls, n_groups: int) -> "FairnessCounters":
        return cls(np.zeros(n_groups, dtype=np.int64), np.zeros(n_groups, dtype=np.int64))

    def features(self) -> np.ndarray:
        """The 8 (2G) counters scaled by their total; zeros before any arrival."""
        both = np.concatenate([self.n, self.m]).astype(np.float64)
        total = both.sum()
        return both / total if total > 0 else both


@dataclass(eq=False)
class SimState:
    """Ward snapshot. Arrays are length N (beds); ``cohort`` is shared, not copied."""

    status: np.ndarray  # int8 condition codes
    patient: np.ndarray  # int64 cohort index, -1 when vacant
    cursor: np.ndarray  # int64 trajectory day
    vent: np.ndarray  # uint8, I_i: ventilated on the previous day
    ever: np.ndarray  # uint8, ventilated at least once during this admission
    admission: np.ndarray  # int64 admission id, -1 when vacant
    admit_day: np.ndarray  # int64
    counters: FairnessCounters
    day: int = 0
    cohort: object = field(default=None, repr=False, compare=False)

    @property
    def n_beds(self) -> int:
        return len(self.status)

    @classmethod
    def empty(cls, n_beds: int, n_groups: int, cohort=None) -> "SimState":
        return cls(
            status=np.zeros(n_beds, dtype=np.int8),
            patient=np.full(n_beds, -1, dtype=np.int64),
            cursor=np.zeros(n_beds, dtype=np.int64),
            vent=np.zeros(n_beds, dtype=np.uint8),
            ever=np.zeros(n_beds, dtype=np.uint8),
            admission=np.full(n_beds, -1, dtype=np.int64),
            admit_day=np.zeros(n_beds, dtype=np.int64),
            counters=FairnessCounters.zeros(n_groups),
            day=0,
            cohort=cohort,
        )

    def copy(self) -> "SimState":
        return replace(
            self,
            status=self.status.copy(),
            patient=self.patient.copy(),
            cursor=self.cursor.copy(),
            vent=self.vent.copy(),
            ever=self.ever.copy(),
            admission=self.admission.copy(),
            admit_day=self.admit_day.copy(),
        )

    def __eq__(self, other):
        if not isinstance(other, SimState):
            return NotImplemented
        arrays = ("status", "patient", "cursor", "vent", "ever", "admission", "admit_day")
        return (
            self.day == other.day
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in arrays)
            and np.array_equal(self.counters.n, other.counters.n)
            and np.array_equal(self.counters.m, other.counters.m)
        )

    @property
    def normal(self) -> np.ndarray:
        return self.status == NORMAL

    @property
    def locked(self) -> np.ndarray:
        """Normal beds holding a ventilator from the previous day."""
        return (self.status == NORMAL) & (self.vent == 1)

    def bed(self, i: int) -> BedState:
        cond = int(self.status[i])
        if cond == VACANT:
            return BedState(VACANT)
        p = int(self.patient[i])
        length = int(self.cohort.lengths[p]) if self.cohort is not None else -1
        dead = bool(self.cohort.dead[p]) if self.cohort is not None else False
        occ = Occupant(p, int(self.cursor[i]), length, dead, int(self.admission[i]))
        return BedState(cond, bool(self.vent[i]), occ)

    def condition_vector(self, i: int) -> np.ndarray:
        """x_i with the special encodings Vacant=0, Survived=1, Dead=-1."""
        k = self.cohort.k
        cond = self.status[i]
        if cond == NORMAL:
            return self.cohort.features[self.cohort.offsets[self.patient[i]] + self.cursor[i]].copy()
        fill = {VACANT: 0.0, SURVIVED: 1.0, DEAD: -1.0}[int(cond)]
        return np.full(k, fill)

    def sofa(self) -> np.ndarray:
        """Current SOFA of every bed (0 where not Normal)."""
        out = np.zeros(self.n_beds, dtype=np.int64)
        nm = self.normal
        if nm.any():
            rows = self.cohort.offsets[self.patient[nm]] + self.cursor[nm]
            out[nm] = self.cohort.sofa[rows]
        return out


@dataclass
class RewardParams:
    mu: float = -0.1
    lam: float = 1e3
    enable_terminal: bool = True
    enable_cost: bool = True
    enable_fairness: bool = True
    kl_epsilon: float = 1e-6

    def __post_init__(self):
        if not self.kl_epsilon > 0:
            raise ConfigurationError("kl_epsilon must be positive")


@dataclass
class StepEvents:
    """Admission ids involved in each event type during one transition."""

    survived: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dead_post_vent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dead_denied: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    admissions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_survived(self) -> int:
        return len(self.survived)

    @property
    def n_dead(self) -> int:
        return len(self.dead_post_vent) + len(self.dead_denied)

    def counts(self) -> dict:
        return {
            "survived": len(self.survived),
            "dead_post_vent": len(self.dead_post_vent),
            "dead_denied": len(self.dead_denied),
            "admissions": len(self.admissions),
        }


def is_feasible(state: SimState, action, capacity: int, withdrawal_on: bool) -> bool:
    a = np.asarray(action)
    if a.shape != (state.n_beds,):
        raise ShapeError(f"action has shape {a.shape}, expected ({state.n_beds},)")
    a = a.astype(bool)
    if a.sum() > capacity:
        return False
    if np.any(a & (state.status != NORMAL)):
        return False
    if withdrawal_on and np.any(state.locked & ~a):
        return False
    return True


def apply_clinical_transition(bed: BedState, a_i: int, death_prob: float = 1.0, rng=None, u=None) -> BedState:
    """One day of a Normal bed under ventilation decision ``a_i``.

    Ventilated patients advance one day along their own trajectory and end
    Survived/Dead on the final day. Unventilated patients die with probability
    ``death_prob``; otherwise they wait with the trajectory frozen. ``u`` (a
    uniform draw) overrides ``rng`` when given.
    """
    if bed.condition != NORMAL:
        raise ContractError("clinical transition applies to Normal beds only")
    occ = bed.occupant
    if a_i:
        nxt = occ.cursor + 1
        if nxt >= occ.length:
            return BedState(DEAD if occ.dead_outcome else SURVIVED, True, replace(occ, cursor=occ.length - 1))
        return BedState(NORMAL, True, replace(occ, cursor=nxt))
    if death_prob >= 1.0:
        dies = True
    elif death_prob <= 0.0:
        dies = False
    else:
        if u is None:
            u = (rng if rng is not None else np.random.default_rng()).random()
        dies = u < death_prob
    if dies:
        return BedState(DEAD, False, occ)
    return BedState(NORMAL, False, occ)


def terminal_reward(events: StepEvents) -> float:
    return float(events.n_survived - events.n_dead)


def ventilation_cost(action) -> float:
    return float(np.asarray(action).astype(bool).sum())


def fairness_penalty(counters: FairnessCounters, eps: float = 1e-6) -> float:
    """KL(D_n || D_m) of the smoothed arrival and ventilation distributions."""
    n = counters.n.astype(np.float64)
    m = counters.m.astype(np.float64)
    if n.sum() == 0 or m.sum() == 0:
        return 0.0
    p = (n + eps) / (n + eps).sum()
    q = (m + eps) / (m + eps).sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def total_reward(events: StepEvents, action, counters: FairnessCounters, params: RewardParams) -> float:
    r = 0.0
    if params.enable_terminal:
        r += terminal_reward(events)
    if params.enable_cost:
        r += params.mu * ventilation_cost(action)
    if params.enable_fairness and params.lam != 0.0:
        r -= params.lam * fairness_penalty(counters, params.kl_epsilon)
    return r
