"""Ward simulator replaying cohort trajectories under Poisson arrivals.

Three independent random streams are derived from the episode seed: arrivals
(count, patient draw, bed placement), denial deaths, and the allocation
policy. Keeping them apart means that two protocols which take identical
actions see identical wards, which is what makes the capacity anchors of the
evaluation exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, EmptyInputError
from .mdp import (
    NORMAL,
    VACANT,
    FairnessCounters,
    RewardParams,
    SimState,
    StepEvents,
    is_feasible,
    total_reward,
)
from .trajectory import CohortArrays, CohortDataset

REPLAY_CAPACITY = 16000

# ledger outcome codes
WAITING, SURVIVED_OUT, DEAD_VENT_OUT, DEAD_DENIED_OUT = 0, 1, 2, 3
OUTCOME_LABELS = {WAITING: "waiting", SURVIVED_OUT: "survived", DEAD_VENT_OUT: "dead_post_vent",
                  DEAD_DENIED_OUT: "dead_denied"}


@dataclass
class SimConfig:
    capacity: int
    arrival_rate: float = 12.0
    bed_count: int | None = None
    withdrawal_on: bool = True
    death_prob: float = 1.0
    fairness_tracking: bool = True
    horizon: int = 365
    seed: int = 0

    def __post_init__(self):
        if self.bed_count is None:
            self.bed_count = int(self.capacity + math.ceil(2 * self.arrival_rate))
        if self.capacity < 0:
            raise ConfigurationError("capacity must be >= 0")
        if not self.arrival_rate > 0:
            raise ConfigurationError("arrival_rate must be > 0")
        if self.bed_count < self.capacity:
            raise ConfigurationError("bed_count must be >= capacity")
        if not 0.0 <= self.death_prob <= 1.0:
            raise ConfigurationError("death_prob must lie in [0, 1]")
        if self.horizon < 0:
            raise ConfigurationError("horizon must be >= 0")


def poisson_inverse(rng: np.random.Generator, lam: float) -> int:
    """Poisson draw by inverse transform of a single uniform."""
    u = rng.random()
    k = 0
    p = math.exp(-lam)
    cdf = p
    while u > cdf and p > 0.0:
        k += 1
        p *= lam / k
        cdf += p
    if p == 0.0 and u > cdf:
        # exp(-lam) underflowed; fall back to the normal approximation
        return max(0, int(round(lam + math.sqrt(lam) * _norm_ppf(u))))
    return k


def _norm_ppf(u: float) -> float:
    from statistics import NormalDist

    return NormalDist().inv_cdf(min(max(u, 1e-12), 1 - 1e-12))


def pick_without_replacement(rng: np.random.Generator, candidates, k: int) -> np.ndarray:
    """Sequential uniform picks; consumes exactly ``k`` uniforms whatever the pool size."""
    pool = list(candidates)
    out = np.empty(k, dtype=np.int64)
    for j, u in enumerate(rng.random(k)):
        out[j] = pool.pop(int(u * len(pool)))
    return out


def _as_arrays(cohort) -> CohortArrays:
    if isinstance(cohort, CohortArrays):
        return cohort
    if isinstance(cohort, CohortDataset):
        if len(cohort) == 0:
            raise ConfigurationError("cohort is empty")
        return cohort.packed
    raise TypeError(f"expected a cohort, got {type(cohort).__name__}")


@dataclass
class TransitionTuple:
    s: SimState
    a: np.ndarray
    s_next: SimState
    r: float
    events: StepEvents


class Simulator:
    """Single-threaded ward simulator; owns the sampling pool and the ledger."""

    def __init__(self, config: SimConfig, cohort, reward_params: RewardParams | None = None):
        self.config = config
        self.cohort = _as_arrays(cohort)
        if self.cohort.n_patients == 0:
            raise ConfigurationError("cohort is empty")
        self.reward_params = reward_params or RewardParams()
        self.state: SimState | None = None

    # -- streams ------------------------------------------------------------
    def _seed_streams(self, seed):
        ss = np.random.SeedSequence(seed)
        arrival, death, policy = ss.spawn(3)
        self.arrival_rng = np.random.default_rng(arrival)
        self.death_rng = np.random.default_rng(death)
        self.policy_rng = np.random.default_rng(policy)

    # -- ledger -------------------------------------------------------------
    def _new_admissions(self, patients, day):
        start = len(self._led_patient)
        ids = np.arange(start, start + len(patients), dtype=np.int64)
        self._led_patient.extend(int(p) for p in patients)
        self._led_group.extend(int(self.cohort.group[p]) for p in patients)
        # every admitted patient occupies a Normal bed, i.e. requests a ventilator
        self._led_requested.extend([True] * len(patients))
        self._led_decided.extend([False] * len(patients))
        self._led_vent.extend([False] * len(patients))
        self._led_outcome.extend([WAITING] * len(patients))
        self._led_day.extend([day] * len(patients))
        return ids

    def ledger(self) -> dict:
        return {
            "patient": np.asarray(self._led_patient, dtype=np.int64),
            "group": np.asarray(self._led_group, dtype=np.int64),
            "requested": np.asarray(self._led_requested, dtype=bool),
            "decided": np.asarray(self._led_decided, dtype=bool),
            "ventilated": np.asarray(self._led_vent, dtype=bool),
            "outcome": np.asarray(self._led_outcome, dtype=np.int64),
            "admit_day": np.asarray(self._led_day, dtype=np.int64),
        }

    # -- core ---------------------------------------------------------------
    def reset(self, seed: int | None = None) -> SimState:
        cfg = self.config
        self._seed_streams(cfg.seed if seed is None else seed)
        self.in_use = np.zeros(self.cohort.n_patients, dtype=bool)
        self._led_patient, self._led_group, self._led_requested = [], [], []
        self._led_vent, self._led_outcome, self._led_day = [], [], []
        self._led_decided = []
        self.demand = []
        self.load = []
        state = SimState.empty(cfg.bed_count, self.cohort.n_groups, cohort=self.cohort)
        n = np.zeros(self.cohort.n_groups, dtype=np.int64)
        e = poisson_inverse(self.arrival_rng, cfg.arrival_rate)
        self.load.append(e)
        k = min(e, cfg.bed_count, self.cohort.n_patients)
        if k:
            patients = self.arrival_rng.choice(self.cohort.n_patients, size=k, replace=False)
            beds = pick_without_replacement(self.arrival_rng, range(cfg.bed_count), k)
            ids = self._new_admissions(patients, 0)
            self._place(state, patients, beds, ids, 0)
            np.add.at(n, self.cohort.group[patients], 1)
        state.counters = FairnessCounters(n, np.zeros_like(n))
        self.state = state
        return state

    def _place(self, state, patients, beds, ids, day):
        state.status[beds] = NORMAL
        state.patient[beds] = patients
        state.cursor[beds] = 0
        state.vent[beds] = 0
        state.ever[beds] = 0
        state.admission[beds] = ids
        state.admit_day[beds] = day
        self.in_use[patients] = True

    def step(self, state: SimState, action):
        """Apply ``action`` to ``state``; returns ``(next_state, reward, events)``."""
        cfg = self.config
        a = np.ascontiguousarray(action, dtype=np.uint8)
        if not is_feasible(state, a, cfg.capacity, cfg.withdrawal_on):
            raise ContractError("infeasible action")
        nxt = state.copy()
        occupied = nxt.patient >= 0
        lengths = np.where(occupied, self.cohort.lengths[np.where(occupied, nxt.patient, 0)], 0)
        dead = np.where(occupied, self.cohort.dead[np.where(occupied, nxt.patient, 0)], False).astype(np.uint8)
        p = cfg.death_prob
        death_u = self.death_rng.random(cfg.bed_count) if 0.0 < p < 1.0 else None

        deciding = state.status == NORMAL
        self.demand.append(int(np.count_nonzero(deciding)))
        for adm in state.admission[deciding]:
            self._led_decided[adm] = True

        ev, first = kernels.advance_beds(nxt.status, nxt.cursor, nxt.vent, nxt.ever, lengths, dead, a, death_u, p)

        n = state.counters.n.copy()
        m = state.counters.m.copy()
        first_beds = np.flatnonzero(first)
        if len(first_beds):
            np.add.at(m, self.cohort.group[nxt.patient[first_beds]], 1)
            for adm in nxt.admission[first_beds]:
                self._led_vent[adm] = True

        survived = nxt.admission[ev == kernels.EV_SURVIVED]
        dead_vent = nxt.admission[ev == kernels.EV_DEAD_VENT]
        dead_denied = [nxt.admission[ev == kernels.EV_DEAD_DENIED]]
        for adm in survived:
            self._led_outcome[adm] = SURVIVED_OUT
        for adm in dead_vent:
            self._led_outcome[adm] = DEAD_VENT_OUT
        for adm in dead_denied[0]:
            self._led_outcome[adm] = DEAD_DENIED_OUT

        cleared = ev == kernels.EV_CLEARED
        if cleared.any():
            self.in_use[nxt.patient[cleared]] = False
            nxt.patient[cleared] = -1
            nxt.admission[cleared] = -1
            nxt.cursor[cleared] = 0

        # arrivals
        day = state.day + 1
        new_ids = np.zeros(0, dtype=np.int64)
        e = poisson_inverse(self.arrival_rng, cfg.arrival_rate)
        # beds needed to seat every arrival without overflow
        self.load.append(int(np.count_nonzero(nxt.status != VACANT)) + e)
        if e:
            pool = np.flatnonzero(~self.in_use)
            k = min(e, len(pool))
            if k:
                patients = self.arrival_rng.choice(pool, size=k, replace=False)
                vacant = np.flatnonzero(nxt.status == VACANT)
                n_place = min(k, len(vacant))
                placed = patients[:n_place]
                if n_place:
                    beds = pick_without_replacement(self.arrival_rng, vacant, n_place)
                    ids = self._new_admissions(placed, day)
                    self._place(nxt, placed, beds, ids, day)
                    np.add.at(n, self.cohort.group[placed], 1)
                    new_ids = ids
                overflow = patients[n_place:]
                if len(overflow):
                    # no free bed: treated as a denied request
                    if p >= 1.0:
                        dies = np.ones(len(overflow), dtype=bool)
                    elif p <= 0.0:
                        dies = np.zeros(len(overflow), dtype=bool)
                    else:
                        dies = self.death_rng.random(len(overflow)) < p
                    lost = overflow[dies]
                    if len(lost):
                        ids = self._new_admissions(lost, day)
                        for adm in ids:
                            self._led_decided[adm] = True
                            self._led_outcome[adm] = DEAD_DENIED_OUT
                        np.add.at(n, self.cohort.group[lost], 1)
                        new_ids = np.concatenate([new_ids, ids])
                        dead_denied.append(ids)

        nxt.counters = FairnessCounters(n, m)
        nxt.day = day
        events = StepEvents(
            survived=survived.copy(),
            dead_post_vent=dead_vent.copy(),
            dead_denied=np.concatenate(dead_denied).astype(np.int64),
            admissions=new_ids,
        )
        params = self.reward_params
        if not cfg.fairness_tracking and params.enable_fairness:
            params = RewardParams(params.mu, params.lam, params.enable_terminal, params.enable_cost, False,
                                  params.kl_epsilon)
        r = total_reward(events, a, nxt.counters, params)
        self.state = nxt
        return nxt, r, events


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeLog:
    transitions: list
    ledger: dict
    demand: list
    load: list
    groups: tuple
    capacity: int
    seed: int
    rewards: list = field(default_factory=list)

    @property
    def admissions(self) -> int:
        return len(self.ledger["outcome"])

    def count(self, code: int) -> int:
        return int(np.sum(self.ledger["outcome"] == code))

    @property
    def survivors(self) -> int:
        return self.count(SURVIVED_OUT)

    @property
    def deaths(self) -> int:
        return self.count(DEAD_VENT_OUT) + self.count(DEAD_DENIED_OUT)

    @property
    def max_demand(self) -> int:
        return max(self.demand) if self.demand else 0

    def group_counts(self) -> dict:
        """Per-group (requested, allocated) counts.

        Only admissions that faced at least one allocation decision count as
        requests; a patient admitted on the last simulated day has not been
        refused anything yet.
        """
        req = self.ledger["decided"]
        out = {}
        for gi, name in enumerate(self.groups):
            sel = req & (self.ledger["group"] == gi)
            out[name] = (int(sel.sum()), int((sel & self.ledger["ventilated"]).sum()))
        return out

    def to_jsonl(self, path, patient_ids=None) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.transitions:
                bits = sum(1 << int(i) for i in np.flatnonzero(t.a))
                rec = {"day": int(t.s.day), "action": format(bits, "x"), "reward": float(t.r), "events": t.events.counts()}
                fh.write(json.dumps(rec) + "\n")
            rows = []
            for i in range(self.admissions):
                pid = int(self.ledger["patient"][i])
                rows.append({
                    "admission": i,
                    "patient": patient_ids[pid] if patient_ids is not None else pid,
                    "group": self.groups[int(self.ledger["group"][i])],
                    "requested": bool(self.ledger["requested"][i]),
                    "decided": bool(self.ledger["decided"][i]),
                    "ventilated": bool(self.ledger["ventilated"][i]),
                    "outcome": OUTCOME_LABELS[int(self.ledger["outcome"][i])],
                })
            fh.write(json.dumps({"ledger": rows, "capacity": self.capacity, "seed": self.seed}) + "\n")
        return path


def run_episode(protocol, config: SimConfig, cohort, horizon: int | None = None, seed: int | None = None,
                reward_params: RewardParams | None = None, record: bool = True) -> EpisodeLog:
    """Reset, then roll ``horizon`` steps under ``protocol``."""
    sim = Simulator(config, cohort, reward_params)
    seed = config.seed if seed is None else seed
    horizon = config.horizon if horizon is None else horizon
    state = sim.reset(seed)
    transitions, rewards = [], []
    for _ in range(horizon):
        a = protocol.act(state, config.capacity, config.withdrawal_on, sim.policy_rng)
        nxt, r, ev = sim.step(state, a)
        if record:
            transitions.append(TransitionTuple(state, a, nxt, r, ev))
        rewards.append(r)
        state = nxt
    groups = cohort.groups if isinstance(cohort, CohortDataset) else tuple(range(sim.cohort.n_groups))
    return EpisodeLog(transitions, sim.ledger(), sim.demand, sim.load, tuple(groups), config.capacity, seed, rewards)


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """Ring buffer of compact transitions (ward arrays, not token matrices)."""

    def __init__(self, n_beds: int, n_groups: int, capacity: int = REPLAY_CAPACITY):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be >= 1")
        self.capacity = capacity
        self.n_beds = n_beds
        self.n_groups = n_groups
        self.size = 0
        self.head = 0
        self.added = 0
        shape = (capacity, n_beds)
        self.arrays = {}
        for prefix in ("s", "s2"):
            self.arrays[f"{prefix}_status"] = np.zeros(shape, dtype=np.int8)
            self.arrays[f"{prefix}_patient"] = np.zeros(shape, dtype=np.int64)
            self.arrays[f"{prefix}_cursor"] = np.zeros(shape, dtype=np.int64)
            self.arrays[f"{prefix}_vent"] = np.zeros(shape, dtype=np.uint8)
            self.arrays[f"{prefix}_counters"] = np.zeros((capacity, 2 * n_groups), dtype=np.int64)
        self.arrays["action"] = np.zeros(shape, dtype=np.uint8)
        self.arrays["reward"] = np.zeros(capacity, dtype=np.float64)
        self.arrays["events"] = np.zeros((capacity, 4), dtype=np.int64)
        self.arrays["seq"] = np.zeros(capacity, dtype=np.int64)

    def __len__(self):
        return self.size

    def add(self, s: SimState, a, s2: SimState, r: float, events: StepEvents) -> None:
        i = self.head
        A = self.arrays
        for prefix, st in (("s", s), ("s2", s2)):
            A[f"{prefix}_status"][i] = st.status
            A[f"{prefix}_patient"][i] = st.patient
            A[f"{prefix}_cursor"][i] = st.cursor
            A[f"{prefix}_vent"][i] = st.vent
            A[f"{prefix}_counters"][i, : self.n_groups] = st.counters.n
            A[f"{prefix}_counters"][i, self.n_groups:] = st.counters.m
        A["action"][i] = a
        A["reward"][i] = r
        c = events.counts()
        A["events"][i] = (c["survived"], c["dead_post_vent"], c["dead_denied"], c["admissions"])
        A["seq"][i] = self.added
        self.added += 1
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.head) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise EmptyInputError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def batch(self, idx) -> dict:
        return {name: arr[idx] for name, arr in self.arrays.items()}

    def state_at(self, i: int, cohort: CohortArrays, which: str = "s") -> SimState:
        """Rebuild a SimState snapshot (without ledger-only fields) from slot ``i``."""
        A = self.arrays
        st = SimState.empty(self.n_beds, self.n_groups, cohort=cohort)
        st.status[:] = A[f"{which}_status"][i]
        st.patient[:] = A[f"{which}_patient"][i]
        st.cursor[:] = A[f"{which}_cursor"][i]
        st.vent[:] = A[f"{which}_vent"][i]
        c = A[f"{which}_counters"][i]
        st.counters = FairnessCounters(c[: self.n_groups], c[self.n_groups:])
        return st


def fill_replay(behavior, config: SimConfig, cohort, steps: int, buffer: ReplayBuffer | None = None,
                sim: Simulator | None = None, reward_params: RewardParams | None = None,
                seed: int | None = None, explore=None) -> tuple:
    """Roll ``steps`` transitions under ``behavior`` into a ring buffer.

    Passing an existing ``sim`` continues its current ward (off-policy
    training refreshes the buffer this way each epoch); otherwise a fresh
    simulator is reset with ``seed``. ``explore(state, action, rng)`` may
    perturb the behavior action (it must stay feasible). Returns ``(buffer,
    sim)``.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if sim is None:
        sim = Simulator(config, cohort, reward_params)
        sim.reset(config.seed if seed is None else seed)
    if buffer is None:
        buffer = ReplayBuffer(config.bed_count, sim.cohort.n_groups)
    state = sim.state
    for _ in range(steps):
        a = behavior.act(state, config.capacity, config.withdrawal_on, sim.policy_rng)
        if explore is not None:
            a = explore(state, a, sim.policy_rng)
        nxt, r, ev = sim.step(state, a)
        buffer.add(state, a, nxt, r, ev)
        state = nxt
    return buffer, sim
