"""Baseline triage protocols and the shared allocation interface.

Every protocol exposes ``act(state, capacity, withdrawal_on, rng)`` and returns
a feasible action. Ranking-based protocols build a :class:`PriorityRanking`
over the requesting (Normal) beds and hand it to :func:`allocate`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .mdp import NORMAL, SimState


@dataclass(frozen=True)
class PriorityRanking:
    """Requesting beds in priority order.

    ``keys[j]`` is the key tuple of ``beds[j]``; ``trace[j]`` names the rule
    that placed ``beds[j]`` ahead of ``beds[j + 1]``.
    """

    beds: np.ndarray
    keys: tuple
    trace: tuple
    rule_names: tuple

    def __len__(self):
        return len(self.beds)


def _rank(state: SimState, key_cols, names) -> PriorityRanking:
    """Lexicographic sort of the Normal beds; ``key_cols`` primary first."""
    beds = np.flatnonzero(state.status == NORMAL)
    cols = [np.asarray(c) for c in key_cols] + [beds]
    names = tuple(names) + ("bed_index",)
    if len(beds) == 0:
        return PriorityRanking(beds, (), (), names)
    order = np.lexsort(tuple(reversed(cols)))
    sorted_cols = [c[order] for c in cols]
    keys = tuple(tuple(c[j].item() for c in sorted_cols) for j in range(len(beds)))
    trace = []
    for j in range(len(beds) - 1):
        for name, a, b in zip(names, keys[j], keys[j + 1]):
            if a != b:
                trace.append(name)
                break
    return PriorityRanking(beds[order], keys, tuple(trace), names)


def _lottery_key(state: SimState, rng) -> np.ndarray:
    n = int(np.count_nonzero(state.status == NORMAL))
    if rng is None:
        return np.zeros(n, dtype=np.int64)
    return rng.permutation(n)


def _attrs(state: SimState):
    beds = np.flatnonzero(state.status == NORMAL)
    pid = state.patient[beds]
    return beds, pid, state.cohort


def rank_lottery(state: SimState, rng) -> PriorityRanking:
    return _rank(state, [_lottery_key(state, rng)], ["lottery"])


def rank_youngest(state: SimState, rng=None) -> PriorityRanking:
    """Ascending age; lottery among equal ages (bed index when ``rng`` is None)."""
    _, pid, c = _attrs(state)
    return _rank(state, [c.age[pid], _lottery_key(state, rng)], ["age", "lottery"])


def sofa_tier(sofa) -> np.ndarray:
    """0 high (0-7), 1 medium (8-11), 2 low (12+)."""
    s = np.asarray(sofa)
    return np.where(s <= 7, 0, np.where(s <= 11, 1, 2))


def rank_sofa(state: SimState, rng) -> PriorityRanking:
    beds = np.flatnonzero(state.status == NORMAL)
    tiers = sofa_tier(state.sofa()[beds])
    return _rank(state, [tiers, _lottery_key(state, rng)], ["sofa_tier", "lottery"])


def mp_points(sofa, severe) -> np.ndarray:
    s = np.asarray(sofa)
    band = np.select([s <= 8, s <= 11, s <= 14], [1, 2, 3], 4)
    return band + 3 * np.asarray(severe, dtype=np.int64)


def age_group(age) -> np.ndarray:
    """0: <50, 1: 50-69, 2: 70-84, 3: 85+."""
    return np.searchsorted(np.array([50, 70, 85]), np.asarray(age), side="right")


def rank_mp(state: SimState, rng) -> PriorityRanking:
    beds, pid, c = _attrs(state)
    pts = mp_points(state.sofa()[beds], c.comorbid[pid])
    return _rank(state, [pts, age_group(c.age[pid]), _lottery_key(state, rng)], ["points", "age_group", "lottery"])


@dataclass(frozen=True)
class DecisionTree:
    """Two-level tree: high priority iff all three thresholds hold."""

    sofa_max: int = 10
    age_below: float = 70
    bmi_below: float = 40

    def level(self, sofa, age, bmi) -> np.ndarray:
        high = (np.asarray(sofa) <= self.sofa_max) & (np.asarray(age) < self.age_below) & (
            np.asarray(bmi) < self.bmi_below
        )
        return np.where(high, 1, 2)


def rank_dt(state: SimState, tree: DecisionTree | None = None) -> PriorityRanking:
    tree = tree or DecisionTree()
    beds, pid, c = _attrs(state)
    lvl = tree.level(state.sofa()[beds], c.age[pid], c.bmi[pid])
    return _rank(state, [lvl, state.admit_day[beds]], ["level", "admit_day"])


def allocate(ranking: PriorityRanking, state: SimState, capacity: int, withdrawal_on: bool) -> np.ndarray:
    a = np.zeros(state.n_beds, dtype=np.uint8)
    slots = int(capacity)
    if withdrawal_on:
        locked = state.locked
        n_locked = int(locked.sum())
        if n_locked > capacity:
            raise ConfigurationError(f"{n_locked} committed ventilators exceed capacity {capacity}")
        a[locked] = 1
        slots -= n_locked
        order = [b for b in ranking.beds if not locked[b]]
    else:
        order = list(ranking.beds)
    if slots > 0:
        a[np.asarray(order[:slots], dtype=np.int64)] = 1
    return a


class Protocol:
    name = "protocol"

    def act(self, state: SimState, capacity: int, withdrawal_on: bool, rng) -> np.ndarray:
        raise NotImplementedError


class RankingProtocol(Protocol):
    def __init__(self, name, rank_fn):
        self.name = name
        self.rank_fn = rank_fn

    def rank(self, state, rng=None) -> PriorityRanking:
        return self.rank_fn(state, rng)

    def act(self, state, capacity, withdrawal_on, rng):
        return allocate(self.rank_fn(state, rng), state, capacity, withdrawal_on)


class OracleProtocol(Protocol):
    """Omniscient allocator: reads the recorded outcomes.

    Ventilates only patients who survive once ventilated, shortest remaining
    course first, which frees ventilators soonest.
    """

    name = "oracle"

    def act(self, state, capacity, withdrawal_on, rng):
        c = state.cohort
        beds = np.flatnonzero(state.status == NORMAL)
        pid = state.patient[beds]
        remaining = c.lengths[pid] - state.cursor[beds]
        savable = ~c.dead[pid]
        order = beds[np.lexsort((beds, remaining, ~savable))]
        a = allocate(PriorityRanking(order, (), (), ()), state, capacity, withdrawal_on)
        # never spend a free ventilator on a patient who dies regardless
        doomed = np.zeros(state.n_beds, dtype=bool)
        doomed[beds[~savable]] = True
        keep = state.locked if withdrawal_on else np.zeros(state.n_beds, dtype=bool)
        a[doomed & ~keep] = 0
        return a


_RANKERS = {
    "lottery": rank_lottery,
    "youngest": rank_youngest,
    "sofa": rank_sofa,
    "mp": rank_mp,
    "dt": lambda state, rng=None: rank_dt(state),
}

BASELINES = ("lottery", "youngest", "sofa", "mp", "dt")


def get_protocol(name: str, tree: DecisionTree | None = None) -> Protocol:
    """Resolve ``lottery | youngest | sofa | mp | dt | oracle | learned:<path>``."""
    if name.startswith("learned:"):
        from .qnet import LearnedProtocol, load_model

        path = name.split(":", 1)[1]
        model, params, _ = load_model(path)
        return LearnedProtocol(model, params, name=name)
    if name == "oracle":
        return OracleProtocol()
    if name == "dt" and tree is not None:
        return RankingProtocol("dt", lambda state, rng=None: rank_dt(state, tree))
    if name not in _RANKERS:
        raise ConfigurationError(f"unknown protocol {name!r}")
    return RankingProtocol(name, _RANKERS[name])
