import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ventalloc.errors import ConfigurationError, EmptyInputError, ParseError
from ventalloc.trajectory import (
    MAX_LENGTH,
    N_FEATURES,
    SOURCE_GROUP_SHARES,
    ClinicalTrajectory,
    CohortDataset,
    SyntheticCohortConfig,
    cohort_stats,
    csv_header,
    generate_cohort,
    load_cohort,
    manifest_path,
    normalize_proportions,
    split_cohort,
    write_cohort,
)


def make_traj(pid, length, group="White", age=50, outcome="survived"):
    return ClinicalTrajectory(
        patient_id=pid,
        group=group,
        age=age,
        bmi=27.5,
        sofa_total=np.full(length, 6),
        severe_comorbidity=False,
        conditions=np.full((length, N_FEATURES), 0.25),
        outcome=outcome,
    )


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(SyntheticCohortConfig(n_patients=300, seed=7))


def test_zero_patients_rejected():
    with pytest.raises(ConfigurationError):
        generate_cohort(SyntheticCohortConfig(n_patients=0))


def test_non_simplex_rejected():
    with pytest.raises(ConfigurationError):
        generate_cohort(SyntheticCohortConfig(group_proportions=SOURCE_GROUP_SHARES))


def test_group_counts_follow_proportions():
    ds = generate_cohort(SyntheticCohortConfig(n_patients=1000, seed=7))
    props = np.asarray(normalize_proportions(SOURCE_GROUP_SHARES))
    counts = np.array([ds.group_counts[g] for g in ds.groups])
    sd = np.sqrt(1000 * props * (1 - props))
    assert np.all(np.abs(counts - 1000 * props) < 4 * sd)
    assert sum(ds.group_counts.values()) == len(ds)


def test_generator_is_deterministic():
    cfg = SyntheticCohortConfig(n_patients=50, seed=3)
    assert generate_cohort(cfg) == generate_cohort(cfg)
    assert generate_cohort(cfg) != generate_cohort(SyntheticCohortConfig(n_patients=50, seed=4))


def test_zero_mortality_means_all_survive():
    ds = generate_cohort(SyntheticCohortConfig(n_patients=200, base_mortality=(0, 0, 0, 0), seed=1))
    assert all(t.outcome == "survived" for t in ds)


def test_generated_invariants(cohort):
    for t in cohort:
        assert 1 <= t.length <= MAX_LENGTH
        assert 18 <= t.age <= 95
        assert t.conditions.shape == (t.length, N_FEATURES)
        assert t.conditions.min() >= 0.0 and t.conditions.max() <= 1.0
        assert np.all((t.sofa_total >= 0) & (t.sofa_total <= 24))


def test_severity_tracks_outcome(cohort):
    last = {o: [t.sofa_total[-1] for t in cohort if t.outcome == o] for o in ("survived", "dead")}
    assert np.mean(last["dead"]) > np.mean(last["survived"]) + 5


def test_trajectory_invariants_enforced():
    with pytest.raises(ConfigurationError):
        make_traj("a", 3, age=17)
    with pytest.raises(ConfigurationError):
        make_traj("a", 31)
    bad = make_traj("a", 2)
    with pytest.raises(ConfigurationError):
        ClinicalTrajectory("b", "White", 40, 20.0, np.array([1, 2, 3]), False, bad.conditions, "dead")


def test_duplicate_ids_rejected():
    with pytest.raises(ConfigurationError):
        CohortDataset((make_traj("a", 2), make_traj("a", 3)))


def test_round_trip_is_exact(cohort, tmp_path):
    path = tmp_path / "cohort.csv"
    write_cohort(cohort, path)
    assert load_cohort(path) == cohort


def test_round_trip_with_scaled_bounds(tmp_path):
    ds = CohortDataset((make_traj("a", 3), make_traj("b", 5, outcome="dead")))
    path = tmp_path / "c.csv"
    write_cohort(ds, path, feature_min=np.zeros(N_FEATURES), feature_max=np.full(N_FEATURES, 4.0))
    back = load_cohort(path)
    assert [t.length for t in back] == [3, 5]
    assert np.allclose(back.trajectories[0].conditions, 0.25)


def test_csv_layout(tmp_path):
    ds = CohortDataset((make_traj("a", 3), make_traj("b", 5)))
    path = tmp_path / "c.csv"
    write_cohort(ds, path)
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    rows = list(csv.reader(path.open()))
    assert rows[0] == csv_header()
    assert rows[0][:7] == ["patient_id", "day", "group", "age", "bmi", "severe_comorbidity", "sofa_total"]
    outcomes = [r[-1] for r in rows[1:]]
    assert outcomes == ["", "", "survived", "", "", "", "", "survived"]
    meta = json.loads(manifest_path(path).read_text())
    assert len(meta["min"]) == N_FEATURES


def _rewrite(path, edit):
    rows = list(csv.reader(path.open()))
    edit(rows)
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def test_non_monotone_day_names_row(tmp_path):
    ds = CohortDataset((make_traj("a", 3),))
    path = tmp_path / "c.csv"
    write_cohort(ds, path)

    def edit(rows):
        rows[3][1] = "2"

    _rewrite(path, edit)
    with pytest.raises(ParseError, match="non-monotone day") as exc:
        load_cohort(path)
    assert exc.value.row == 4 and exc.value.column == "day"


def test_out_of_range_value_names_column(tmp_path):
    ds = CohortDataset((make_traj("a", 2),))
    path = tmp_path / "c.csv"
    write_cohort(ds, path)

    def edit(rows):
        rows[1][9] = "1.5"

    _rewrite(path, edit)
    with pytest.raises(ParseError) as exc:
        load_cohort(path)
    assert exc.value.column == "f3" and exc.value.row == 2


def test_missing_column(tmp_path):
    ds = CohortDataset((make_traj("a", 2),))
    path = tmp_path / "c.csv"
    write_cohort(ds, path)

    def edit(rows):
        for r in rows:
            del r[6]

    _rewrite(path, edit)
    with pytest.raises(ParseError, match="missing columns"):
        load_cohort(path)


def test_missing_manifest(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text(",".join(csv_header()) + "\n")
    with pytest.raises(ParseError):
        load_cohort(path)


def test_split_degenerate(cohort):
    train, val, test = split_cohort(cohort, (1, 0, 0), seed=0)
    assert train == CohortDataset(cohort.trajectories, cohort.groups, "train")
    assert len(val) == 0 and len(test) == 0


def test_split_sizes_and_determinism():
    ds = generate_cohort(SyntheticCohortConfig(n_patients=1000, seed=2))
    parts = split_cohort(ds, (0.5, 0.1, 0.4), seed=5)
    assert [len(p) for p in parts] == pytest.approx([500, 100, 400], abs=1)
    again = split_cohort(ds, (0.5, 0.1, 0.4), seed=5)
    assert all(a == b for a, b in zip(parts, again))
    white = [p.group_counts["White"] / len(p) for p in parts]
    assert max(white) - min(white) < 0.03


def test_split_rejects_bad_fractions(cohort):
    with pytest.raises(ConfigurationError):
        split_cohort(cohort, (0.5, 0.5, 0.1), seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000), st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10)))
def test_split_is_partition(n, seed, weights):
    if sum(weights) == 0:
        weights = (1, 0, 0)
    fr = np.asarray(weights, dtype=float) / sum(weights)
    fr[2] = 1.0 - fr[0] - fr[1]
    ds = generate_cohort(SyntheticCohortConfig(n_patients=n, seed=seed % 97))
    parts = split_cohort(ds, tuple(fr), seed=seed)
    ids = [t.patient_id for p in parts for t in p]
    assert sorted(ids) == sorted(t.patient_id for t in ds)


def test_stats_single_patient():
    ds = CohortDataset((make_traj("a", 5, age=50),))
    s = cohort_stats(ds)["All"]
    assert (s["count"], s["age_mean"], s["age_std"], s["vent_days_mean"]) == (1, 50, 0, 5)


def test_stats_all_dead():
    ds = CohortDataset((make_traj("a", 2, outcome="dead"), make_traj("b", 3, outcome="dead")))
    assert cohort_stats(ds)["All"]["death_rate_pct"] == 100.0


def test_stats_death_rate_matches_config():
    cfg = SyntheticCohortConfig(n_patients=2000, seed=11)
    ds = generate_cohort(cfg)
    blend = float(np.dot(cfg.group_proportions, cfg.base_mortality))
    rate = cohort_stats(ds)["All"]["death_rate_pct"] / 100
    assert abs(rate - blend) < 4 * np.sqrt(blend * (1 - blend) / 2000)


def test_stats_empty():
    with pytest.raises(EmptyInputError):
        cohort_stats(CohortDataset(()))
