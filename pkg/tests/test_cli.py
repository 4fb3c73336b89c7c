import csv
import json

import pytest

from ventalloc.cli import main, parse_grid, parse_rows
from ventalloc.errors import ConfigurationError
from ventalloc.qnet import load_model
from ventalloc.trajectory import load_cohort

FAST = ["--epochs", "1", "--gradient-steps", "2", "--horizon", "20", "--seeds", "2", "--val-seeds", "1"]


@pytest.fixture(scope="module")
def cohort_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cohort") / "cohort.csv"
    assert main(["generate", "--patients", "80", "--seed", "7", "-o", str(path)]) == 0
    return path


def test_generate_is_rerunnable(cohort_csv, tmp_path):
    again = tmp_path / "cohort.csv"
    assert main(["generate", "--patients", "80", "--seed", "7", "-o", str(again)]) == 0
    assert again.read_bytes() == cohort_csv.read_bytes()
    assert len(load_cohort(again)) == 80
    echoed = json.loads((tmp_path / "cohort.config.json").read_text())
    assert echoed["seed"] == 7 and echoed["cohort"]["n_patients"] == 80


def test_missing_seed_is_usage_error(tmp_path):
    assert main(["generate", "--patients", "10", "-o", str(tmp_path / "c.csv")]) == 2
    assert not (tmp_path / "c.csv").exists()


def test_group_props_accepted(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["generate", "--patients", "40", "--seed", "1", "--group-props", "0.041,0.147,0.108,0.638",
                 "-o", str(out)]) == 0
    assert main(["generate", "--patients", "40", "--seed", "1", "--group-props", "1,-1,0,0",
                 "-o", str(tmp_path / "bad.csv")]) == 2


def test_unknown_command_and_flag():
    assert main(["fly"]) == 2
    assert main(["generate", "--wings", "2"]) == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 5, "cohort": {"n_patients": 30}}))
    out = tmp_path / "a.csv"
    assert main(["generate", "--config", str(cfg), "-o", str(out)]) == 0
    echoed = json.loads((tmp_path / "a.config.json").read_text())
    assert echoed["seed"] == 5 and echoed["cohort"]["n_patients"] == 30
    out = tmp_path / "b.csv"
    assert main(["generate", "--config", str(cfg), "--patients", "12", "--seed", "6", "-o", str(out)]) == 0
    echoed = json.loads((tmp_path / "b.config.json").read_text())
    assert echoed["seed"] == 6 and echoed["cohort"]["n_patients"] == 12
    cfg.write_text(json.dumps({"seed": 5, "bogus": {}}))
    assert main(["generate", "--config", str(cfg), "-o", str(tmp_path / "c.csv")]) == 2
    assert main(["generate", "--config", str(tmp_path / "nope.json"), "-o", str(tmp_path / "d.csv")]) == 2


def test_simulate(cohort_csv, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--cohort", str(cohort_csv), "--capacity", "4", "--horizon", "15", "--seed", "2",
                 "--protocol", "sofa", "-o", str(out)]) == 0
    lines = (out / "episode.jsonl").read_text().splitlines()
    assert len(lines) == 16
    summary = json.loads((out / "summary.json").read_text())
    assert summary["protocol"] == "sofa" and summary["survivors"] + summary["deaths"] <= summary["admissions"]
    assert main(["simulate", "--cohort", str(cohort_csv), "--horizon", "5", "--seed", "2", "-o", str(out)]) == 2
    assert main(["simulate", "--cohort", str(tmp_path / "missing.csv"), "--capacity", "2", "--seed", "2",
                 "-o", str(out)]) == 2


@pytest.fixture(scope="module")
def trained(cohort_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["train", "--cohort", str(cohort_csv), "--capacity", "8", "--lambda", "1e3", "--mu", "-0.1",
            "--mode", "off-policy", "--seed", "3", "-o", str(out)] + FAST
    assert main(args) == 0
    return out, args


def test_train_outputs(trained):
    out, _ = trained
    model, params, meta = load_model(out / "model.json")
    assert meta["capacity"] == 8 and meta["lambda"] == 1e3 and meta["mu"] == -0.1 and meta["mode"] == "off_policy"
    assert (out / "loss.csv").read_text().startswith("step,loss\n")
    assert (out / "epochs.csv").exists()
    assert json.loads((out / "config.json").read_text())["reward"]["lam"] == 1e3


def test_train_is_deterministic(trained, tmp_path):
    out, args = trained
    again = tmp_path / "again"
    assert main(args[:-len(FAST) - 2] + ["-o", str(again)] + FAST) == 0
    for name in ("model.json", "loss.csv", "epochs.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_train_variants(cohort_csv, tmp_path):
    base = ["train", "--cohort", str(cohort_csv), "--seed", "3"] + FAST
    assert main(base + ["--capacity-pct", "50", "--mode", "offline", "--behavior", "mp", "-o", str(tmp_path / "a")]) == 0
    assert load_model(tmp_path / "a" / "model.json")[2]["behavior"] == "mp"
    assert main(base + ["--capacity", "4", "--lambda", "0", "-o", str(tmp_path / "b")]) == 0
    assert load_model(tmp_path / "b" / "model.json")[2]["lambda"] == 0.0
    assert main(base + ["-o", str(tmp_path / "c")]) == 2  # no capacity
    assert main(base + ["--capacity", "4", "--gamma", "1.5", "-o", str(tmp_path / "d")]) == 2


def test_evaluate_with_learned_model(cohort_csv, trained, tmp_path):
    out = tmp_path / "ev"
    model = trained[0] / "model.json"
    args = ["evaluate", "--cohort", str(cohort_csv), "--protocols", f"lottery,sofa,learned:{model}",
            "--capacities", "0:100:50", "--seeds", "2", "--horizon", "20", "--seed", "3", "-o", str(out)]
    assert main(args) == 0
    rows = list(csv.reader((out / "report.csv").open()))
    assert {r[0] for r in rows[1:]} == {"lottery", "sofa", f"learned:{model}"}
    assert {r[1] for r in rows[1:]} == {"0.0", "50.0", "100.0"}
    again = tmp_path / "ev2"
    assert main(args[:-1] + [str(again)]) == 0
    assert (again / "report.csv").read_bytes() == (out / "report.csv").read_bytes()


def test_evaluate_modes(cohort_csv, tmp_path):
    base = ["evaluate", "--cohort", str(cohort_csv), "--protocols", "mp", "--capacities", "50", "--seeds", "2",
            "--horizon", "20", "--seed", "3"]
    assert main(base + ["--reassessment", "-o", str(tmp_path / "r")]) == 0
    settings = json.loads((tmp_path / "r" / "report.json").read_text())["mp"]["settings"]
    assert settings["withdrawal_on"] is False
    assert main(base + ["--death-prob", "0.3", "-o", str(tmp_path / "p")]) == 0
    assert json.loads((tmp_path / "p" / "report.json").read_text())["mp"]["settings"]["death_prob"] == 0.3
    assert main(base + ["--death-prob", "1.3", "-o", str(tmp_path / "x")]) == 2
    assert main(base[:4] + ["coinflip"] + base[5:] + ["-o", str(tmp_path / "y")]) == 2
    assert main(base[:4] + ["learned:nowhere.json"] + base[5:] + ["-o", str(tmp_path / "z")]) == 2


def test_pareto(cohort_csv, tmp_path):
    args = ["pareto", "--cohort", str(cohort_csv), "--lambdas", "0,1e3", "--capacity-pct", "50", "--seed", "1",
            "-o", str(tmp_path / "a")] + FAST
    assert main(args) == 0
    rows = list(csv.reader((tmp_path / "a" / "pareto.csv").open()))
    assert [r[0] for r in rows[1:]] == ["0.0", "1000.0"]
    assert sum(int(r[-1]) for r in rows[1:]) == 1
    args[args.index("-o") + 1] = str(tmp_path / "b")
    assert main(args) == 0
    assert (tmp_path / "b" / "pareto.csv").read_bytes() == (tmp_path / "a" / "pareto.csv").read_bytes()
    assert main(["pareto", "--lambdas", "", "--seed", "1", "-o", str(tmp_path / "c")]) == 2


def test_compare_qnets(cohort_csv, tmp_path):
    out = tmp_path / "q"
    assert main(["compare-qnets", "--cohort", str(cohort_csv), "--rows", "6:4:1,20:4:2", "--seed", "1",
                 "-o", str(out)] + FAST) == 0
    rows = list(csv.reader((out / "compare_qnets.csv").open()))
    assert rows[0] == ["N", "C", "arrival_rate", "transformer_survival", "classical_survival"]
    assert 0 <= float(rows[1][3]) and 0 <= float(rows[1][4])
    assert 0 <= float(rows[2][3]) and rows[2][4].startswith("error") and "N=20" in rows[2][4]
    assert main(["compare-qnets", "--rows", "6:4", "--seed", "1", "-o", str(out)]) == 2


def test_parsers():
    assert parse_grid("0:100:10") == tuple(float(x) for x in range(0, 101, 10))
    assert parse_grid("25,50") == (25.0, 50.0)
    assert parse_rows("6:4:1,8:4:2") == [(6, 4, 1.0), (8, 4, 2.0)]
    for bad in ("10:0:5", "0:100:0", "a:b:c", ""):
        with pytest.raises(ConfigurationError):
            parse_grid(bad)


def test_runtime_error_exit_code(cohort_csv, tmp_path, monkeypatch):
    from ventalloc import cli
    from ventalloc.errors import NumericError

    def boom(*a, **k):
        raise NumericError("diverged")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--cohort", str(cohort_csv), "--capacity", "3", "--seed", "1", "-o", str(tmp_path)]
                + FAST) == 3
