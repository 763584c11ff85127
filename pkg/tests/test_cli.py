from __future__ import annotations

import csv
import json
import math

import pytest

from wienerlab import cli
from wienerlab.checks import Check, recompute, within
from wienerlab.errors import InvalidArgument


def run_main(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out.strip(), err


def read_record(path):
    return json.loads(open(path).read())


def test_lhs_zero(tmp_path, capsys):
    code, out, _ = run_main(["lhs", "--functional", "zero", "--n", "100", "--out", str(tmp_path)], capsys)
    assert code == 0
    rec = read_record(out)
    assert rec["results"]["lhs"]["value"] == 0.0
    assert rec["passed"] and rec["schema"] == cli.RECORD_SCHEMA


def test_gap_linear_constant(tmp_path, capsys):
    argv = ["gap", "--functional", "linear:a=1", "--policy", "constant:1", "--n", "1e6", "--seed", "7",
            "--steps", "10", "--out", str(tmp_path)]
    code, out, _ = run_main(argv, capsys)
    assert code == 0
    gap = read_record(out)["results"]["gap"]
    assert abs(gap["gap"]) <= 3 * gap["gap_se"]


def test_record_pass_fail_is_recomputable(tmp_path, capsys):
    for argv in (["gap", "--functional", "quadratic", "--policy", "ou:1", "--n", "2000", "--steps", "20"],
                 ["ou-ehc", "--set", "field=\"linear:a=1\""],
                 ["lsi"]):
        code, out, _ = run_main(argv + ["--out", str(tmp_path)], capsys)
        rec = read_record(out)
        assert rec["checks"]
        assert recompute(rec["checks"]) == rec["passed"]
        assert code == (0 if rec["passed"] else 1)


def test_rerun_is_bitwise_and_thread_independent(tmp_path, capsys):
    argv = ["rhs", "--functional", "two_mark", "--policy", "ou:0.5", "--n", "20000", "--seed", "3",
            "--steps", "20", "--out", str(tmp_path)]
    _, first, _ = run_main(argv, capsys)
    _, second, _ = run_main(["rerun", first, "--threads", "4", "--out", str(tmp_path)], capsys)
    _, third, _ = run_main(["rhs", "--config", first, "--out", str(tmp_path)], capsys)
    a, b, c = (read_record(p) for p in (first, second, third))
    assert a["results"] == b["results"] == c["results"]
    assert a["config_hash"] == b["config_hash"]
    assert b["config"]["threads"] == 4


def test_defaults_recorded_and_counts_parsed():
    cfg = cli.resolve_config("lhs", {"n": "1e3"})
    assert cfg["n"] == 1000 and set(cli.DEFAULTS["lhs"]) == set(cfg)
    with pytest.raises(InvalidArgument):
        cli.resolve_config("lhs", {"bogus": 1})
    with pytest.raises(InvalidArgument):
        cli.resolve_config("lhs", {"n": 2.5})
    with pytest.raises(InvalidArgument):
        cli.resolve_config("nope")
    assert cli.config_hash("lhs", {**cfg, "threads": 8}) == cli.config_hash("lhs", cfg)


@pytest.mark.parametrize("argv", [
    ["lhs", "--functional", "nope"],
    ["gap", "--policy", "martian"],
    ["lhs", "--set", "nokey=1"],
    ["lhs", "--set", "novalue"],
    ["rerun", "/nonexistent/record.json"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    code, _, err = run_main(argv + ["--out", str(tmp_path)], capsys)
    assert code == 2 and "error" in err


def test_module_error_recorded(tmp_path, capsys):
    code, out, err = run_main(["ou-ehc", "--set", "field=\"exp\"", "--out", str(tmp_path)], capsys)
    assert code == 3
    rec = read_record(out)
    assert rec["error"].startswith("NumericFailure") and not rec["passed"]


def test_sweep_csv(tmp_path, capsys):
    code, out, _ = run_main(["truncation-sweep", "--out", str(tmp_path)], capsys)
    assert code == 0
    rec = read_record(out)
    assert rec["artifacts"] == ["sweep.csv"]
    with open(tmp_path / out.split("/")[-2] / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["upper", "lower", "lhs", "lhs_se", "rhs", "rhs_se"]
    assert len(rows) == 1 + len(cli.DEFAULTS["truncation-sweep"]["levels"])


def test_out_env_and_unique_dirs(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    _, a, _ = run_main(["lhs", "--functional", "zero", "--n", "10"], capsys)
    _, b, _ = run_main(["lhs", "--functional", "zero", "--n", "10"], capsys)
    assert a.startswith(str(tmp_path / "env")) and a != b


def test_no_write(capsys):
    code, out, _ = run_main(["lhs", "--functional", "zero", "--n", "10", "--no-write"], capsys)
    assert code == 0 and json.loads(out)["results"]["lhs"]["value"] == 0.0


def test_list(capsys):
    _, out, _ = run_main(["list", "functionals"], capsys)
    assert {"linear", "quadratic", "two_mark", "diverging"} <= set(json.loads(out))
    _, out, _ = run_main(["list", "policies"], capsys)
    pol = json.loads(out)
    assert {"constant", "follmer"} <= set(pol["policies"]) and "linear_feedback" in pol["families"]
    _, out, _ = run_main(["list", "experiments"], capsys)
    assert "acceptance" in json.loads(out)["experiments"]
    assert list(cli.list_catalog("functionals")) == list(cli.list_catalog("functionals"))
    with pytest.raises(InvalidArgument):
        cli.list_catalog("spells")


def test_suite_subset(tmp_path, capsys):
    code, out, err = run_main(["suite", "--name", "acceptance:7,10", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "criterion  7" in err and "criterion 10" in err
    assert len(read_record(out)["results"]["criteria"]) == 2
    code, _, _ = run_main(["suite", "--name", "acceptance:99", "--out", str(tmp_path)], capsys)
    assert code == 2


def test_suite_fails_iff_a_check_fails(monkeypatch):
    from wienerlab import acceptance

    bad = acceptance.CriterionResult(7, "forced", [Check("x", 1.0, "<=", 0.0)], {}, 0.0)
    monkeypatch.setattr(acceptance, "run_all", lambda numbers: [bad])
    rec = cli.run("suite", {"name": "acceptance:7"})
    assert not rec["passed"] and not recompute(rec["checks"])


def test_check_semantics():
    assert Check("a", 1.0, "<=", 1.0).passed
    assert not Check("a", 1.0, "<", 1.0).passed
    assert not Check("nan", math.nan, ">=", 0.0).passed
    w = within("w", 0.5, 0.5 + 1e-9, 1e-8)
    assert w.passed and Check.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        Check("a", 1.0, "==", 1.0)
