import csv
import hashlib
import json
import subprocess
import sys

import pytest

from matchdid.cli import main

COVARIATES = """unit_id,treated,income,poverty
a,1,1.0,5
b,1,3.0,2
c,0,1.1,5.2
d,0,2.9,2.1
e,0,10,0
f,0,0,9
"""

# cell means reproduce the all-cause 1979-1989 / 1999-2016 columns: 1141 -> 1134 vs 1022 -> 921
TABLE_PANEL = """unit_id,group,period,outcome
t1,1,1979-1989,1140
t1,1,1999-2016,1130
t2,1,1979-1989,1142
t2,1,1999-2016,1138
c1,0,1979-1989,1020
c1,0,1999-2016,925
c2,0,1979-1989,1024
c2,0,1999-2016,917
c3,0,1979-1989,1022
c3,0,1999-2016,921
"""


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def cov_file(tmp_path):
    return write(tmp_path / "cov.csv", COVARIATES)


# -------------------------------------------------------------- match


class TestMatch:
    def test_toy(self, tmp_path, cov_file):
        out = tmp_path / "out"
        assert main(["match", cov_file, "--out", str(out)]) == 0
        pairs = read_csv(out / "pairs.csv")
        assert len(pairs) == 2 and list(pairs[0]) == ["treated_id", "control_id", "distance"]
        assert {p["treated_id"] for p in pairs} == {"a", "b"}
        balance = read_csv(out / "balance.csv")
        assert [r["covariate"] for r in balance] == ["income", "poverty"]
        assert (out / "summary.txt").exists()

    def test_k2(self, tmp_path, cov_file):
        out = tmp_path / "out"
        assert main(["match", cov_file, "--k", "2", "--out", str(out)]) == 0
        controls = [p["control_id"] for p in read_csv(out / "pairs.csv")]
        assert len(controls) == 4 and len(set(controls)) == 4

    def test_infeasible(self, tmp_path, cov_file):
        out = tmp_path / "out"
        assert main(["match", cov_file, "--k", "3", "--out", str(out)]) == 3
        assert not out.exists()

    def test_malformed_header(self, tmp_path, capsys):
        bad = write(tmp_path / "bad.csv", COVARIATES.replace("treated", "treatment", 1))
        out = tmp_path / "out"
        assert main(["match", bad, "--out", str(out)]) == 2
        assert "line 1" in capsys.readouterr().err
        assert not out.exists()

    def test_bad_rows_report_lines(self, tmp_path, capsys):
        text = COVARIATES.replace("c,0,1.1,5.2", "c,2,1.1,5.2").replace("e,0,10,0", "e,0,ten,0")
        bad = write(tmp_path / "bad.csv", text)
        assert main(["match", bad, "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "line 4" in err and "line 6" in err

    def test_no_partial_output_on_failure(self, tmp_path, cov_file):
        out = tmp_path / "out"
        out.mkdir()
        (out / "pairs.csv").write_text("old")
        assert main(["match", cov_file, "--k", "9", "--out", str(out)]) == 3
        assert (out / "pairs.csv").read_text() == "old"
        assert sorted(p.name for p in out.iterdir()) == ["pairs.csv"]

    def test_config_and_flag_precedence(self, tmp_path, cov_file):
        cfg = write(tmp_path / "cfg.json", json.dumps({"k": 2, "metric": "propensity", "caliper": False}))
        out = tmp_path / "out"
        assert main(["match", cov_file, "--config", cfg, "--k", "1", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        resolved = manifest["resolved_config"]
        assert resolved["k"] == 1  # flag wins
        assert resolved["metric"] == "propensity" and resolved["caliper"] is False  # config wins over default
        digest = hashlib.sha256(open(cov_file, "rb").read()).hexdigest()
        assert manifest["inputs"][cov_file] == digest

    def test_unknown_config_key(self, tmp_path, cov_file):
        cfg = write(tmp_path / "cfg.json", json.dumps({"kk": 2}))
        assert main(["match", cov_file, "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_manifest_replay(self, tmp_path, cov_file):
        first = tmp_path / "first"
        assert main(["match", cov_file, "--k", "2", "--no-caliper", "--out", str(first)]) == 0
        second = tmp_path / "second"
        assert main(["match", "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
        for name in ("pairs.csv", "balance.csv", "manifest.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_missing_file(self, tmp_path):
        assert main(["match", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 2


# -------------------------------------------------------------- did


class TestDid:
    def test_table_fixture_regression(self, tmp_path):
        panel = write(tmp_path / "panel.csv", TABLE_PANEL)
        out = tmp_path / "out"
        assert main(["did", panel, "--out", str(out)]) == 0
        (row,) = read_csv(out / "did.csv")
        assert row["method"] == "regression"
        assert float(row["point"]) == pytest.approx(94.0, abs=1e-9)
        assert int(row["n"]) == 5

    def test_pairs_with_equal_outcomes(self, tmp_path):
        panel = write(tmp_path / "panel.csv", "unit_id,group,period,outcome\n"
                      "t1,1,pre,1\nt1,1,post,4\nt2,1,pre,2\nt2,1,post,3\n"
                      "c1,0,pre,1\nc1,0,post,4\nc2,0,pre,2\nc2,0,post,3\n")
        pairs = write(tmp_path / "pairs.csv", "treated_id,control_id,distance\nt1,c1,0\nt2,c2,0\n")
        out = tmp_path / "out"
        assert main(["did", panel, "--pairs", pairs, "--out", str(out)]) == 0
        (row,) = read_csv(out / "did.csv")
        assert row["method"] == "paired" and float(row["point"]) == 0.0

    def test_match_then_did(self, tmp_path, cov_file):
        assert main(["match", cov_file, "--out", str(tmp_path / "m")]) == 0
        lines = ["unit_id,group,period,outcome"]
        for i, u in enumerate("abcdef"):
            g = int(u in "ab")
            lines += [f"{u},{g},pre,{i}", f"{u},{g},post,{i + 1 + 2 * g}"]
        panel = write(tmp_path / "panel.csv", "\n".join(lines) + "\n")
        assert main(["did", panel, "--pairs", str(tmp_path / "m" / "pairs.csv"), "--out", str(tmp_path / "d")]) == 0
        (row,) = read_csv(tmp_path / "d" / "did.csv")
        assert float(row["point"]) == pytest.approx(2.0)

    def test_unknown_period(self, tmp_path):
        panel = write(tmp_path / "panel.csv", TABLE_PANEL)
        out = tmp_path / "out"
        assert main(["did", panel, "--pre", "1950", "--post", "1999-2016", "--out", str(out)]) == 2
        assert not out.exists()

    def test_pair_unit_missing_period(self, tmp_path, capsys):
        panel = write(tmp_path / "panel.csv", TABLE_PANEL.replace("c2,0,1999-2016,917\n", ""))
        pairs = write(tmp_path / "pairs.csv", "treated_id,control_id\nt1,c1\nt2,c2\n")
        assert main(["did", panel, "--pairs", pairs, "--out", str(tmp_path / "o")]) == 2
        assert "c2" in capsys.readouterr().err

    def test_k2_pairs_rejected(self, tmp_path):
        panel = write(tmp_path / "panel.csv", TABLE_PANEL)
        pairs = write(tmp_path / "pairs.csv", "treated_id,control_id\nt1,c1\nt1,c2\n")
        assert main(["did", panel, "--pairs", pairs, "--out", str(tmp_path / "o")]) == 2

    def test_three_periods_need_choice(self, tmp_path):
        text = TABLE_PANEL + "".join(f"{u},{int(u[0] == 't')},1990-1998,1000\n" for u in ("t1", "t2", "c1", "c2", "c3"))
        panel = write(tmp_path / "panel.csv", text)
        assert main(["did", panel, "--out", str(tmp_path / "o")]) == 2
        order = "1979-1989,1990-1998,1999-2016"
        assert main(["did", panel, "--pre", "1979-1989", "--post", "1999-2016", "--period-order", order,
                     "--out", str(tmp_path / "o")]) == 0


# -------------------------------------------------------------- trend


def trend_text(t_change, c_change, noise=(0.0, 0.3, -0.3, 0.1, -0.1)):
    lines = ["unit_id,group,period,outcome"]
    for g, change in ((1, t_change), (0, c_change)):
        for i, e in enumerate(noise):
            u = f"{'t' if g else 'c'}{i}"
            lines.append(f"{u},{g},p1,{10 + e}")
            lines.append(f"{u},{g},p2,{10 + change - e}")
            lines.append(f"{u},{g},p3,{10 + 2 * change}")
    return "\n".join(lines) + "\n"


class TestTrend:
    def test_parallel(self, tmp_path):
        panel = write(tmp_path / "p.csv", trend_text(2.0, 2.0))
        out = tmp_path / "out"
        assert main(["trend", panel, "--pre1", "p1", "--pre2", "p2", "--out", str(out)]) == 0
        (row,) = read_csv(out / "trend.csv")
        assert float(row["p_value"]) == pytest.approx(1.0, abs=1e-9)
        means = read_csv(out / "trend_means.csv")
        assert len(means) == 2 * 3  # groups x periods in the file

    def test_divergent(self, tmp_path):
        panel = write(tmp_path / "p.csv", trend_text(12.0, 2.0))
        out = tmp_path / "out"
        assert main(["trend", panel, "--pre1", "p1", "--pre2", "p2", "--out", str(out)]) == 0
        (row,) = read_csv(out / "trend.csv")
        assert float(row["p_value"]) < 0.001
        assert float(row["tau_hat"]) == pytest.approx(10.0)

    def test_missing_cell(self, tmp_path):
        text = "unit_id,group,period,outcome\nt,1,p1,1\nc,0,p1,1\nc,0,p2,2\n"
        panel = write(tmp_path / "p.csv", text)
        assert main(["trend", panel, "--pre1", "p1", "--pre2", "p2", "--out", str(tmp_path / "o")]) == 2

    def test_periods_required(self, tmp_path):
        panel = write(tmp_path / "p.csv", trend_text(1.0, 1.0))
        assert main(["trend", panel, "--out", str(tmp_path / "o")]) == 2


# -------------------------------------------------------------- simulate


class TestSimulate:
    def test_smoke_shape(self, tmp_path):
        out = tmp_path / "out"
        assert main(["simulate", "--table", "4", "--reps", "10", "--seed", "3", "--out", str(out)]) == 0
        rows = read_csv(out / "table4.csv")
        assert len(rows) == 9
        assert list(rows[0]) == ["scenario", "strategy", "mean", "sd", "median", "mad", "coverage", "mean_ci_length"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["resolved_config"]["seed"] == 3
        assert set(manifest["resolved_config"]["scenario_configs"]) == {"d=2", "d=4", "d=8"}

    def test_byte_identical(self, tmp_path):
        args = ["simulate", "--table", "6", "--reps", "5", "--seed", "11"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "table6.csv").read_bytes() == (tmp_path / "b" / "table6.csv").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_config_overrides(self, tmp_path):
        cfg = write(tmp_path / "c.json", json.dumps({"table": 8, "reps": 4, "seed": 2, "scenario": {"n_total": 300}}))
        out = tmp_path / "out"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert all(c["n_total"] == 300 for c in manifest["resolved_config"]["scenario_configs"].values())
        assert {r["strategy"] for r in read_csv(out / "table8.csv")} == {"none", "full", "outcome"}

    def test_invalid_scenario(self, tmp_path):
        cfg = write(tmp_path / "c.json", json.dumps({"scenario": {"no_such_field": 1}}))
        out = tmp_path / "out"
        assert main(["simulate", "--table", "4", "--reps", "3", "--config", cfg, "--out", str(out)]) == 2
        assert not out.exists()

    def test_invalid_table(self, tmp_path):
        assert main(["simulate", "--table", "9", "--reps", "3", "--out", str(tmp_path / "o")]) == 2

    def test_bad_json(self, tmp_path):
        cfg = write(tmp_path / "c.json", "{not json")
        assert main(["simulate", "--table", "4", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point(tmp_path, cov_file):
    proc = subprocess.run([sys.executable, "-m", "matchdid", "match", cov_file, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "matched 2 treated units" in proc.stdout
