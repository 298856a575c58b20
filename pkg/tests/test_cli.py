"""Command-line runner: summaries, determinism, parallelism, exit codes."""

import os

import pytest

from twosyn.cli import main

TINY_SCENARIO = """
[paths]
count = 2
path1.capacity_mbps = 300
path1.rtt_ms = 120
path2.capacity_mbps = 300
path2.rtt_ms = 80

[workload]
kind = repeated_file
size_bytes = 150000
count = 3

[policy]
kind = 2syn
compare = static1, static2, random, 2syn, egreedy, ucb, thompson
"""


@pytest.fixture()
def tiny_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_SCENARIO)
    return str(path)


def read(out_dir, *parts):
    with open(os.path.join(out_dir, *parts), "rb") as fh:
        return fh.read()


def summary_rows(out_dir):
    text = read(out_dir, "summary.csv").decode()
    return [line.split(",") for line in text.strip().splitlines()[1:]]


class TestRuns:
    def test_builtin_scenario_all_policies(self, tmp_path, capsys):
        out = str(tmp_path / "o")
        rc = main(["--scenario", "prop-delay", "--policy", "all", "--seed", "7", "--out", out])
        assert rc == 0
        rows = summary_rows(out)
        assert [r[1] for r in rows] == ["static1", "static2", "random", "2syn"]
        assert all(r[2] == "20" and r[3] == "20" for r in rows)
        table = capsys.readouterr().out
        assert "static2" in table and "mean FCT" in table

    def test_scenario_file_with_mab_roster(self, tiny_file, tmp_path):
        out = str(tmp_path / "o")
        rc = main(["--scenario", tiny_file, "--policy", "all", "--seed", "3", "--out", out])
        assert rc == 0
        rows = summary_rows(out)
        assert [r[1] for r in rows] == [
            "static1",
            "static2",
            "random",
            "2syn",
            "egreedy",
            "ucb",
            "thompson",
        ]

    def test_single_policy_with_reps(self, tiny_file, tmp_path):
        out = str(tmp_path / "o")
        rc = main(["--scenario", tiny_file, "--policy", "static2", "--reps", "3", "--out", out])
        assert rc == 0
        rows = summary_rows(out)
        assert len(rows) == 1
        assert rows[0][2] == "9"  # 3 flows x 3 reps pooled
        for rep in range(3):
            assert read(out, "tiny", "static2", f"rep{rep}", "flows.csv")

    def test_flow_key_and_route_delay_flags(self, tiny_file, tmp_path):
        rc = main(
            [
                "--scenario",
                tiny_file,
                "--policy",
                "2syn",
                "--flow-key",
                "ippair",
                "--route-update-delay-ms",
                "4",
                "--out",
                str(tmp_path / "o"),
            ]
        )
        assert rc == 0


class TestDeterminism:
    def test_same_invocation_is_byte_identical(self, tiny_file, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        args = ["--scenario", tiny_file, "--policy", "all", "--seed", "7", "--reps", "2"]
        assert main(args + ["--out", a]) == 0
        assert main(args + ["--out", b]) == 0
        assert read(a, "summary.csv") == read(b, "summary.csv")
        assert read(a, "tiny", "2syn", "rep1", "flows.csv") == read(
            b, "tiny", "2syn", "rep1", "flows.csv"
        )
        assert read(a, "tiny", "random", "rep0", "flows.csv") == read(
            b, "tiny", "random", "rep0", "flows.csv"
        )

    def test_parallel_equals_sequential(self, tiny_file, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        args = ["--scenario", tiny_file, "--policy", "all", "--seed", "7"]
        assert main(args + ["--out", a, "--jobs", "1"]) == 0
        assert main(args + ["--out", b, "--jobs", "4"]) == 0
        assert read(a, "summary.csv") == read(b, "summary.csv")
        assert read(a, "tiny", "egreedy", "rep0", "flows.csv") == read(
            b, "tiny", "egreedy", "rep0", "flows.csv"
        )

    def test_sub_seeds_isolate_policies(self, tiny_file, tmp_path):
        # dropping a policy from the roster must not change another's rows
        out_all = str(tmp_path / "all")
        out_one = str(tmp_path / "one")
        assert main(["--scenario", tiny_file, "--policy", "all", "--seed", "7", "--out", out_all]) == 0
        assert main(["--scenario", tiny_file, "--policy", "random", "--seed", "7", "--out", out_one]) == 0
        assert read(out_all, "tiny", "random", "rep0", "flows.csv") == read(
            out_one, "tiny", "random", "rep0", "flows.csv"
        )


class TestUsageErrors:
    def test_unknown_scenario_exits_2(self, capsys):
        assert main(["--scenario", "no-such-lab"]) == 2
        assert "unknown scenario" in capsys.readouterr().err

    def test_unknown_policy_exits_2(self, capsys):
        assert main(["--scenario", "prop-delay", "--policy", "warp"]) == 2
        assert "unknown policy" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["--scenario", "prop-delay", "--frobnicate"])
        assert exc.value.code == 2

    def test_bad_reps_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["--scenario", "prop-delay", "--reps", "0"])
        assert exc.value.code == 2

    def test_broken_scenario_file_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[paths]\ncount = 1\npath1.capacity_mbps = 10\n")
        assert main(["--scenario", str(bad)]) == 2
