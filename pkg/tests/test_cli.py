import csv
import io
import json

import pytest

from delaysched import cli

from oracles import REF_P, REF_X

THREE_STATE = "builtin:three-state"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(tmp_path, name="cfg.json", **fields):
    doc = {"transition": REF_P, "powers": REF_X, "arrival_rate": 0.6, "buffer_size": 11, "power_budget": 1.0}
    doc.update(fields)
    doc = {k: v for k, v in doc.items() if v is not None}
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


class TestSolve:
    def test_loose_budget(self, capsys):
        code, out, _ = run(capsys, "solve", "--config", THREE_STATE, "--epsilon", "1.3")
        assert code == 0
        doc = json.loads(out)
        assert doc["status"] == "Optimal"
        assert doc["cross_method_delta"] <= 1e-5
        assert doc["lp"]["delay"] == 0.0
        assert len(doc["lp"]["transmit_prob"]) == 12

    def test_both_metrics_and_pair(self, capsys):
        code, out, _ = run(capsys, "solve", "--config", THREE_STATE, "--epsilon", "0.9")
        doc = json.loads(out)
        assert doc["lp"]["queue"] == pytest.approx(0.6 * doc["lp"]["delay"], rel=1e-11)
        assert doc["mdp"]["pi_hi"] == [3, 1, 1] and doc["mdp"]["pi_lo"] == [2, 1, 1]
        assert 0 < doc["mdp"]["lambda"] < 1
        assert doc["lp"]["power"] == pytest.approx(0.9, abs=1e-9)

    def test_infeasible_exit_code(self, capsys):
        code, out, err = run(capsys, "solve", "--config", THREE_STATE, "--epsilon", "0.1")
        assert code == 2
        assert json.loads(out)["status"] == "Infeasible"
        assert "infeasible" in err

    def test_single_state(self, capsys, tmp_path):
        path = write_config(tmp_path, transition=[[1.0]], powers=[1.0], arrival_rate=0.5, buffer_size=3,
                            power_budget=0.5)
        code, out, _ = run(capsys, "solve", "--config", path)
        assert code == 0
        assert json.loads(out)["lp"]["delay"] == 0.0

    def test_twelve_significant_digits(self, capsys):
        _, out, _ = run(capsys, "solve", "--config", THREE_STATE, "--epsilon", "0.85")
        delay = json.loads(out)["lp"]["delay"]
        assert delay == float(f"{delay:.12g}")
        assert len(repr(delay).replace(".", "").lstrip("0")) <= 12


class TestSweep:
    def _rows(self, text):
        return list(csv.DictReader(io.StringIO(text)))

    def test_reference_grid(self, capsys):
        code, out, _ = run(capsys, "sweep", "--config", THREE_STATE, "--eps-from", "0.8", "--eps-to", "1.3",
                           "--eps-step", "0.1", "--sim-slots", "20000", "--seed", "1")
        assert code == 0
        rows = self._rows(out)
        assert [r["epsilon"] for r in rows] == ["0.8", "0.9", "1", "1.1", "1.2", "1.3"]
        d = [float(r["delay_lp"]) for r in rows]
        assert all(b <= a for a, b in zip(d, d[1:]))
        assert all(r["status"] == "Optimal" and r["delay_lp_nonincreasing"] == "true" for r in rows)
        assert list(rows[0])[:11] == ["epsilon", "delay_lp", "queue_lp", "delay_mdp", "delay_greedy", "se_greedy",
                                     "lambda", "thresholds_1", "thresholds_2", "thresholds_3", "status"]

    def test_single_point(self, capsys):
        code, out, _ = run(capsys, "sweep", "--config", THREE_STATE, "--eps-from", "1", "--eps-to", "1",
                           "--eps-step", "0.1", "--sim-slots", "0")
        rows = self._rows(out)
        assert code == 0 and len(rows) == 1
        assert rows[0]["delay_greedy"] == ""

    def test_infeasible_row_flagged(self, capsys):
        code, out, _ = run(capsys, "sweep", "--config", THREE_STATE, "--eps-from", "0.5", "--eps-to", "0.7",
                           "--eps-step", "0.1", "--sim-slots", "1000")
        rows = self._rows(out)
        assert code == 0
        assert [r["status"] for r in rows] == ["Infeasible", "Optimal", "Optimal"]
        assert rows[0]["delay_lp"] == "" and rows[0]["delay_greedy"] != ""
        assert float(rows[2]["delay_lp"]) < float(rows[1]["delay_lp"])

    def test_parallel_matches_serial(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        common = ["--config", THREE_STATE, "--eps-from", "0.8", "--eps-to", "1.0", "--eps-step", "0.05",
                  "--sim-slots", "10000", "--seed", "3"]
        assert cli.main(["sweep", *common, "--output", str(a)]) == 0
        assert cli.main(["sweep", *common, "--output", str(b), "--jobs", "2"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_grid(self, capsys):
        code, _, err = run(capsys, "sweep", "--config", THREE_STATE, "--eps-from", "1", "--eps-to", "0.5",
                           "--eps-step", "0.1")
        assert code == 1 and "eps-to" in err


class TestSimulate:
    @pytest.mark.parametrize("policy", ["lp", "mdp", "greedy"])
    def test_sources(self, capsys, policy):
        code, out, _ = run(capsys, "simulate", "--config", THREE_STATE, "--policy", policy, "--slots", "20000",
                           "--seed", "4", "--epsilon", "0.9")
        assert code == 0
        doc = json.loads(out)
        res = doc["result"]
        assert res["slots"] == 20000 and res["seed"] == 4
        assert res["delivered"] + res["discarded"] + res["final_queue"] == res["arrivals"]
        assert ("exact" in doc) == (policy != "greedy")

    def test_policy_file(self, capsys, tmp_path):
        pf = tmp_path / "pol.json"
        pf.write_text(json.dumps({"thresholds": [3, 2, 1]}), encoding="utf-8")
        code, out, _ = run(capsys, "simulate", "--config", THREE_STATE, "--policy", f"file:{pf}", "--slots", "5000")
        assert code == 0
        table = [[0, 0, 0]] + [[0.0, 0.0, 1.0]] + [[0.0, 1.0, 1.0]] + [[1.0, 1.0, 1.0]] * 9
        pf.write_text(json.dumps({"transmit_prob": table}), encoding="utf-8")
        code2, out2, _ = run(capsys, "simulate", "--config", THREE_STATE, "--policy", f"file:{pf}", "--slots", "5000")
        assert code2 == 0
        assert json.loads(out)["result"] == json.loads(out2)["result"]

    def test_bad_policy_source(self, capsys):
        code, _, _ = run(capsys, "simulate", "--config", THREE_STATE, "--policy", "magic", "--slots", "10")
        assert code == 1

    def test_infeasible_lp_source(self, capsys):
        code, _, _ = run(capsys, "simulate", "--config", THREE_STATE, "--policy", "lp", "--epsilon", "0.1")
        assert code == 2


class TestEnumerate:
    def test_small_instance(self, capsys, tmp_path):
        path = write_config(tmp_path, transition=[[1.0]], powers=[1.0], arrival_rate=0.5, buffer_size=3,
                            power_budget=0.5)
        code, out, _ = run(capsys, "enumerate", "--config", path)
        doc = json.loads(out)
        assert code == 0
        assert doc["best"]["delay"] == 0.0 and doc["best"]["pi1"] == [1]
        assert len(doc["policies"]) == 4

    def test_size_guard(self, capsys, tmp_path):
        path = write_config(tmp_path, buffer_size=60)
        code, _, err = run(capsys, "enumerate", "--config", path)
        assert code == 3 and "too large" in err

    def test_infeasible(self, capsys, tmp_path):
        path = write_config(tmp_path, buffer_size=3, power_budget=0.2)
        code, out, _ = run(capsys, "enumerate", "--config", path)
        assert code == 2 and json.loads(out)["status"] == "Infeasible"


class TestInput:
    def test_syntax_error_has_position(self, capsys, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "transition": [[1]],\n  "powers": [1,]\n}', encoding="utf-8")
        code, _, err = run(capsys, "solve", "--config", str(p))
        assert code == 1 and "bad.json:3:" in err

    @pytest.mark.parametrize(
        "fields,needle",
        [
            (dict(powers=None), "missing field 'powers'"),
            (dict(colour="red"), "unknown field 'colour'"),
            (dict(buffer_size="11"), "'buffer_size'"),
            (dict(arrival_rate=1.5), "arrival_rate"),
            (dict(transition=[[1, 0], [0, 1]], powers=[2, 1]), "irreducible"),
            (dict(transition=[[0.5, 0.5], [0.5]], powers=[2, 1]), "transition"),
            (dict(powers=[1, 2, 3]), "decrease"),
        ],
    )
    def test_field_errors(self, capsys, tmp_path, fields, needle):
        path = write_config(tmp_path, **fields)
        code, _, err = run(capsys, "solve", "--config", path)
        assert code == 1
        assert needle in err

    def test_missing_file(self, capsys, tmp_path):
        code, _, _ = run(capsys, "solve", "--config", str(tmp_path / "nope.json"))
        assert code == 1

    def test_unknown_builtin(self, capsys):
        code, _, _ = run(capsys, "solve", "--config", "builtin:nothing")
        assert code == 1

    def test_usage_error_is_invalid_input(self, capsys):
        assert run(capsys, "solve")[0] == 1
        assert run(capsys, "frobnicate")[0] == 1

    def test_numerical_failure_exit_code(self, capsys, tmp_path):
        path = write_config(tmp_path, max_sweeps=2)
        code, _, err = run(capsys, "solve", "--config", path)
        assert code == 4 and "NoConvergence" in err


class TestOutput:
    def test_output_file_utf8_and_repeatable(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for p in (a, b):
            assert cli.main(["solve", "--config", THREE_STATE, "--epsilon", "0.95", "--output", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()
        a.read_bytes().decode("utf-8")

    def test_module_entry_point(self):
        import subprocess
        import sys

        out = subprocess.run([sys.executable, "-m", "delaysched", "solve", "--config", THREE_STATE, "--epsilon", "1.3"],
                             capture_output=True, check=False)
        assert out.returncode == 0
        assert json.loads(out.stdout)["status"] == "Optimal"

    def test_grid_rounding(self):
        assert cli.epsilon_grid(0.8, 1.3, 0.05) == [0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3]
