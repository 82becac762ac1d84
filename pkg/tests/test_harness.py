import csv
import io
import json
from dataclasses import asdict

import pytest

from ualign.harness import (
    CSV_COLUMNS,
    SCHEMA_VERSION,
    ExperimentConfig,
    PolicyParseError,
    Report,
    UsageError,
    cmd_certify,
    cmd_reproduce,
    cmd_solve,
    cmd_sweep,
    config_from_document,
    main,
    parse_policy_file,
)
from ualign.instances import InstanceSpec
from ualign.solvers import SolverConfig

GOLDEN_COLUMNS = [
    "target", "instance", "prompt", "k", "l", "algorithm", "iterations", "seed", "certified_rate", "threshold",
    "regret_per_round", "relation", "tol", "witness", "passed", "policy", "note", "wall_time",
]

P_STAR_K2 = 0.5505102572165015


def _strip_time(report):
    return [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in report.rows]


def test_csv_schema_is_stable():
    assert CSV_COLUMNS == GOLDEN_COLUMNS
    assert SCHEMA_VERSION == "1.0"


class TestSolve:
    def test_majority_mwu(self):
        cfg = ExperimentConfig(InstanceSpec.parse("majority:0.1"), [2], solver=SolverConfig(iterations=10_000))
        rep = cmd_solve(cfg)
        (row,) = rep.rows
        assert row.certified_rate >= 2 / 3 - row.regret_per_round
        assert row.passed and row.consistent()

    def test_uniform_pl_exact(self):
        cfg = ExperimentConfig(InstanceSpec.parse("uniform-pl:3"), [3], solver=SolverConfig(iterations=50))
        (row,) = cmd_solve(cfg).rows
        assert row.certified_rate == pytest.approx(0.75, abs=1e-12)

    def test_empty_k(self):
        with pytest.raises(UsageError, match="k"):
            ExperimentConfig(InstanceSpec.parse("majority:0.1"), [])

    def test_lp_rows(self):
        cfg = ExperimentConfig(InstanceSpec.parse("majority:0.1"), [1, 2], solver=SolverConfig(algorithm="lp-nlhf"))
        rep = cmd_solve(cfg)
        assert [r.passed for r in rep.rows] == [True, False]
        assert not rep.passed

    def test_reproducible_from_seed(self):
        cfg = ExperimentConfig(InstanceSpec.parse("condorcet-cycle"), [2], [1, 2],
                               solver=SolverConfig(iterations=500, init="random", seed=7))
        assert _strip_time(cmd_solve(cfg)) == _strip_time(cmd_solve(cfg))

    def test_contextual(self, tmp_path):
        from ualign.instances import condorcet_cycle_instance, majority_instance
        from ualign.prefcore import save_model

        save_model(majority_instance(0.2), tmp_path / "a.json")
        save_model(condorcet_cycle_instance(), tmp_path / "b.json")
        cfg = ExperimentConfig(InstanceSpec.parse(f"custom:{tmp_path}"), [1], solver=SolverConfig(iterations=200))
        rows = cmd_solve(cfg).rows
        assert [r.prompt for r in rows] == ["a", "b"]


class TestCertify:
    def test_nlhf_point_mass(self, tmp_path):
        p = tmp_path / "pi.json"
        p.write_text("[1.0, 0.0]")
        (row,) = cmd_certify(p, InstanceSpec.parse("majority:0.1"), [8]).rows
        assert row.certified_rate == pytest.approx(0.6, abs=1e-12)
        assert row.threshold == pytest.approx(8 / 9)
        assert not row.passed

    def test_mpne(self, tmp_path):
        p = tmp_path / "pi.json"
        p.write_text(json.dumps({"probs": [P_STAR_K2, 1 - P_STAR_K2]}))
        (row,) = cmd_certify(p, InstanceSpec.parse("majority:0.1"), [2]).rows
        assert row.certified_rate == pytest.approx(0.8787753826797685, abs=1e-12)
        # both opponents tie at p*, smallest count vector (0, 1) wins the tie
        assert row.passed and row.witness == "y2"

    def test_opponent_as_large_as_k_plus_one(self, tmp_path):
        p = tmp_path / "pi.json"
        p.write_text("[0.5, 0.5]")
        (row,) = cmd_certify(p, InstanceSpec.parse("majority:0.1"), [2], [3]).rows
        assert row.threshold == 0.0 and row.passed

    def test_parse_error_has_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "probs": [0.5,\n  0.5\n')
        with pytest.raises(PolicyParseError, match=r"bad\.json:\d+:\d+"):
            parse_policy_file(p)

    def test_wrong_size(self, tmp_path):
        p = tmp_path / "pi.json"
        p.write_text("[0.2, 0.3, 0.5]")
        with pytest.raises(PolicyParseError, match="3 entries"):
            parse_policy_file(p, 2)


class TestReproduce:
    def test_prop_3_2(self):
        rep = cmd_reproduce("prop-3.2")
        assert rep.passed
        for r in rep.rows:
            assert abs(r.certified_rate - r.k / (r.k + 1)) <= 1e-12

    def test_prop_4_1(self):
        rep = cmd_reproduce("prop-4.1")
        nlhf = [r for r in rep.rows if r.algorithm == "nlhf"]
        mpne = [r for r in rep.rows if r.algorithm == "mpne-pga"]
        assert [r.k for r in nlhf] == [1, 2, 4, 8]
        assert all(r.certified_rate == pytest.approx(0.6, abs=1e-12) for r in nlhf)
        assert all(r.certified_rate >= r.k / (r.k + 1) - 1e-6 for r in mpne)
        assert rep.passed

    @pytest.mark.slow
    def test_thm_4_4(self):
        rep = cmd_reproduce("thm-4.4")
        cyc = {r.l: r.certified_rate for r in rep.rows if r.instance == "condorcet-cycle"}
        for ell, floor in {1: 4 / 5, 2: 3 / 5, 3: 2 / 5}.items():
            assert cyc[ell] >= floor - 0.02
        assert rep.passed

    def test_unknown_target(self):
        with pytest.raises(UsageError):
            cmd_reproduce("prop-9.9")

    def test_rows_consistent(self):
        for t in ("prop-2.2", "prop-3.3", "thm-4.3"):
            rep = cmd_reproduce(t)
            assert rep.passed
            assert all(r.consistent() for r in rep.rows)


class TestSweep:
    def test_regret_bound_rises_toward_threshold(self):
        cfg = ExperimentConfig(InstanceSpec.parse("majority:0.1"), [2], iters_grid=[100, 1000, 10_000],
                               solver=SolverConfig(init="random", seed=3))
        rows = cmd_sweep(cfg).rows
        bounds = [r.bound for r in rows]
        assert [r.iterations for r in rows] == [100, 1000, 10_000]
        assert all(b < 2 / 3 for b in bounds)
        assert bounds == sorted(bounds)
        assert all(r.certified_rate >= r.bound - 1e-9 for r in rows)

    def test_k_grid_uniform_pl(self):
        for k in (1, 2, 3):
            cfg = ExperimentConfig(InstanceSpec.parse(f"uniform-pl:{k}"), [k], solver=SolverConfig(iterations=20))
            (row,) = cmd_sweep(cfg).rows
            assert row.certified_rate == pytest.approx(k / (k + 1), abs=1e-12)

    def test_single_point(self):
        cfg = ExperimentConfig(InstanceSpec.parse("condorcet-cycle"), [1], iters_grid=[10])
        rep = cmd_sweep(cfg)
        assert len(rep.rows) == 1
        assert len(rep.csv_text().strip().split("\r\n")) == 2


class TestConfigDocument:
    def test_solver_block(self):
        cfg = config_from_document({"instance": "condorcet-cycle", "k": [1, 2], "l": "1,2",
                                    "solver": {"algorithm": "projected-gradient", "iterations": 30, "eta": 0.2}})
        assert cfg.ks == [1, 2] and cfg.ls == [1, 2]
        assert cfg.solver.algorithm == "projected-gradient" and cfg.solver.eta == 0.2

    @pytest.mark.parametrize("doc,field", [
        ({"k": [1]}, "instance"),
        ({"instance": "nope", "k": [1]}, "instance"),
        ({"instance": "majority:0.1", "k": ["x"]}, "k"),
        ({"instance": "majority:0.1", "k": [1], "eta": "fast"}, "eta"),
        ({"instance": "majority:0.1", "k": [1], "algorithm": "sgd"}, "solver"),
    ])
    def test_errors_name_the_field(self, doc, field):
        with pytest.raises(UsageError, match=field):
            config_from_document(doc)


class TestReportIO:
    def test_json_roundtrip_and_csv(self, tmp_path):
        rep = cmd_reproduce("prop-3.2")
        jp, cp = rep.write(tmp_path, "x")
        doc = json.loads(jp.read_text())
        assert doc["schema_version"] == SCHEMA_VERSION and doc["passed"] is True
        back = Report.from_dict(doc)
        assert _strip_time(back) == _strip_time(rep)
        text = cp.read_bytes().decode()
        assert "\r\n" in text
        rows = list(csv.DictReader(io.StringIO(text)))
        assert list(rows[0]) == GOLDEN_COLUMNS
        assert float(rows[0]["certified_rate"]) == rep.rows[0].certified_rate
        assert not list(tmp_path.glob(".*"))


class TestCLI:
    def test_reproduce_exit_zero(self, tmp_path, capsys):
        assert main(["reproduce", "prop-3.2", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "prop-3.2.csv").exists() and (tmp_path / "prop-3.2.json").exists()
        assert capsys.readouterr().out.startswith("target,instance")

    def test_failed_certificate_exit_one(self, tmp_path):
        p = tmp_path / "pi.json"
        p.write_text("[1, 0]")
        assert main(["certify", str(p), "--instance", "majority:0.1", "--k", "8"]) == 1

    def test_usage_error_exit_two(self, capsys):
        assert main(["solve", "--instance", "majority:0.1", "--k", ""]) == 2
        assert "k:" in capsys.readouterr().err

    def test_cap_error_exit_three(self, capsys):
        assert main(["solve", "--instance", "uniform-rankings:4", "--k", "3", "--cap", "5", "--iters", "2"]) == 3
        assert "terms" in capsys.readouterr().err

    def test_config_file_with_overrides(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({"instance": "condorcet-cycle", "k": [1], "solver": {"iterations": 50},
                                    "out": str(tmp_path / "o")}))
        assert main(["solve", "--config", str(cfgp), "--k", "2", "--algo", "projected-gradient"]) == 0
        doc = json.loads((tmp_path / "o" / "solve.json").read_text())
        assert [r["k"] for r in doc["rows"]] == [2]
        assert doc["rows"][0]["algorithm"] == "projected-gradient"

    def test_sweep_grid_flag(self, tmp_path):
        assert main(["sweep", "--instance", "majority:0.1", "--k", "1,2", "--iters", "50,100",
                     "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader((tmp_path / "sweep.csv").open(newline="")))
        assert [(r["k"], r["iterations"]) for r in rows] == [("1", "50"), ("1", "100"), ("2", "50"), ("2", "100")]

    def test_env_cap(self, monkeypatch):
        monkeypatch.setenv("UALIGN_CAP", "3")
        assert main(["solve", "--instance", "condorcet-cycle", "--k", "2", "--iters", "5"]) == 3
