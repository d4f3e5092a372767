import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ctmc_lab.cli import main
from ctmc_lab.config import load_experiment, load_sweep
from ctmc_lab.errors import InvalidConfig, InvalidInput
from ctmc_lab.runner import SWEEP_COLUMNS, cli_sweep, fit_loglog, fit_slope, run_experiment


def base_config(**over):
    cfg = {
        "space": {"S": 3, "d": 2},
        "q0": {"kind": "point-mass", "index": 0},
        "sampler": {"kind": "truncated"},
        "schedule": {"schedule": "cted", "T": 3.0, "delta": 0.01, "kappa": 0.3},
    }
    cfg.update(over)
    return cfg


def write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


class TestConfig:
    def test_defaults(self):
        cfg = load_experiment(base_config(schedule={"schedule": "uniform", "T": 2.0, "N": 5}))
        assert cfg.delta == pytest.approx(2e-3)
        assert cfg.mode.kind == "exact"
        assert cfg.build_grid().N == 5

    @pytest.mark.parametrize(
        "patch, field",
        [
            ({"schedule": None}, "schedule"),
            ({"space": {"S": 1, "d": 2}}, "space.S"),
            ({"sampler": {"kind": "leapfrog"}}, "sampler"),
            ({"q0": {"kind": "point-mass", "index": 99}}, "q0.index"),
            ({"noise_schedule": "cosine"}, "noise_schedule"),
            ({"mode": {"kind": "monte-carlo", "n": 0}}, "mode"),
        ],
    )
    def test_errors_name_field(self, patch, field):
        data = base_config(**patch)
        data = {k: v for k, v in data.items() if v is not None}
        with pytest.raises(InvalidConfig) as err:
            load_experiment(data)
        assert field.split(".")[0] in str(err.value)

    def test_exact_cap(self):
        with pytest.raises(InvalidConfig):
            load_experiment(base_config(space={"S": 10, "d": 3, "exact_cap": 100}))

    def test_hash_ignores_output_paths(self):
        a = load_experiment(base_config())
        b = load_experiment(base_config(output="x.jsonl"))
        c = load_experiment(base_config(master_seed=3))
        assert a.config_hash() == b.config_hash() != c.config_hash()


class TestRun:
    def test_uniform_reports_zero_kl(self):
        for kind in ("euler", "tweedie", "truncated", "kolmogorov-ref"):
            cfg = load_experiment(base_config(q0={"kind": "uniform"}, sampler={"kind": kind}))
            assert run_experiment(cfg).final_kl <= 1e-10

    def test_report_contents(self):
        rep = run_experiment(load_experiment(base_config()))
        rec = rep.record()
        assert set(rec["bound"]) == {"lhs_kl", "init_err", "est_err", "disc_err", "rhs_total", "quad_est"}
        assert rec["bound_holds"] is True
        assert rec["steps"][-1]["kl"] == pytest.approx(rec["final_kl"])
        assert "wall_clock_s" not in rec

    def test_no_bound_for_euler(self):
        rep = run_experiment(load_experiment(base_config(sampler={"kind": "euler"})))
        assert rep.bound is None

    def test_monte_carlo_thread_independence(self):
        cfg = load_experiment(base_config(mode={"kind": "monte-carlo", "n": 10000}, master_seed=4))
        assert run_experiment(cfg, threads=1).jsonl() == run_experiment(cfg, threads=4).jsonl()


class TestCli:
    def test_run_twice_byte_identical(self, tmp_path):
        out = tmp_path / "r.jsonl"
        path = write(tmp_path / "c.json", base_config(output=str(out), steps_csv=str(tmp_path / "s.csv")))
        assert main(["run", path]) == 0
        first = out.read_bytes()
        assert main(["run", path]) == 0
        assert out.read_bytes() == first
        assert first.count(b"\n") == 1
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert rows[0]["k"] == "0"

    def test_missing_schedule_exit_2(self, tmp_path, capsys):
        data = base_config()
        del data["schedule"]
        assert main(["run", write(tmp_path / "c.json", data)]) == 2
        assert "schedule" in capsys.readouterr().err

    def test_bad_json_exit_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert main(["validate", str(p)]) == 2
        assert main(["validate", str(tmp_path / "missing.json")]) == 2

    def test_validate_ok(self, tmp_path, capsys):
        assert main(["validate", write(tmp_path / "c.json", base_config())]) == 0
        assert capsys.readouterr().out.startswith("ok ")

    def test_sampler_error_exit_3(self, tmp_path, capsys):
        data = base_config(
            space={"S": 3, "d": 1},
            sampler={"kind": "euler"},
            schedule={"schedule": "uniform", "T": 4.0, "N": 2},
        )
        assert main(["run", write(tmp_path / "c.json", data)]) == 3
        err = capsys.readouterr().err
        assert "step k=" in err and "state=" in err

    def test_threads_env_validation(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CTMC_LAB_THREADS", "zero")
        assert main(["run", write(tmp_path / "c.json", base_config())]) == 2

    def test_console_script(self, tmp_path):
        path = write(tmp_path / "c.json", base_config())
        proc = subprocess.run([sys.executable, "-m", "ctmc_lab.cli", "validate", path], capture_output=True, text=True)
        assert proc.returncode == 0


def sweep(axes, **base_over):
    return load_sweep({"base": base_config(**base_over), "axes": axes})


class TestSweep:
    def test_kappa_sweep_final_kl_decreases(self):
        rows = cli_sweep(sweep({"kappa": [0.4, 0.2, 0.1, 0.05]}, schedule={"schedule": "cted", "T": 4.0, "delta": 1e-3, "kappa": 0.5}))
        kls = [r["final_kl"] for r in rows]
        assert all(b < a for a, b in zip(kls, kls[1:]))

    def test_delta_sweep_early_stop_halves(self):
        rows = cli_sweep(sweep({"delta": [0.02, 0.01, 0.005]}))
        e = [r["early_stop_tv"] for r in rows]
        for a, b in zip(e, e[1:]):
            assert 1.8 <= a / b <= 2.2

    def test_c_sweep_eps_score(self):
        rows = cli_sweep(sweep({"c": [1, 2]}))
        assert rows[0]["eps_score"] < 1e-14 and rows[1]["eps_score"] > 0

    def test_columns_and_self_description(self, tmp_path):
        out = tmp_path / "s.csv"
        with open(out, "w", newline="") as fh:
            cli_sweep(sweep({"S": [2, 3], "sampler": ["euler", "truncated"]}), out=fh)
        reader = csv.DictReader(open(out))
        assert reader.fieldnames == list(SWEEP_COLUMNS)
        assert reader.fieldnames[0] == "config_hash"
        rest = reader.fieldnames[1:]
        assert rest == sorted(rest, key=str.lower)
        rows = list(reader)
        assert len(rows) == 4
        assert len({r["config_hash"] for r in rows}) == 4
        assert all(r["T"] == "3.0" and r["d"] == "2" for r in rows)

    def test_failures_recorded_in_row(self):
        rows = cli_sweep(sweep({"sampler": ["euler", "truncated"], "T": [4.0]}, schedule={"schedule": "uniform", "T": 4.0, "N": 1}))
        assert "StepTooLarge" in rows[0]["error"]
        assert rows[1]["error"] is None and rows[1]["final_kl"] > 0

    def test_kappa_axis_needs_cted(self):
        rows = cli_sweep(sweep({"kappa": [0.2]}, schedule={"schedule": "uniform", "T": 2.0, "N": 4}))
        assert "cted" in rows[0]["error"]

    def test_point_seeds_distinct_and_stable(self):
        a = cli_sweep(sweep({"S": [2, 3]}))
        b = cli_sweep(sweep({"S": [2, 3]}))
        assert [r["seed"] for r in a] == [r["seed"] for r in b]
        assert a[0]["seed"] != a[1]["seed"]

    def test_threaded_rows_in_order(self):
        s = sweep({"kappa": [0.4, 0.2, 0.1]})
        assert cli_sweep(s, threads=3) == cli_sweep(s, threads=1)

    def test_cli_sweep_and_fit(self, tmp_path, capsys):
        out = tmp_path / "s.csv"
        data = {"base": base_config(), "axes": {"kappa": [0.4, 0.2, 0.1]}, "output_csv": str(out)}
        assert main(["sweep", write(tmp_path / "sw.json", data)]) == 0
        assert main(["fit", str(out), "--x", "kappa", "--y", "final_kl"]) == 0
        fit = json.loads(capsys.readouterr().out)
        assert fit["rows"] == 3 and fit["slope"] > 0

    def test_unknown_axis(self):
        with pytest.raises(InvalidConfig):
            load_sweep({"base": base_config(), "axes": {"colour": [1]}})


class TestFit:
    def test_identity_and_square(self):
        x = np.array([1.0, 2.0, 4.0, 8.0])
        f = fit_loglog(x, x)
        assert f.slope == pytest.approx(1.0) and f.r2 == pytest.approx(1.0)
        assert fit_loglog(x, x**2).slope == pytest.approx(2.0)

    def test_drops_nonpositive(self, caplog):
        f = fit_loglog([1, 2, 4, 8, 0, -1], [3, 6, 12, 24, 5, 5])
        assert f.dropped == 2 and f.used == 4
        assert f.slope == pytest.approx(1.0)
        assert "dropped 2" in caplog.text

    def test_too_few_rows(self):
        with pytest.raises(InvalidInput):
            fit_loglog([1, 2, 0], [1, 2, 3])

    def test_from_csv(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("a,b\n1,1\n2,8\n3,27\nx,inf\n")
        f = fit_slope(p, "a", "b")
        assert f.slope == pytest.approx(3.0) and f.dropped == 1
        with pytest.raises(InvalidInput):
            fit_slope(p, "a", "nope")
