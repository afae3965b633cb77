import csv
import math
import subprocess
import sys

import numpy as np
import pytest

from dpdmd.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_VERIFY, main
from dpdmd.experiment import (
    ConfigError,
    ExperimentConfig,
    build_problem,
    default_checkpoints,
    read_summary,
    replay,
    run_experiment,
    sweep,
)

SMALL = """
[instance]
n = 3
m = 2
p = 2
T = 60
rho = 0.3
seed = 4

[algorithm]
schedule = strongly_convex
kappa = 0.5
sigma = 10.0
mapping = true_dynamics

[output]
dir = {out}
comparators = dynamic
checkpoints = 10, 20, 40, 60
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL.format(out=tmp_path / "out"))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


class TestConfig:
    def test_defaults_are_desk_scale(self):
        cfg = ExperimentConfig()
        assert (cfg.n, cfg.m, cfg.p, cfg.T, cfg.rho) == (10, 3, 4, 2000, 0.2)
        assert (cfg.zeta1, cfg.zeta2, cfg.lambda1, cfg.lambda2, cfg.sigma) == (1.0, 30.0, 1.0, 30.0, 10.0)

    def test_round_trip(self, cfg_file):
        cfg = ExperimentConfig.from_file(cfg_file)
        assert cfg.checkpoints == (10, 20, 40, 60) and cfg.n == 3
        assert ExperimentConfig.from_string(cfg.to_string()) == cfg

    @pytest.mark.parametrize("text, pattern", [
        ("[instance]\nbogus = 1\n", "unknown key"),
        ("[extras]\nx = 1\n", "unknown section"),
        ("[instance]\nn = three\n", "cannot parse"),
        ("[instance]\nn = 0\n", "positive"),
        ("[algorithm]\nkappa = 1.0\n", r"\(0, 1\)"),
        ("[algorithm]\nschedule = fast\n", "schedule"),
        ("[algorithm]\nmapping = psychic\n", "mapping"),
        ("[output]\ncheckpoints = 10, 5\n", "strictly increasing"),
        ("[output]\ncomparators = static\n", "dynamic comparator"),
        ("[sweep]\nparam = zeta9\nvalues = 1\n", "cannot sweep"),
        ("not an ini file", "unparseable"),
    ])
    def test_invalid(self, text, pattern):
        with pytest.raises(ConfigError, match=pattern):
            ExperimentConfig.from_string(text)

    def test_checkpoints(self):
        cps = default_checkpoints(2000)
        assert list(cps) == sorted(set(cps))
        assert {100, 200, 500, 1000, 2000} <= set(cps)
        assert default_checkpoints(5) == (5,)


class TestRun:
    def test_bundle(self, cfg_file):
        cfg = ExperimentConfig.from_file(cfg_file)
        res = run_experiment(cfg)
        out = res.out_dir
        header, rows = read_csv(out / "trace.csv")
        assert header == ["t", "i", "alpha", "beta", "gamma", "x_0", "x_1", "q_0", "q_1", "cost", "g_0", "g_1"]
        assert len(rows) == 60 * 3
        assert all(math.isfinite(float(v)) for row in rows for v in row)
        header, rows = read_csv(out / "metrics.csv")
        assert header == ["t", "reg_dyn_over_t", "violation_over_t", "regret_bound", "violation_bound"]
        assert [int(r[0]) for r in rows] == [10, 20, 40, 60]
        for r in rows:
            assert all(math.isfinite(float(v)) for v in r)
            assert float(r[1]) * int(r[0]) <= float(r[3])
            assert float(r[2]) * int(r[0]) <= float(r[4])
        summary = read_summary(out / "summary.txt")
        assert summary["config.seed"] == "4" and summary["config.n"] == "3"
        assert float(summary["constants.F"]) > 0 and "constants.C1" in summary
        assert float(summary["oracle.stationarity_max"]) <= 1e-6
        assert (out / "instance.trace").exists() and (out / "graphs.txt").exists()

    def test_trace_matches_engine(self, cfg_file):
        cfg = ExperimentConfig.from_file(cfg_file)
        res = run_experiment(cfg)
        _, rows = read_csv(res.out_dir / "trace.csv")
        X = res.trace.decisions
        for row in rows[::17]:
            t, i = int(row[0]), int(row[1])
            assert [float(v) for v in row[5:7]] == X[t - 1, i].tolist()

    def test_static_comparator_column(self, tmp_path):
        cfg = ExperimentConfig(n=3, m=2, p=2, T=40, slack=5.0, seed=2, comparators=("dynamic", "static"),
                               checkpoints=(10, 40), out_dir=str(tmp_path / "o"))
        res = run_experiment(cfg)
        header, rows = read_csv(res.out_dir / "metrics.csv")
        assert header[2] == "reg_static_over_t"
        for r in rows:
            assert float(r[2]) <= float(r[1])

    def test_deterministic_bytes(self, cfg_file, tmp_path):
        cfg = ExperimentConfig.from_file(cfg_file)
        a = run_experiment(cfg, tmp_path / "a").out_dir
        b = run_experiment(cfg, tmp_path / "b").out_dir
        for name in ("trace.csv", "metrics.csv", "instance.trace", "graphs.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("config.out_dir")]
        assert strip(a / "summary.txt") == strip(b / "summary.txt")

    def test_slater_without_interior_is_a_config_error(self, tmp_path):
        cfg = ExperimentConfig(n=3, m=2, p=2, T=30, schedule="slater", out_dir=str(tmp_path))
        with pytest.raises(ConfigError, match="interior"):
            run_experiment(cfg)

    def test_slater_with_slack(self, tmp_path):
        cfg = ExperimentConfig(n=3, m=2, p=2, T=30, schedule="slater", slack=3.0, checkpoints=(30,),
                               out_dir=str(tmp_path))
        res = run_experiment(cfg)
        assert res.summary["regime"] == "slater-dynamic"
        assert float(res.summary["constants.epsilon"]) > 0


class TestReplay:
    def test_fresh_trace_passes(self, cfg_file):
        cfg = ExperimentConfig.from_file(cfg_file)
        out = run_experiment(cfg).out_dir
        report = replay(out / "trace.csv", cfg)
        assert report and report.rows_checked == 180

    def test_perturbed_value_fails_at_row(self, cfg_file):
        cfg = ExperimentConfig.from_file(cfg_file)
        out = run_experiment(cfg).out_dir
        lines = (out / "trace.csv").read_text().splitlines()
        target = next(k for k, line in enumerate(lines) if line.startswith("5,1,"))
        cells = lines[target].split(",")
        cells[5] = repr(float(cells[5]) + 1e-9)
        lines[target] = ",".join(cells)
        (out / "trace.csv").write_text("\n".join(lines) + "\n")
        report = replay(out / "trace.csv", cfg)
        assert not report
        assert (report.t, report.i, report.column) == (5, 1, "x_0")
        assert "t=5, i=1" in str(report)

    def test_other_seed_fails_at_first_round(self, cfg_file, tmp_path):
        cfg = ExperimentConfig.from_file(cfg_file)
        other = run_experiment(cfg.replace(seed=5), tmp_path / "other").out_dir
        report = replay(other / "trace.csv", cfg)
        assert not report and report.t == 1

    def test_other_seed_without_instance_file_fails_at_first_round(self, cfg_file, tmp_path):
        cfg = ExperimentConfig.from_file(cfg_file)
        other = run_experiment(cfg.replace(seed=5), tmp_path / "other").out_dir
        (other / "instance.trace").unlink()
        (other / "graphs.txt").unlink()
        report = replay(other / "trace.csv", cfg)
        assert not report and report.t == 1

    def test_truncated_trace(self, cfg_file):
        cfg = ExperimentConfig.from_file(cfg_file)
        out = run_experiment(cfg).out_dir
        lines = (out / "trace.csv").read_text().splitlines()
        (out / "trace.csv").write_text("\n".join(lines[:-3]) + "\n")
        report = replay(out / "trace.csv", cfg)
        assert not report and "ends before" in report.message


class TestSweep:
    def test_kappa_sweep(self, tmp_path):
        cfg = ExperimentConfig(n=3, m=2, p=2, T=120, seed=3, out_dir=str(tmp_path))
        table = sweep(cfg, "kappa", [0.3, 0.7], max_workers=2)
        header, rows = read_csv(table)
        assert header == ["kappa", "T", "reg_dyn_over_t", "violation_over_t"]
        assert [(float(r[0]), int(r[1])) for r in rows] == [(0.3, 100), (0.7, 100)]
        assert (tmp_path / "kappa_0.3" / "metrics.csv").exists()
        assert (tmp_path / "kappa_0.7" / "metrics.csv").exists()

    def test_parallel_equals_serial(self, tmp_path):
        cfg = ExperimentConfig(n=3, m=2, p=2, T=50, seed=3)
        a = sweep(cfg, "kappa", [0.2, 0.6], out_dir=tmp_path / "a", max_workers=2)
        b = sweep(cfg, "kappa", [0.2, 0.6], out_dir=tmp_path / "b", max_workers=1)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_unknown_param(self, tmp_path):
        with pytest.raises(ConfigError):
            sweep(ExperimentConfig(out_dir=str(tmp_path)), "zeta9", [1.0])


class TestCli:
    def test_run_and_replay(self, cfg_file, tmp_path, capsys):
        assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "r")]) == EXIT_OK
        assert "Reg_dyn/T" in capsys.readouterr().out
        assert main(["replay", "--trace", str(tmp_path / "r" / "trace.csv"), "--config", str(cfg_file)]) == EXIT_OK
        assert "pass" in capsys.readouterr().out

    def test_seed_override_breaks_replay(self, cfg_file, tmp_path, capsys):
        assert main(["run", "--config", str(cfg_file), "--seed", "9", "--out", str(tmp_path / "r")]) == EXIT_OK
        code = main(["replay", "--trace", str(tmp_path / "r" / "trace.csv"), "--config", str(cfg_file)])
        assert code == EXIT_VERIFY
        assert "FAIL" in capsys.readouterr().out

    def test_check_graph(self, cfg_file, capsys):
        assert main(["check-graph", "--config", str(cfg_file)]) == EXIT_OK
        assert "pass" in capsys.readouterr().out

    def test_sweep_command(self, cfg_file, tmp_path):
        code = main(["sweep", "--config", str(cfg_file), "--param", "kappa", "--values", "0.4", "0.6",
                     "--out", str(tmp_path / "s"), "--jobs", "1"])
        assert code == EXIT_OK and (tmp_path / "s" / "sweep_kappa.csv").exists()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[instance]\nwhat = 1\n")
        assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err
        assert main(["run", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG

    def test_malformed_instance_trace_exit_code(self, cfg_file, tmp_path):
        assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "r")]) == EXIT_OK
        (tmp_path / "r" / "instance.trace").write_text("garbage\n")
        code = main(["replay", "--trace", str(tmp_path / "r" / "trace.csv"), "--config", str(cfg_file)])
        assert code == EXIT_IO

    def test_malformed_graph_file_exit_code(self, cfg_file, tmp_path):
        assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "r")]) == EXIT_OK
        (tmp_path / "r" / "graphs.txt").write_text("n 3\nround 2\n")
        code = main(["replay", "--trace", str(tmp_path / "r" / "trace.csv"), "--config", str(cfg_file)])
        assert code == EXIT_IO

    def test_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["launch"])
        assert err.value.code == 2

    def test_module_entry_point(self, cfg_file):
        proc = subprocess.run([sys.executable, "-m", "dpdmd.cli", "check-graph", "--config", str(cfg_file)],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and "pass" in proc.stdout


def test_build_problem_placement():
    cfg = ExperimentConfig(n=2, m=1, p=2, T=5, regularization="folded")
    assert build_problem(cfg).placement == "folded"
    assert np.array_equal(build_problem(cfg).instance.pi, build_problem(cfg.replace(rho=0.9)).instance.pi)
