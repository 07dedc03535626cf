"""Command-line harness: subcommands, CSV round-trips, flag precedence."""

import numpy as np
import pytest

import mcadjoint.cli as cli
import mcadjoint.model as mdl
from mcadjoint.optimizer import read_trace_csv


@pytest.fixture()
def market_file(tmp_path):
    spec, curve = mdl.default_fixture()
    path = tmp_path / "market.cfg"
    mdl.save_market_file(path, spec, curve)
    return path


def run_config(tmp_path, market_file, **overrides):
    base = dict(subcommand="test", spec_path=str(market_file),
                algorithms=[1, 2, 3], n_mc_list=[400, 900], seed=11,
                batch_width=4, threads=1, out_dir=str(tmp_path / "out"),
                repeats=1, max_iter=3)
    base.update(overrides)
    return cli.RunConfig(**base)


class TestVarianceTable:
    def test_row_and_column_shape(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file)
        paths = cli.cmd_variance_table(cfg)
        assert len(paths) == 3  # one CSV per algorithm
        total_rows = 0
        for p in paths:
            header, rows = cli.read_csv_table(p)
            assert len(header) == 2 + 5  # n_mc, time, five variances
            total_rows += len(rows)
        assert total_rows == 6

    def test_variance_decreases_with_paths(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, n_mc_list=[2000, 20000],
                         algorithms=[1])
        (path,) = cli.cmd_variance_table(cfg)
        _, rows = cli.read_csv_table(path)
        small, large = rows
        assert all(lv < sv for sv, lv in zip(small[2:], large[2:]))

    def test_reparseable_roundtrip(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, algorithms=[2])
        (path,) = cli.cmd_variance_table(cfg)
        header, rows = cli.read_csv_table(path)
        assert rows[0][0] == 400.0
        assert all(np.isfinite(v) for row in rows for v in row)


class TestGradient:
    def test_one_row_per_algorithm(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, n_mc_list=[2000])
        path = cli.cmd_gradient(cfg)
        header, rows = cli.read_csv_table(path)
        assert len(rows) == 3
        assert [int(r[0]) for r in rows] == [1, 2, 3]
        assert len(header) == 2 + 5

    def test_single_algorithm_single_row(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, algorithms=[3], n_mc_list=[800])
        path = cli.cmd_gradient(cfg)
        _, rows = cli.read_csv_table(path)
        assert len(rows) == 1

    def test_seed_reproducibility(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, n_mc_list=[1500])
        a = cli.read_csv_table(cli.cmd_gradient(cfg))
        b = cli.read_csv_table(cli.cmd_gradient(cfg))
        for ra, rb in zip(a[1], b[1]):
            assert ra[2:] == rb[2:]  # identical gradients, timing aside


class TestCalibrate:
    def test_trace_per_algorithm_and_nmc(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, algorithms=[3],
                         n_mc_list=[400, 900], max_iter=2)
        paths = cli.cmd_calibrate(cfg)
        assert len(paths) == 2
        for p in paths:
            trace = read_trace_csv(p)
            assert trace.records[0].iteration == 0

    def test_requested_iterations_present(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, algorithms=[1],
                         n_mc_list=[3000], max_iter=5)
        (path,) = cli.cmd_calibrate(cfg)
        trace = read_trace_csv(path)
        assert trace.records[-1].iteration == 5
        assert len(trace) == 6  # iteration 0 plus five steps

    def test_loss_decreases(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, algorithms=[1],
                         n_mc_list=[20000], max_iter=6)
        (path,) = cli.cmd_calibrate(cfg)
        trace = read_trace_csv(path)
        assert trace.records[-1].loss < trace.records[0].loss


class TestMeasureSpeedup:
    def test_degenerate_width_one(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, batch_width=1)
        path = cli.cmd_measure_speedup(cfg)
        header, rows = cli.read_csv_table(path)
        row = dict(zip(header, rows[0]))
        assert row["k_f"] == 1.0 and row["k_r"] == 1.0

    def test_width8_reports_finite_positive(self, tmp_path, market_file):
        cfg = run_config(tmp_path, market_file, batch_width=8,
                         n_mc_list=[4000], repeats=5)
        path = cli.cmd_measure_speedup(cfg)
        header, rows = cli.read_csv_table(path)
        row = dict(zip(header, rows[0]))
        assert row["k_f"] > 0 and np.isfinite(row["k_f"])
        assert row["k_r"] > 0 and np.isfinite(row["k_r"])
        assert row["k_f_spread"] >= 0.0


class TestArgumentHandling:
    def test_flags_beat_config_file(self, tmp_path, market_file):
        conf = tmp_path / "run.cfg"
        conf.write_text("seed = 5\nnmc = 600\nalg = 2\n")
        args = cli._build_parser().parse_args(
            ["gradient", "--config", str(conf), "--seed", "9"])
        cfg = cli._resolve(args)
        assert cfg.seed == 9            # flag wins
        assert cfg.n_mc_list == [600]   # file beats default
        assert cfg.algorithms == [2]

    def test_defaults_used_without_sources(self):
        args = cli._build_parser().parse_args(["variance-table"])
        cfg = cli._resolve(args)
        assert cfg.seed == 42
        assert cfg.algorithms == [1, 2, 3]
        assert cfg.batch_width == 8

    def test_nmc_scientific_notation(self):
        args = cli._build_parser().parse_args(["gradient", "--nmc", "1e3,2e3"])
        cfg = cli._resolve(args)
        assert cfg.n_mc_list == [1000, 2000]

    def test_unknown_config_key_rejected(self, tmp_path):
        conf = tmp_path / "run.cfg"
        conf.write_text("wibble = 3\n")
        args = cli._build_parser().parse_args(["gradient", "--config", str(conf)])
        with pytest.raises(ValueError, match="wibble"):
            cli._resolve(args)

    def test_invalid_nmc_rejected(self):
        with pytest.raises(ValueError, match="N_mc"):
            cli.RunConfig(subcommand="gradient", n_mc_list=[1])

    def test_invalid_algorithms_rejected(self):
        with pytest.raises(ValueError):
            cli.RunConfig(subcommand="gradient", algorithms=[4])

    def test_main_smoke(self, tmp_path, market_file, capsys):
        rc = cli.main(["gradient", "--spec", str(market_file),
                       "--alg", "1", "--nmc", "500", "--seed", "3",
                       "--repeats", "1", "--out", str(tmp_path / "o")])
        assert rc == 0
        assert (tmp_path / "o" / "gradient.csv").exists()

    def test_main_reports_missing_file(self, capsys):
        rc = cli.main(["gradient", "--spec", "/nonexistent/market.cfg"])
        assert rc == 1
        assert "error" in capsys.readouterr().err
