import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import signal

from conftest import BENCH_CONFIG, bench_fit_kwargs
from gplfm import bench
from gplfm.bench import band_power, preprocess, run_experiment, simulate_truth
from gplfm.calibration import count_local_minima, tune_measurement_noise
from gplfm.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from gplfm.config import ConfigError, load_config, parse_config
from gplfm.structural import modal_decompose

SMALL = """\
schema_version = 1
seed = 7
output_dir = "unused"
emit_gnuplot = true

[model]
kind = "chain"
n = 3
mass = 200.0
stiffness = 5000.0
damping_ratio = 0.02

[load.harmonic]
amplitude = 100.0
frequency = 0.2
dof = 3

[load.gp]
alpha = 50.0
length_scale = 1.0

[simulation]
dt = 0.01
duration = 120.0

[sensors]
fs = 10.0
noise_var = 1e-2
channels = "all_accelerations"

[estimator]
n_modes = 2
grid = [5, 5]
report_dof = 2

[[variants]]
name = "unperturbed"

[[variants]]
name = "soft"
stiffness_scale = 0.5
"""


def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


class TestPreprocess:
    def test_dc_removed(self):
        rec = preprocess(np.full(5000, 3.0), 50.0)
        assert np.abs(rec.processed).max() < 3.0 * 1e-3
        np.testing.assert_array_equal(rec.raw, 3.0)

    def test_near_dc_attenuation(self):
        sos = signal.butter(6, [0.12, 10.0], btype="bandpass", fs=50.0, output="sos")
        _, h = signal.sosfreqz(sos, worN=[0.005, 0.01], fs=50.0)
        # forward-backward squares the magnitude
        assert np.all(20 * np.log10(np.abs(h) ** 2) < -60)

    def test_in_band_sinusoid(self):
        fs, a = 50.0, 2.0
        t = np.arange(int(600 * fs)) / fs
        x = a * np.sin(2 * np.pi * 1.0 * t + 0.3)
        y = preprocess(x, fs).processed
        mid = slice(len(t) // 4, 3 * len(t) // 4)
        assert np.abs(y[mid] - x[mid]).max() < 0.01 * a
        lags = signal.correlation_lags(len(t), len(t))
        assert lags[np.argmax(signal.correlate(y, x))] == 0

    def test_out_of_band_sinusoid(self):
        fs = 50.0
        t = np.arange(int(600 * fs)) / fs
        y = preprocess(np.sin(2 * np.pi * 18.0 * t), fs).processed
        assert np.abs(y[1000:-1000]).max() < 1e-2

    def test_multichannel_and_metadata(self):
        x = np.random.default_rng(0).standard_normal((2000, 3))
        rec = preprocess(x, 50.0, labels=("a", "b", "c"), metadata={"state": "idling"})
        assert rec.processed.shape == (2000, 3)
        assert rec.labels == ("a", "b", "c") and rec.metadata["state"] == "idling"
        np.testing.assert_array_equal(preprocess(x, 50.0).processed, rec.processed)

    @pytest.mark.parametrize("band", [(0.0, 10.0), (5.0, 1.0), (0.12, 25.0), (0.12, 30.0)])
    def test_band_errors(self, band):
        with pytest.raises(ValueError, match="band"):
            preprocess(np.zeros(100), 50.0, band)


class TestConfig:
    def test_benchmark_file(self):
        cfg = load_config(BENCH_CONFIG)
        assert cfg.model.n == 10 and cfg.dt == 0.001 and cfg.duration == 600.0
        assert cfg.harmonic.dof == 9  # 1-based in the file
        assert cfg.estimator.report_dof == 4
        assert [v.name for v in cfg.variants] == ["unperturbed", "damping_low", "damping_high",
                                                  "noise_low", "noise_high", "stiffness_mass",
                                                  "noise_tuning"]
        assert len(cfg.digest) == 64

    def test_digest_tracks_content(self):
        a = parse_config(SMALL)
        assert a.digest == parse_config(SMALL).digest
        assert a.digest != parse_config(SMALL.replace("seed = 7", "seed = 8")).digest

    def test_wrong_type_reports_line(self):
        text = SMALL.replace("mass = 200.0", 'mass = "heavy"')
        with pytest.raises(ConfigError, match=r"^cfg\.toml:9: model\.mass: expected float"):
            parse_config(text, "cfg.toml")

    def test_unknown_key_reports_line(self):
        text = SMALL.replace("n_modes = 2", "n_modes = 2\nn_mode = 3")
        with pytest.raises(ConfigError, match=r"^cfg\.toml:33: estimator\.n_mode: unknown key"):
            parse_config(text, "cfg.toml")

    def test_zero_index_rejected(self):
        with pytest.raises(ConfigError, match="1-based"):
            parse_config(SMALL.replace("dof = 3", "dof = 0"))

    def test_index_out_of_range(self):
        with pytest.raises(ConfigError, match="exceeds 3"):
            parse_config(SMALL.replace("report_dof = 2", "report_dof = 4"))

    def test_syntax_error(self):
        with pytest.raises(ConfigError, match="TOML syntax"):
            parse_config("schema_version = = 1", "x.toml")

    def test_schema_version(self):
        with pytest.raises(ConfigError, match="missing schema_version"):
            parse_config(SMALL.replace("schema_version = 1\n", ""))
        with pytest.raises(ConfigError, match="unsupported version 2"):
            parse_config(SMALL.replace("schema_version = 1", "schema_version = 2"))

    def test_rate_must_divide(self):
        with pytest.raises(ConfigError, match="divide"):
            parse_config(SMALL.replace("fs = 10.0", "fs = 30.0"))

    def test_sensor_slower_than_simulation(self):
        with pytest.raises(ConfigError, match="shorter than the simulation step"):
            parse_config(SMALL.replace("fs = 10.0", "fs = 1000.0"))

    def test_duplicate_variant(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(SMALL.replace('name = "soft"', 'name = "unperturbed"'))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.toml")


class TestHelpers:
    def test_band_power_of_sinusoid(self):
        fs = 100.0
        t = np.arange(2**16) / fs
        x = 3.0 * np.sin(2 * np.pi * 0.4 * t)
        assert band_power(x, fs, 0.4) == pytest.approx(4.5, rel=0.02)
        assert band_power(x, fs, 2.0) < 1e-6

    def test_local_minima_count(self):
        a, b = np.meshgrid(np.linspace(-1, 1, 9), np.linspace(-1, 1, 9), indexing="ij")
        assert count_local_minima(a**2 + b**2) == 1
        assert count_local_minima((a**2 - 0.5) ** 2 + b**2) == 2
        D = a**2 + b**2
        D[0, 0] = np.nan
        assert count_local_minima(D) == 1

    def test_truth_seeded(self, small_cfg):
        cfg = load_config(small_cfg)
        a, b = simulate_truth(cfg), simulate_truth(cfg)
        np.testing.assert_array_equal(a.data.values, b.data.values)
        np.testing.assert_array_equal(a.response.u, b.response.u)
        assert a.data.values.shape == (1201, 3)

    def test_failed_variant_recorded(self, small_cfg, tmp_path, monkeypatch):
        cfg = load_config(small_cfg)
        inner = bench._run_variant

        def flaky(cfg, variant, truth, out_dir):
            if variant.name == "soft":
                raise FloatingPointError("synthetic failure")
            return inner(cfg, variant, truth, out_dir)

        monkeypatch.setattr(bench, "_run_variant", flaky)
        rep = run_experiment(cfg, tmp_path / "run")
        assert [r.ok for r in rep.results] == [True, False]
        assert "synthetic failure" in (tmp_path / "run" / "soft" / "error.txt").read_text()
        rows = _read(tmp_path / "run" / "summary.csv")
        assert [r[1] for r in rows[1:]] == ["ok", "failed"]
        assert (tmp_path / "run" / "unperturbed" / "response.csv").exists()

    def test_parallel_matches_serial(self, small_cfg, tmp_path):
        cfg = load_config(small_cfg)
        run_experiment(cfg, tmp_path / "s")
        par = parse_config(small_cfg.read_text().replace("emit_gnuplot", "workers = 2\nemit_gnuplot"))
        run_experiment(par, tmp_path / "p")
        for name in ("summary.csv", "band_power.csv", "unperturbed/response.csv"):
            assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


class TestCli:
    def test_simulate(self, small_cfg, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--config", str(small_cfg), "--out", str(out)]) == EXIT_OK
        rows = _read(out / "truth.csv")
        assert rows[0][:2] == ["t", "u_u1"] and len(rows) == 1202
        man = json.loads((out / "simulate_manifest.json").read_text())
        assert man["seed"] == 7 and man["config_sha256"] == load_config(small_cfg).digest
        assert (out / "measurements.csv").exists() and (out / "forces.csv").exists()

    def test_fit_with_grid(self, small_cfg, tmp_path):
        out = tmp_path / "fit"
        assert main(["fit", "--config", str(small_cfg), "--out", str(out), "--grid", "4x6"]) == EXIT_OK
        assert len(_read(out / "fit_surface.csv")) == 1 + 24
        theta = _read(out / "theta.csv")
        assert theta[0][:2] == ["alpha", "length_scale"] and float(theta[1][0]) > 0

    def test_fit_from_data_file(self, small_cfg, tmp_path):
        main(["simulate", "--config", str(small_cfg), "--out", str(tmp_path / "sim")])
        out = tmp_path / "fit"
        code = main(["fit", "--config", str(small_cfg), "--out", str(out),
                     "--data", str(tmp_path / "sim" / "measurements.csv")])
        assert code == EXIT_OK
        # same data as the built-in simulation, so the same fit
        main(["fit", "--config", str(small_cfg), "--out", str(tmp_path / "fit2")])
        assert (out / "theta.csv").read_bytes() == (tmp_path / "fit2" / "theta.csv").read_bytes()

    def test_estimate(self, small_cfg, tmp_path):
        out = tmp_path / "est"
        assert main(["estimate", "--config", str(small_cfg), "--out", str(out)]) == EXIT_OK
        head = _read(out / "displacement.csv")[0]
        assert head == ["t", "d_u1_mean", "d_u1_sd", "d_u2_mean", "d_u2_sd", "d_u3_mean",
                        "d_u3_sd"]
        assert (out / "modal_force.csv").exists()

    def test_experiment(self, small_cfg, tmp_path):
        out = tmp_path / "exp"
        assert main(["experiment", "--config", str(small_cfg), "--out", str(out)]) == EXIT_OK
        for name in ("summary.csv", "hyperparameter_shift.csv", "band_power.csv",
                     "fatigue_metrics.csv", "manifest.json", "plots.gp",
                     "unperturbed/response.csv", "soft/spectra.csv", "soft/sn_curve.csv"):
            assert (out / name).exists(), name
        shift = _read(out / "hyperparameter_shift.csv")
        assert shift[1][0] == "unperturbed" and float(shift[1][3]) == 0.0

    @pytest.mark.parametrize("grid", ["25", "axb", "1x5"])
    def test_bad_grid(self, small_cfg, tmp_path, grid, capsys):
        code = main(["fit", "--config", str(small_cfg), "--out", str(tmp_path), "--grid", grid])
        assert code == EXIT_CONFIG
        assert "--grid" in capsys.readouterr().err

    def test_config_error_exit(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text(SMALL.replace("stiffness = 5000.0", "stiffness = -1.0"))
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "bad.toml:10: model.stiffness: must be positive" in capsys.readouterr().err

    def test_missing_config_exit(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG

    def test_numeric_failure_exit(self, tmp_path, capsys):
        # two noiseless sensors on one dof give a singular output covariance
        text = SMALL.replace('channels = "all_accelerations"',
                             'channels = [{kind = "acceleration", dof = 1}, '
                             '{kind = "acceleration", dof = 1}]')
        text = text.replace("noise_var = 1e-2", "noise_var = 0.0")
        p = tmp_path / "singular.toml"
        p.write_text(text)
        assert main(["fit", "--config", str(p), "--out", str(tmp_path)]) == EXIT_NUMERIC
        assert "singular" in capsys.readouterr().err
        assert main(["experiment", "--config", str(p), "--out", str(tmp_path / "e")]) == EXIT_NUMERIC

    def test_fatigue(self, tmp_path):
        rng = np.random.default_rng(4)
        t = np.arange(500) * 0.1
        x = rng.standard_normal(500).cumsum()
        np.savetxt(tmp_path / "true.csv", np.column_stack([t, x]), delimiter=",",
                   header="t,force", comments="")
        np.savetxt(tmp_path / "est.csv", np.column_stack([t, 1.1 * x]), delimiter=",",
                   header="t,force", comments="")
        out = tmp_path / "fat"
        code = main(["fatigue", "--estimate", str(tmp_path / "est.csv"), "--truth",
                     str(tmp_path / "true.csv"), "--m", "4", "--out", str(out)])
        assert code == EXIT_OK
        rows = _read(out / "metrics.csv")
        assert rows[0] == ["channel", "CC", "MRE", "DEL", "DEL_error_pct"]
        assert float(rows[1][1]) == pytest.approx(1.0)
        assert float(rows[1][4]) == pytest.approx(10.0, rel=1e-9)  # DEL scales linearly
        assert (out / "cycles.csv").exists() and (out / "sn_curve.csv").exists()

    def test_fatigue_unknown_column(self, tmp_path):
        np.savetxt(tmp_path / "a.csv", np.ones((5, 2)), delimiter=",", header="t,x", comments="")
        code = main(["fatigue", "--estimate", str(tmp_path / "a.csv"), "--truth",
                     str(tmp_path / "a.csv"), "--column", "y", "--out", str(tmp_path)])
        assert code == EXIT_CONFIG

    def test_preprocess(self, tmp_path):
        fs = 50.0
        t = np.arange(3000) / fs
        x = 5.0 + np.sin(2 * np.pi * t)
        np.savetxt(tmp_path / "raw.csv", np.column_stack([t, x]), delimiter=",",
                   header="t,acc", comments="")
        out = tmp_path / "f" / "clean.csv"
        assert main(["preprocess", "--input", str(tmp_path / "raw.csv"), "--output", str(out)]) == EXIT_OK
        y = np.loadtxt(out, delimiter=",", skiprows=1)
        np.testing.assert_array_equal(y[:, 0], t)
        mid = slice(1000, 2000)
        assert np.abs(y[mid, 1] - np.sin(2 * np.pi * t[mid])).max() < 0.02
        assert main(["preprocess", "--input", str(tmp_path / "raw.csv"), "--output", str(out),
                     "--band", "0.12", "30"]) == EXIT_CONFIG

    def test_preprocess_needs_rate(self, tmp_path):
        np.savetxt(tmp_path / "raw.csv", np.ones((50, 1)), delimiter=",", header="acc", comments="")
        code = main(["preprocess", "--input", str(tmp_path / "raw.csv"), "--output",
                     str(tmp_path / "o.csv")])
        assert code == EXIT_CONFIG

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "gplfm.cli", "--help"], capture_output=True,
                           text=True)
        assert r.returncode == 0
        for cmd in ("simulate", "fit", "estimate", "experiment", "fatigue", "preprocess"):
            assert cmd in r.stdout


def _unperturbed_spectra(report):
    arr = np.loadtxt(report.out_dir / "unperturbed" / "spectra.csv", delimiter=",", skiprows=1)
    return arr[:, 0], arr[:, 1], arr[:, 2]


class TestBenchmarkProperties:
    def test_high_frequency_fidelity_lost(self, bench_cfg, bench_report):
        f, P_true, P_est = _unperturbed_spectra(bench_report)
        hi = f > 0.6
        assert P_est[hi].sum() / P_true[hi].sum() < 0.5
        # the fourth natural frequency lies outside the retained modal basis
        f4 = modal_decompose(bench.build_structure(bench_cfg), 4).frequencies_hz[3]
        at = np.argmin(np.abs(f - f4))
        assert P_est[at] / P_true[at] < 0.5

    def test_retained_band_preserved(self, bench_report):
        f, P_true, P_est = _unperturbed_spectra(bench_report)
        lo = (f > 0.05) & (f < 0.55)
        assert P_est[lo].sum() / P_true[lo].sum() == pytest.approx(1.0, abs=0.1)

    @pytest.mark.xfail(strict=True, reason="truncated higher modes inflate the residual "
                                           "variance by ~11% at the true noise level")
    def test_noise_tuning_fixed_point(self, bench_cfg, bench_truth, bench_setup):
        rep = tune_measurement_noise(bench_setup, bench_truth[0].data, bench_cfg.sensors.noise_var,
                                     tol=1e-9, max_iter=1, fit_kwargs=bench_fit_kwargs(bench_cfg))
        assert rep.changes[0] < 0.1

    @pytest.mark.xfail(strict=True, reason="benchmark Hellinger surface has shallow secondary "
                                           "minima along the alpha-l_s ridge")
    def test_unique_grid_minimum(self, bench_report):
        arr = np.loadtxt(bench_report.out_dir / "unperturbed" / "fit_surface.csv", delimiter=",",
                         skiprows=1)
        assert count_local_minima(arr[:, 2].reshape(25, 25)) == 1

    @pytest.mark.xfail(strict=True, reason="innovations carry truncated-mode content; lag-1 "
                                           "autocorrelation ~0.15-0.18")
    def test_innovation_whiteness(self, bench_report):
        assert bench_report.by_name("unperturbed").metrics["whiteness_max"] < 0.1
