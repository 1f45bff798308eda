import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gplfm.lfm import GplfmSetup  # noqa: E402
from gplfm.structural import Sensor, assemble_chain, build_measurement, modal_decompose  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
BENCH_CONFIG = ROOT / "configs" / "chain10.toml"

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture(scope="session")
def chain10():
    """Ten-level chain with three retained modes and accelerometers at every level."""
    model = assemble_chain(10, 200.0, 5e3, 0.02)
    modal = modal_decompose(model, 3, 0.02)
    meas = build_measurement(model, modal, [Sensor("acceleration", dof=i) for i in range(10)])
    return model, modal, meas


@pytest.fixture(scope="session")
def chain10_setup(chain10):
    _, modal, meas = chain10
    return GplfmSetup(modal, meas, 0.01)


def sample_augmented(aug, n_steps, n_chains, seed):
    """Stationary draws of the discrete augmented recursion, shape (N, n_y, chains)."""
    rng = np.random.default_rng(seed)
    w, V = np.linalg.eigh(aug.P_inf)
    Lp = V * np.sqrt(np.clip(w, 0, None))
    w, V = np.linalg.eigh(aug.Q)
    Lq = V * np.sqrt(np.clip(w, 0, None))
    z = Lp @ rng.standard_normal((aug.dim, n_chains))
    Y = np.empty((n_steps, aug.n_outputs, n_chains))
    for k in range(n_steps):
        Y[k] = aug.H @ z
        z = aug.F @ z + Lq @ rng.standard_normal((aug.dim, n_chains))
    return Y


@pytest.fixture(scope="session")
def bench_cfg():
    from gplfm.config import load_config
    return load_config(BENCH_CONFIG)


@pytest.fixture(scope="session")
def bench_truth(bench_cfg):
    """Benchmark ground truth and the wall-clock seconds it took."""
    from gplfm.bench import simulate_truth
    t0 = time.perf_counter()
    truth = simulate_truth(bench_cfg)
    return truth, time.perf_counter() - t0


@pytest.fixture(scope="session")
def bench_report(bench_cfg, bench_truth, tmp_path_factory):
    """Every configured variant run once on the shared truth, with CSV output."""
    from gplfm.bench import run_experiment
    out = tmp_path_factory.mktemp("bench_a")
    return run_experiment(bench_cfg, out, truth=bench_truth[0])


@pytest.fixture(scope="session")
def bench_setup(bench_cfg, bench_truth):
    from gplfm.bench import build_sensors, build_structure
    model = build_structure(bench_cfg)
    modal = modal_decompose(model, bench_cfg.estimator.n_modes, bench_cfg.model.damping_ratio)
    meas = build_measurement(model, modal, build_sensors(bench_cfg))
    return GplfmSetup(modal, meas, bench_truth[0].data.dt, bench_cfg.estimator.nu)


def bench_fit_kwargs(cfg):
    e = cfg.estimator
    return dict(domain=(e.alpha_bounds, e.length_scale_bounds), grid=e.grid, refine=e.refine)
