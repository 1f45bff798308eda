"""Command-line entry point: ``gplfm <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import (build_sensors, build_structure, preprocess, run_experiment, run_variant,
                    simulate_truth, write_array_csv, write_csv)
from .calibration import CalibrationError, fit_hyperparameters
from .config import ConfigError, ExperimentConfig, load_config
from .estimator import EstimationError, MeasurementSet
from .fatigue import accuracy_metrics, damage_equivalent_load, rainflow, sn_histogram
from .kernels import ConditioningError, KernelError
from .lfm import GplfmSetup, ModelError
from .simulate import SimulationError
from .structural import StructuralError, build_measurement, modal_decompose

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

NUMERIC_ERRORS = (ArithmeticError, np.linalg.LinAlgError, CalibrationError, ConditioningError,
                  EstimationError, KernelError, ModelError, SimulationError, StructuralError)


class UsageError(Exception):
    pass


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, cfg: ExperimentConfig, command: str, extra=None):
    from . import __version__
    import platform
    import scipy
    doc = {"command": command, "version": __version__, "config_sha256": cfg.digest,
           "seed": cfg.seed, "python": platform.python_version(),
           "numpy": np.__version__, "scipy": scipy.__version__}
    doc.update(extra or {})
    (out / f"{command}_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_table(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"{path}: cannot read CSV table: {exc}") from exc
    if arr.shape[1] != len(header):
        raise UsageError(f"{path}: header has {len(header)} columns, data {arr.shape[1]}")
    return header, arr


def _measurements(cfg: ExperimentConfig, args) -> MeasurementSet:
    if getattr(args, "data", None):
        header, arr = _read_table(args.data)
        if header[0] in ("t", "time"):
            dt = float(np.median(np.diff(arr[:, 0])))
            header, arr = header[1:], arr[:, 1:]
        else:
            dt = 1.0 / cfg.sensors.fs
        kinds = tuple(c.kind for c in cfg.sensors.channels)
        if len(kinds) != arr.shape[1]:
            raise UsageError(f"data has {arr.shape[1]} channels, config defines {len(kinds)}")
        return MeasurementSet(arr, dt, kinds=kinds, labels=tuple(header))
    return simulate_truth(cfg).data


def _setup(cfg: ExperimentConfig, dt: float) -> GplfmSetup:
    model = build_structure(cfg)
    modal = modal_decompose(model, cfg.estimator.n_modes, cfg.model.damping_ratio)
    meas = build_measurement(model, modal, build_sensors(cfg))
    return GplfmSetup(modal, meas, dt, cfg.estimator.nu)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    truth = simulate_truth(cfg)
    t = truth.times
    labels = truth.model.dof_labels
    r = truth.response
    write_array_csv(out / "truth.csv",
                    ["t", *[f"u_{l}" for l in labels], *[f"v_{l}" for l in labels],
                     *[f"a_{l}" for l in labels]],
                    np.column_stack([t, r.u, r.v, r.a]))
    write_array_csv(out / "forces.csv", ["t", *[f"p_{l}" for l in labels]],
                    np.column_stack([t, truth.nodal_forces]))
    write_array_csv(out / "measurements.csv", ["t", *truth.data.labels],
                    np.column_stack([t, truth.data.values]))
    _manifest(out, cfg, "simulate")
    print(f"wrote {out}/truth.csv, forces.csv, measurements.csv")
    return EXIT_OK


def _parse_grid(text: str | None, default):
    if text is None:
        return default
    try:
        a, b = text.lower().split("x")
        g = (int(a), int(b))
    except ValueError:
        raise UsageError(f"--grid expects NAxNL, e.g. 25x25, got {text!r}") from None
    if min(g) < 2:
        raise UsageError("--grid needs at least 2 points per axis")
    return g


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    data = _measurements(cfg, args)
    grid = _parse_grid(args.grid, cfg.estimator.grid)
    fit = fit_hyperparameters(data, _setup(cfg, data.dt), max(cfg.sensors.noise_var, 1e-12),
                              domain=(cfg.estimator.alpha_bounds, cfg.estimator.length_scale_bounds),
                              grid=grid, refine=cfg.estimator.refine)
    write_array_csv(out / "fit_surface.csv", ["alpha", "length_scale", "hellinger"], fit.surface)
    write_csv(out / "theta.csv", ["alpha", "length_scale", "hellinger", "converged", "iterations"],
              [[fit.alpha, fit.length_scale, fit.distance, fit.converged, fit.iterations]])
    _manifest(out, cfg, "fit", {"grid": list(grid)})
    print(f"alpha* = {fit.alpha:.6g}, l_s* = {fit.length_scale:.6g}, distance = {fit.distance:.6g}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    truth = simulate_truth(cfg)
    if args.data:
        truth.data = _measurements(cfg, args)
    variant = cfg.variants[0]
    res, est = run_variant(cfg, variant, truth, out / variant.name)
    if not res.ok:
        raise ArithmeticError(res.message)
    for q, series in est.latents.items():
        cols, head = [truth.times[:est.n_steps]], ["t"]
        for j, lbl in enumerate(series.labels):
            cols += [series.mean[:, j], series.sd[:, j]]
            head += [f"{lbl}_mean", f"{lbl}_sd"]
        write_array_csv(out / f"{q}.csv", head, np.column_stack(cols))
    _manifest(out, cfg, "estimate", {"alpha": res.alpha, "length_scale": res.length_scale})
    print(f"estimates written to {out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    rep = run_experiment(cfg, out)
    for r in rep.results:
        status = "ok" if r.ok else f"FAILED ({r.message})"
        print(f"{r.name:16s} {status}")
    return EXIT_OK if all(r.ok for r in rep.results) else EXIT_NUMERIC


def _column(path, name):
    header, arr = _read_table(path)
    if name is None:
        idx = 1 if header[0] in ("t", "time") and len(header) > 1 else 0
    elif name in header:
        idx = header.index(name)
    else:
        raise UsageError(f"{path}: no column {name!r} (have {', '.join(header)})")
    return header[idx], arr[:, idx]


def cmd_fatigue(args) -> int:
    lbl, est = _column(args.estimate, args.column)
    _, tru = _column(args.truth, args.truth_column or args.column)
    if est.shape != tru.shape:
        raise UsageError("estimate and truth have different lengths")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    c_t, c_e = rainflow(tru), rainflow(est)
    d_t = damage_equivalent_load(c_t, args.m)
    d_e = damage_equivalent_load(c_e, args.m, c_t.total or None)
    acc = accuracy_metrics(est, tru)
    err = 100.0 * (d_e - d_t) / d_t if d_t > 0 else float("nan")
    write_csv(out / "metrics.csv", ["channel", "CC", "MRE", "DEL", "DEL_error_pct"],
              [[lbl, acc["CC"], acc["MRE"], d_e, err]])
    write_csv(out / "cycles.csv", ["range", "mean", "count"], c_e.as_tuples())
    top = max(c_t.ranges.max(initial=0.0), c_e.ranges.max(initial=0.0)) or 1.0
    e, n_e = sn_histogram(c_e, args.bins, top)
    _, n_t = sn_histogram(c_t, args.bins, top)
    write_array_csv(out / "sn_curve.csv", ["bin_edge", "cum_count_est", "cum_count_true"],
                    np.column_stack([e, n_e, n_t]))
    print(f"CC = {acc['CC']:.6f}, MRE = {acc['MRE']:.4f} %, DEL error = {err:.3f} %")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    header, arr = _read_table(args.input)
    if header[0] in ("t", "time"):
        t, header, arr = arr[:, 0], header[1:], arr[:, 1:]
        fs = args.fs or 1.0 / float(np.median(np.diff(t)))
    else:
        if args.fs is None:
            raise UsageError("--fs is required when the input has no time column")
        fs = args.fs
        t = np.arange(arr.shape[0]) / fs
    try:
        rec = preprocess(arr, fs, tuple(args.band), args.order, labels=header)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_array_csv(out, ["t", *header], np.column_stack([t, rec.processed]))
    print(f"filtered {arr.shape[1]} channel(s) to {rec.band[0]}-{rec.band[1]} Hz -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gplfm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="TOML configuration file")
        s.add_argument("--out", help="output directory (overrides output_dir)")
        return s

    with_config("simulate", "simulate ground truth and noisy measurements").set_defaults(func=cmd_simulate)
    s = with_config("fit", "fit GP hyperparameters by Hellinger distance")
    s.add_argument("--grid", help="grid size as NAxNL, e.g. 25x25")
    s.add_argument("--data", help="measurement CSV (default: simulate from the config)")
    s.set_defaults(func=cmd_fit)
    s = with_config("estimate", "fit, filter and smooth the first configured variant")
    s.add_argument("--data", help="measurement CSV (default: simulate from the config)")
    s.set_defaults(func=cmd_estimate)
    with_config("experiment", "run every configured variant").set_defaults(func=cmd_experiment)

    s = sub.add_parser("fatigue", help="rainflow, DEL and accuracy metrics from CSV series")
    s.add_argument("--estimate", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--column", help="column name (default: first non-time column)")
    s.add_argument("--truth-column", help="column name in the truth file if different")
    s.add_argument("--m", type=float, default=4.0, help="Woehler exponent (default 4)")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--out", help="output directory (default: current)")
    s.set_defaults(func=cmd_fatigue)

    s = sub.add_parser("preprocess", help="mean removal and zero-phase band-pass of a CSV record")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--fs", type=float, help="sampling rate in Hz (default: from time column)")
    s.add_argument("--band", type=float, nargs=2, default=(0.12, 10.0), metavar=("F_LO", "F_HI"))
    s.add_argument("--order", type=int, default=6)
    s.set_defaults(func=cmd_preprocess)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
