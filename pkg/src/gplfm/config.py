"""TOML experiment configuration with a versioned schema.

Levels, dofs and elements are numbered from 1 in the file, as engineers
count storeys; they are converted to 0-based indices on load.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message carries a line number when known."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "chain"
    n: int = 10
    mass: float = 200.0
    stiffness: float = 5e3
    damping_ratio: float = 0.02
    tip_mass: float = 0.0
    # beam only
    n_elements: int = 10
    element_length: float = 1.0
    EI: float = 1e6
    rhoA: float = 100.0
    half_depth: float = 0.1


@dataclass(frozen=True)
class HarmonicSpec:
    amplitude: float = 100.0
    frequency: float = 0.2
    dof: int = 9


@dataclass(frozen=True)
class GpLoadSpec:
    alpha: float = 50.0
    length_scale: float = 1.0
    nu: float = 2.5
    dofs: tuple[int, ...] | None = None  # None = every translational dof
    correlation: str = "shared"


@dataclass(frozen=True)
class ChannelSpec:
    kind: str
    dof: int | None = None
    element: int | None = None
    position: float = 0.5


@dataclass(frozen=True)
class SensorSpec:
    fs: float = 100.0
    noise_var: float = 1e-2
    channels: tuple[ChannelSpec, ...] = ()


@dataclass(frozen=True)
class NoiseTuneSpec:
    tol: float = 0.1
    max_iter: int = 5


@dataclass(frozen=True)
class EstimatorSpec:
    n_modes: int = 3
    nu: float = 2.5
    alpha_bounds: tuple[float, float] = (1e-3, 500.0)
    length_scale_bounds: tuple[float, float] = (1e-3, 10.0)
    grid: tuple[int, int] = (25, 25)
    refine: bool = True
    normalize: bool = True
    report_dof: int = 4
    process_noise: tuple[tuple[float, ...], ...] | None = None
    noise_tuning: NoiseTuneSpec = NoiseTuneSpec()


@dataclass(frozen=True)
class VariantSpec:
    name: str
    damping_scale: float = 1.0
    noise_scale: float = 1.0
    stiffness_scale: float = 1.0
    added_tip_mass: float = 0.0
    tune_noise: bool = False


@dataclass(frozen=True)
class FatigueSpec:
    m: float = 4.0
    bins: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = ModelSpec()
    harmonic: HarmonicSpec | None = HarmonicSpec()
    gp_load: GpLoadSpec | None = GpLoadSpec()
    dt: float = 0.001
    duration: float = 600.0
    sensors: SensorSpec = SensorSpec()
    estimator: EstimatorSpec = EstimatorSpec()
    variants: tuple[VariantSpec, ...] = (VariantSpec("unperturbed"),)
    fatigue: FatigueSpec = FatigueSpec()
    output_dir: str = "gplfm_out"
    seed: int = 0
    workers: int = 1
    emit_gnuplot: bool = True
    source_text: str = field(default="", repr=False, compare=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("source_text", None)
        return d


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


class _Reader:
    """Typed access to a TOML table that reports the offending line."""

    def __init__(self, table: dict, path: str, text: str, source: str):
        self.t = table
        self.path = path
        self.text = text
        self.source = source
        self.used: set[str] = set()

    def _line(self, key: str) -> int | None:
        section = self.path.split(".")[-1] if self.path else None
        lines = self.text.splitlines()
        in_section = section is None
        pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
        for i, ln in enumerate(lines, 1):
            s = ln.strip()
            if s.startswith("["):
                name = s.strip("[]").strip()
                in_section = section is None or name.split(".")[-1] == section
                continue
            if in_section and pat.match(ln):
                return i
        return None

    def fail(self, key: str, msg: str):
        line = self._line(key)
        where = f"{self.source}:{line}: " if line else f"{self.source}: "
        full = f"{self.path}.{key}" if self.path else key
        raise ConfigError(f"{where}{full}: {msg}")

    def get(self, key: str, typ, default):
        self.used.add(key)
        if key not in self.t:
            return default
        v = self.t[key]
        if typ is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, typ) or (typ in (int, float) and isinstance(v, bool)):
            self.fail(key, f"expected {getattr(typ, '__name__', typ)}, got {type(v).__name__}")
        return v

    def positive(self, key: str, typ, default, *, allow_zero: bool = False):
        v = self.get(key, typ, default)
        if v is not None and (v < 0 or (v == 0 and not allow_zero)):
            self.fail(key, "must be positive" if not allow_zero else "must be non-negative")
        return v

    def sub(self, key: str) -> "_Reader":
        self.used.add(key)
        v = self.t.get(key, {})
        if not isinstance(v, dict):
            self.fail(key, "expected a table")
        return _Reader(v, f"{self.path}.{key}" if self.path else key, self.text, self.source)

    def check_unknown(self):
        for k in self.t:
            if k not in self.used:
                self.fail(k, "unknown key")


def _index(r: _Reader, key: str, value, upper: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        r.fail(key, "indices are 1-based positive integers")
    if upper is not None and value > upper:
        r.fail(key, f"index {value} exceeds {upper}")
    return value - 1


def _pair(r: _Reader, key: str, default, typ=float):
    v = r.get(key, list, None)
    if v is None:
        return default
    if len(v) != 2 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        r.fail(key, "expected a two-element numeric array")
    return (typ(v[0]), typ(v[1]))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: TOML syntax error: {exc}") from exc
    root = _Reader(doc, "", text, source)
    ver = root.get("schema_version", int, None)
    if ver is None:
        raise ConfigError(f"{source}: missing schema_version")
    if ver != SCHEMA_VERSION:
        root.fail("schema_version", f"unsupported version {ver} (expected {SCHEMA_VERSION})")

    m = root.sub("model")
    kind = m.get("kind", str, "chain")
    if kind not in ("chain", "beam"):
        m.fail("kind", "must be 'chain' or 'beam'")
    model = ModelSpec(
        kind=kind,
        n=m.positive("n", int, 10),
        mass=m.positive("mass", float, 200.0),
        stiffness=m.positive("stiffness", float, 5e3),
        damping_ratio=m.positive("damping_ratio", float, 0.02, allow_zero=True),
        tip_mass=m.positive("tip_mass", float, 0.0, allow_zero=True),
        n_elements=m.positive("n_elements", int, 10),
        element_length=m.positive("element_length", float, 1.0),
        EI=m.positive("EI", float, 1e6),
        rhoA=m.positive("rhoA", float, 100.0),
        half_depth=m.positive("half_depth", float, 0.1),
    )
    if model.damping_ratio >= 1:
        m.fail("damping_ratio", "must be below 1")
    m.check_unknown()
    n_dofs = model.n if kind == "chain" else 2 * model.n_elements

    ld = root.sub("load")
    harmonic = gp = None
    if "harmonic" in ld.t:
        h = ld.sub("harmonic")
        harmonic = HarmonicSpec(h.get("amplitude", float, 100.0),
                                h.positive("frequency", float, 0.2),
                                _index(h, "dof", h.get("dof", int, n_dofs), n_dofs))
        h.check_unknown()
    else:
        ld.used.add("harmonic")
    if "gp" in ld.t:
        g = ld.sub("gp")
        nu = g.get("nu", float, 2.5)
        if nu not in (0.5, 1.5, 2.5):
            g.fail("nu", "must be 0.5, 1.5 or 2.5")
        dofs = g.get("dofs", (list, str), "all")
        if isinstance(dofs, str):
            if dofs != "all":
                g.fail("dofs", "expected 'all' or a list of 1-based dofs")
            dofs_t = None
        else:
            dofs_t = tuple(_index(g, "dofs", d, n_dofs) for d in dofs)
        corr = g.get("correlation", str, "shared")
        if corr not in ("shared", "independent"):
            g.fail("correlation", "must be 'shared' or 'independent'")
        gp = GpLoadSpec(g.positive("alpha", float, 50.0), g.positive("length_scale", float, 1.0),
                        nu, dofs_t, corr)
        g.check_unknown()
    else:
        ld.used.add("gp")
    ld.check_unknown()

    s = root.sub("simulation")
    dt = s.positive("dt", float, 0.001)
    duration = s.positive("duration", float, 600.0)
    s.check_unknown()

    se = root.sub("sensors")
    fs = se.positive("fs", float, 100.0)
    if dt > 1.0 / fs * (1 + 1e-12):
        se.fail("fs", f"sensor interval {1 / fs} s is shorter than the simulation step {dt} s")
    ratio = 1.0 / (fs * dt)
    if abs(ratio - round(ratio)) > 1e-9 * ratio:
        se.fail("fs", "sensor rate must divide the simulation rate")
    raw = se.get("channels", (list, str), "all_accelerations")
    if isinstance(raw, str):
        if raw != "all_accelerations":
            se.fail("channels", "expected 'all_accelerations' or a list of channel tables")
        if kind != "chain":
            se.fail("channels", "'all_accelerations' is only defined for chain models")
        chans = tuple(ChannelSpec("acceleration", i) for i in range(n_dofs))
    else:
        out = []
        for c in raw:
            if not isinstance(c, dict) or "kind" not in c:
                se.fail("channels", "each channel needs a 'kind'")
            ck = c["kind"]
            if ck not in ("acceleration", "displacement", "strain"):
                se.fail("channels", f"unknown channel kind {ck!r}")
            if ck == "strain":
                if kind != "beam":
                    se.fail("channels", "strain channels need a beam model")
                el = _index(se, "channels", c.get("element"), model.n_elements)
                pos = float(c.get("position", 0.5))
                if not 0 <= pos <= 1:
                    se.fail("channels", "strain position must lie in [0, 1]")
                out.append(ChannelSpec("strain", element=el, position=pos))
            else:
                out.append(ChannelSpec(ck, dof=_index(se, "channels", c.get("dof"), n_dofs)))
        if not out:
            se.fail("channels", "at least one channel is required")
        chans = tuple(out)
    sensors = SensorSpec(fs, se.positive("noise_var", float, 1e-2, allow_zero=True), chans)
    se.check_unknown()

    e = root.sub("estimator")
    n_modes = e.positive("n_modes", int, 3)
    if n_modes > n_dofs:
        e.fail("n_modes", f"cannot exceed the {n_dofs} model dofs")
    enu = e.get("nu", float, 2.5)
    if enu not in (0.5, 1.5, 2.5):
        e.fail("nu", "must be 0.5, 1.5 or 2.5")
    ab = _pair(e, "alpha_bounds", (1e-3, 500.0))
    lb = _pair(e, "length_scale_bounds", (1e-3, 10.0))
    for key, (lo, hi) in (("alpha_bounds", ab), ("length_scale_bounds", lb)):
        if lo <= 0 or hi <= lo:
            e.fail(key, "need 0 < lower < upper")
    grid = _pair(e, "grid", (25, 25), int)
    if min(grid) < 2:
        e.fail("grid", "need at least 2 points per axis")
    qx = e.get("process_noise", list, None)
    if qx is not None:
        size = 2 * n_modes
        if len(qx) != size or any(not isinstance(r_, list) or len(r_) != size for r_ in qx):
            e.fail("process_noise", f"expected a {size}x{size} matrix")
        qx = tuple(tuple(float(v) for v in r_) for r_ in qx)
    nt = e.sub("noise_tuning")
    tune = NoiseTuneSpec(nt.positive("tol", float, 0.1), nt.positive("max_iter", int, 5))
    nt.check_unknown()
    report = e.get("report_dof", int, min(5, n_dofs))
    estimator = EstimatorSpec(n_modes, enu, ab, lb, grid, e.get("refine", bool, True),
                              e.get("normalize", bool, True),
                              _index(e, "report_dof", report, n_dofs), qx, tune)
    e.check_unknown()

    variants = []
    raw_v = root.get("variants", list, [{"name": "unperturbed"}])
    names = set()
    for v in raw_v:
        vr = _Reader(v, "variants", text, source)
        name = vr.get("name", str, None)
        if not name or not re.fullmatch(r"[A-Za-z0-9_\-]+", name):
            vr.fail("name", "variant needs a name made of letters, digits, '_' or '-'")
        if name in names:
            vr.fail("name", f"duplicate variant name {name!r}")
        names.add(name)
        variants.append(VariantSpec(
            name,
            vr.positive("damping_scale", float, 1.0),
            vr.positive("noise_scale", float, 1.0),
            vr.positive("stiffness_scale", float, 1.0),
            vr.positive("added_tip_mass", float, 0.0, allow_zero=True),
            vr.get("tune_noise", bool, False)))
        vr.check_unknown()
    if not variants:
        root.fail("variants", "at least one variant is required")

    f = root.sub("fatigue")
    fat = FatigueSpec(f.positive("m", float, 4.0), f.positive("bins", int, 50))
    f.check_unknown()

    cfg = ExperimentConfig(
        model=model, harmonic=harmonic, gp_load=gp, dt=dt, duration=duration,
        sensors=sensors, estimator=estimator, variants=tuple(variants), fatigue=fat,
        output_dir=root.get("output_dir", str, "gplfm_out"),
        seed=root.get("seed", int, 0),
        workers=root.positive("workers", int, 1),
        emit_gnuplot=root.get("emit_gnuplot", bool, True),
        source_text=text,
    )
    root.check_unknown()
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse_config(text, str(path))


def to_plain(obj: Any) -> Any:
    """Convert tuples/dataclass dicts into JSON-friendly lists."""
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj
