"""Named scenarios that turn a JSON configuration into data files.

Every run writes its outputs through one :class:`OutputWriter`, which records
a SHA-256 digest per file, and finishes with ``manifest.json``. Numeric
outputs depend only on the configuration and the seed; wall-clock data is
confined to the manifest.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import math
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic.functional_validators import BeforeValidator
from scipy.optimize import minimize_scalar

from . import __version__
from .bootstrap import BootstrapConfig, bootstrap
from .dynamics import (
    EXPERIMENT_PI_TIME,
    EXPERIMENT_RATE_RATIO,
    SNAPSHOT_FRACTIONS,
    LossModel,
    Model,
    TrajectoryKind,
    TrajectorySpec,
    ZenoConfig,
    evolve,
    measurement_rate_from_flux,
    run_trajectory,
    state_at,
    turning_point_time,
)
from .entanglement import entanglement_report, optimize_fisher_axis
from .io import dataset_to_csv, dataset_to_dict, reconstruction_to_dict
from .spin import DickeBasis, DickeState, transverse_spin_length
from .tomography import (
    DEFAULT_GRID_HALF_SPAN,
    DetectionErrorModel,
    ReconstructionConfig,
    TomographyGrid,
    fidelity,
    mle_reconstruct,
    synthesize_dataset,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
POPULATION_COLUMNS = tuple(f"rho{i}{i}" for i in range(5))
EVOLUTION_COLUMNS = ("time_s",) + POPULATION_COLUMNS + ("trace_sym", "transverse_spin", "click_prob")
SWEEP_RATE_RATIOS = (0.0, 2.8, 5.6, 11.2, 22.5, 45.0, 90.0)
BETTER_FINESSE_RATIO = 200000 / 37000


# -- units ------------------------------------------------------------------------

_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "μs": 1e-6, "ns": 1e-9}
_RATE_UNITS = {"s^-1": 1.0, "/s": 1.0, "hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


def parse_quantity(value, units: dict, canonical: str):
    """Number, or string with a unit suffix, converted to the canonical unit."""
    if value is None or isinstance(value, (int, float)) and not isinstance(value, bool):
        return value
    if not isinstance(value, str):
        raise ValueError(f"expected a number or a string with unit, got {value!r}")
    m = _QUANTITY.match(value)
    if not m:
        raise ValueError(f"cannot parse quantity {value!r}")
    number, unit = float(m.group(1)), m.group(2)
    if not unit:
        return number
    key = unit if unit in units else unit.lower()
    if key not in units:
        raise ValueError(f"unknown unit {unit!r} (allowed: {', '.join(units)}; canonical {canonical})")
    return number * units[key]


Seconds = Annotated[float, BeforeValidator(lambda v: parse_quantity(v, _TIME_UNITS, "s"))]
PerSecond = Annotated[float, BeforeValidator(lambda v: parse_quantity(v, _RATE_UNITS, "s^-1"))]


# -- configuration -------------------------------------------------------------------

class Scenario(str, enum.Enum):
    RABI_REFERENCE = "RABI_REFERENCE"
    TRAJECTORY_I = "TRAJECTORY_I"
    TRAJECTORY_II = "TRAJECTORY_II"
    RATE_SWEEP = "RATE_SWEEP"
    IDEAL_QZD = "IDEAL_QZD"
    ROUNDTRIP_TOMOGRAPHY = "ROUNDTRIP_TOMOGRAPHY"
    PROJECTION_BETTER_CAVITY = "PROJECTION_BETTER_CAVITY"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class LossSection(_Section):
    kind: Literal["none", "table", "ideal_cavity"] = "none"
    gamma_table: Optional[List[PerSecond]] = None
    cooperativity: Optional[float] = Field(None, gt=0)

    def model(self) -> LossModel:
        return LossModel(self.kind, gamma_table=None if self.gamma_table is None
                         else tuple(self.gamma_table), cooperativity=self.cooperativity)

    @model_validator(mode="after")
    def _check(self):
        self.model()
        return self


class PhysicalSection(_Section):
    """Physical parameters. The measurement rate comes from exactly one of
    ``rate_ratio`` (units of Omega, the default), ``measurement_rate``, or
    ``photon_flux`` together with ``empty_cavity_transmission``."""

    atom_count: int = Field(36, ge=1, le=400)
    pi_time: Optional[Seconds] = Field(None, gt=0)
    rabi_frequency: Optional[PerSecond] = Field(None, gt=0)
    rate_ratio: Optional[float] = Field(None, ge=0)
    measurement_rate: Optional[PerSecond] = Field(None, ge=0)
    photon_flux: Optional[PerSecond] = Field(None, ge=0)
    empty_cavity_transmission: Optional[float] = Field(None, ge=0, le=1)
    loss: LossSection = LossSection()
    model: Optional[Literal["S1", "S3", "IDEAL"]] = None
    time_points: int = Field(25, ge=2)
    time_span: float = Field(1.3, gt=0)
    snapshot_fractions: List[float] = list(SNAPSHOT_FRACTIONS)
    integrator_step: Optional[Seconds] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.pi_time is not None and self.rabi_frequency is not None:
            raise ValueError("give pi_time or rabi_frequency, not both")
        flux = (self.photon_flux, self.empty_cavity_transmission)
        if (flux[0] is None) != (flux[1] is None):
            raise ValueError("photon_flux and empty_cavity_transmission must be given together")
        sources = [self.rate_ratio is not None, self.measurement_rate is not None,
                   flux[0] is not None]
        if sum(sources) > 1:
            raise ValueError(
                "set only one of rate_ratio, measurement_rate, photon_flux/empty_cavity_transmission"
            )
        if any(f < 0 for f in self.snapshot_fractions):
            raise ValueError("snapshot_fractions must be >= 0")
        return self

    @property
    def omega(self) -> float:
        if self.rabi_frequency is not None:
            return self.rabi_frequency
        return math.pi / (self.pi_time if self.pi_time is not None else EXPERIMENT_PI_TIME)

    @property
    def rate(self) -> float:
        if self.measurement_rate is not None:
            return self.measurement_rate
        if self.photon_flux is not None:
            return measurement_rate_from_flux(self.photon_flux, self.empty_cavity_transmission)
        ratio = EXPERIMENT_RATE_RATIO if self.rate_ratio is None else self.rate_ratio
        return ratio * self.omega

    def time_grid(self, snapshots: bool = True) -> np.ndarray:
        frac = np.linspace(0.0, self.time_span, self.time_points)
        if snapshots:
            frac = np.union1d(frac, self.snapshot_fractions)
        return frac * math.pi / self.omega

    def zeno_config(self, snapshots: bool = True, **changes) -> ZenoConfig:
        kw = dict(basis=DickeBasis(self.atom_count), rabi_frequency=self.omega,
                  measurement_rate=self.rate, loss=self.loss.model(),
                  time_grid=self.time_grid(snapshots), integrator_step=self.integrator_step)
        kw.update(changes)
        return ZenoConfig(**kw)

    def default_model(self) -> str:
        if self.model is not None:
            return self.model
        return "S1" if self.loss.kind == "none" else "S3"


class TrajectorySection(_Section):
    kind: Optional[Literal["I", "II"]] = None
    tilt_angle: float = math.pi / 10
    t_over_T: float = Field(0.96, ge=0)
    conditional: bool = True


class TomographySection(_Section):
    enabled: bool = True
    grid_points: int = Field(7, ge=2)
    half_span: float = Field(DEFAULT_GRID_HALF_SPAN, gt=0, le=math.pi)
    shots: int = Field(50, ge=1)
    max_error: float = Field(0.06, ge=0, lt=0.5)
    n_max: int = Field(4, ge=1)
    compare_n_max: int = Field(6, ge=1)
    max_iterations: int = Field(10000, ge=1)
    likelihood_tolerance: float = Field(1e-10, gt=0)
    repeats: int = Field(20, ge=1)

    def grid(self) -> TomographyGrid:
        return TomographyGrid.experimental(self.grid_points, self.half_span)

    def reconstruction(self, n_max: Optional[int] = None) -> ReconstructionConfig:
        return ReconstructionConfig(n_max or self.n_max, self.max_iterations,
                                    self.likelihood_tolerance)


class BootstrapSection(_Section):
    enabled: bool = False
    replicas: int = Field(1000, ge=2)
    confidence_levels: List[float] = [0.68, 0.95]
    resample: Literal["empirical", "model"] = "empirical"
    statistics: List[str] = ["rho00", "rho11", "trace_sym", "fisher_per_atom", "depth"]
    max_drop_fraction: float = Field(0.05, ge=0, le=1)

    def config(self, seed: int, workers: int) -> BootstrapConfig:
        return BootstrapConfig(self.replicas, seed, tuple(self.confidence_levels), self.resample,
                               workers, self.max_drop_fraction)


class SweepSection(_Section):
    """``cooperativity`` sets an ideal-cavity loss model for the sweep when
    ``physical.loss`` is ``none``; null sweeps the lossless model."""

    rate_ratios: List[float] = list(SWEEP_RATE_RATIOS)
    t_over_T: float = Field(0.96, ge=0)
    cooperativity: Optional[float] = Field(100.0, gt=0)

    @field_validator("rate_ratios")
    @classmethod
    def _nonneg(cls, v):
        if not v or any(r < 0 for r in v):
            raise ValueError("rate_ratios must be a non-empty list of values >= 0")
        return v


class ProjectionSection(_Section):
    base_cooperativity: float = Field(100.0, gt=0)
    finesse_ratio: float = Field(BETTER_FINESSE_RATIO, gt=0)
    optimize_rate: bool = True
    rate_ratio_bounds: List[float] = [10.0, 400.0]
    t_over_T_range: List[float] = [0.6, 1.3]
    t_points: int = Field(71, ge=5)

    @property
    def cooperativity(self) -> float:
        return self.base_cooperativity * self.finesse_ratio

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.rate_ratio_bounds
        if not 0 < lo < hi:
            raise ValueError("rate_ratio_bounds must satisfy 0 < low < high")
        a, b = self.t_over_T_range
        if not 0 <= a < b:
            raise ValueError("t_over_T_range must satisfy 0 <= start < stop")
        return self


class PipelineConfig(_Section):
    schema_version: Literal[1]
    scenario: Scenario = Scenario.TRAJECTORY_I
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    output_dir: str = "results"
    boundary_cache_dir: Optional[str] = None
    physical: PhysicalSection = PhysicalSection()
    trajectory: TrajectorySection = TrajectorySection()
    tomography: TomographySection = TomographySection()
    bootstrap: BootstrapSection = BootstrapSection()
    sweep: SweepSection = SweepSection()
    projection: ProjectionSection = ProjectionSection()

    def trajectory_spec(self, default: str = "I", t_over_T: Optional[float] = None) -> TrajectorySpec:
        t = self.trajectory
        return TrajectorySpec(TrajectoryKind(t.kind or default), t.tilt_angle,
                              t.t_over_T if t_over_T is None else t_over_T)


def config_schema() -> dict:
    """JSON schema of the configuration file."""
    return PipelineConfig.model_json_schema()


class ConfigError(ValueError):
    """Invalid configuration; ``issues`` holds one dict per problem with
    ``field``, ``line`` (1-based, or None) and ``message``."""

    def __init__(self, issues: list, source: Optional[str] = None):
        self.issues = issues
        self.source = source
        first = issues[0] if issues else {"field": None, "message": "invalid configuration"}
        where = f" (line {first['line']})" if first.get("line") else ""
        super().__init__(f"{first.get('field') or 'config'}: {first['message']}{where}")

    def report(self) -> dict:
        return {"error": "invalid_config", "source": self.source, "issues": self.issues}


def _line_of(text: str, loc) -> Optional[int]:
    # walk the key path through the raw text; good enough for diagnostics
    pos, found = 0, None
    for key in loc:
        if not isinstance(key, str):
            continue
        i = text.find(f'"{key}"', pos)
        if i < 0:
            break
        pos, found = i, i
    return None if found is None else text.count("\n", 0, found) + 1


def parse_config(text: str, source: Optional[str] = None) -> PipelineConfig:
    """Parse and validate configuration text; whitespace-only means all defaults."""
    if not text.strip():
        return PipelineConfig(schema_version=SCHEMA_VERSION)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([{"field": None, "line": exc.lineno, "column": exc.colno,
                            "message": f"invalid JSON: {exc.msg}"}], source) from None
    if not isinstance(data, dict):
        raise ConfigError([{"field": None, "line": 1, "message": "top level must be an object"}],
                          source)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        issues = []
        for err in exc.errors():
            loc = [k for k in err["loc"] if k not in ("function-after",)]
            issues.append({
                "field": ".".join(str(k) for k in loc) or None,
                "line": _line_of(text, loc),
                "message": err["msg"],
            })
        raise ConfigError(issues, source) from None


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([{"field": None, "line": None, "message": str(exc)}], str(path)) from None
    return parse_config(text, str(path))


# -- output ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


class OutputWriter:
    """Single point through which a run writes files; keeps digests in order."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def write_text(self, name: str, text: str) -> Path:
        data = text.encode("utf-8")
        path = self.root / name
        path.write_bytes(data)
        self.files.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(),
                           "bytes": len(data)})
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(_jsonable(obj), indent=2) + "\n")

    def write_csv(self, name: str, columns, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
        return self.write_text(name, buf.getvalue())


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: str
    config: dict
    library_version: str
    seed: int
    started_utc: str
    finished_utc: str
    outputs: List[dict]
    summary: dict = {}


def _child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _pops(state: DickeState, k: int = 5) -> list:
    p = np.zeros(k)
    q = state.populations[:k]
    p[: q.size] = q
    return list(p)


def evolution_rows(record, click=None, normalized: bool = False) -> list:
    states = record.normalized_states if normalized and record.normalized_states else record.states
    if click is None:
        click = np.zeros(len(states))
    return [
        [float(t)] + _pops(s) + [s.trace, transverse_spin_length(s), float(c)]
        for t, s, c in zip(record.times, states, click)
    ]


def _snapshot_label(fraction: float) -> str:
    return f"{fraction:.2f}"


# -- scenarios ------------------------------------------------------------------------------

def _rabi(cfg: PipelineConfig, out: OutputWriter) -> dict:
    phys = cfg.physical
    zc = phys.zeno_config(snapshots=False, measurement_rate=0.0, loss=LossModel())
    n = phys.atom_count
    initial = DickeState.from_ket(zc.basis, zc.basis.ket(n))
    rec = evolve(initial, zc, "S1")
    out.write_csv("evolution.csv", EVOLUTION_COLUMNS, evolution_rows(rec))
    oracle = np.sin(zc.rabi_frequency * rec.times / 2) ** (2 * n)
    err = float(np.max(np.abs(rec.populations()[:, 0] - oracle)))
    report = {"scenario": cfg.scenario, "oracle": "sin(Omega t/2)^(2N)", "max_abs_error": err,
              "time_points": len(rec.times)}
    out.write_json("report.json", report)
    return {"max_abs_error": err}


def _tomography_snapshot(state: DickeState, cfg: PipelineConfig, index: int, label: str,
                         out: OutputWriter) -> dict:
    tom = cfg.tomography
    grid = tom.grid()
    errors = DetectionErrorModel.uniform_random(grid.size, tom.max_error,
                                                seed=_child_seed(cfg.seed, 2, index))
    ds = synthesize_dataset(state, grid, tom.shots, errors, seed=_child_seed(cfg.seed, 1, index))
    out.write_text(f"tomography_{label}.csv", dataset_to_csv(ds))
    out.write_json(f"tomography_{label}.json", dataset_to_dict(ds))
    rec = mle_reconstruct(ds, tom.reconstruction())
    out.write_json(f"reconstruction_{label}.json", reconstruction_to_dict(rec))
    ent = entanglement_report(rec.matrix, ds.atom_count)
    entry = {
        "t_over_T": float(label),
        "truth": {"populations": _pops(state), "trace_sym": state.trace,
                  "fisher_per_atom": optimize_fisher_axis(state)[1] / state.atom_count},
        "reconstruction": {"populations": list(rec.populations), **rec.diagnostics(),
                           "fidelity": fidelity(rec.state, state)},
    }
    if cfg.bootstrap.enabled:
        res = bootstrap(ds, tom.reconstruction(), list(cfg.bootstrap.statistics),
                        cfg.bootstrap.config(_child_seed(cfg.seed, 3, index), cfg.workers),
                        point_reconstruction=rec)
        entry["bootstrap"] = {k: v.to_dict() for k, v in res.items()}
        for key, name in (("fisher_per_atom", "fisher_per_atom"), ("depth", "depth_bound")):
            if key in res:
                ent.intervals[name] = {f"{lvl:g}": list(iv) for lvl, iv in res[key].intervals.items()}
                ent.intervals[name]["summary"] = res[key].formatted()
    entry["entanglement"] = ent.to_dict()
    return entry


def _trajectory(cfg: PipelineConfig, out: OutputWriter, kind: str) -> dict:
    phys = cfg.physical
    zc = phys.zeno_config()
    spec = cfg.trajectory_spec(default=kind)
    model = phys.default_model()
    rec = run_trajectory(spec, zc, model)
    click = None
    if model != "IDEAL" and zc.measurement_rate > 0:
        cond = run_trajectory(spec, zc, model, conditional=True)
        click = cond.click_probability
        if cfg.trajectory.conditional:
            out.write_csv("evolution_no_click.csv", EVOLUTION_COLUMNS,
                          evolution_rows(cond, click, normalized=True))
    out.write_csv("evolution.csv", EVOLUTION_COLUMNS, evolution_rows(rec, click))
    snapshots = []
    if cfg.tomography.enabled:
        for i, f in enumerate(phys.snapshot_fractions):
            state = rec.at(f * zc.pi_pulse_time)
            snapshots.append(_tomography_snapshot(state, cfg, i, _snapshot_label(f), out))
    report = {"scenario": cfg.scenario, "trajectory": spec.kind.value, "model": model,
              "measurement_rate": zc.measurement_rate, "rabi_frequency": zc.rabi_frequency,
              "turning_point_time_s": turning_point_time(rec),
              "snapshots": snapshots}
    out.write_json("report.json", report)
    return {"snapshots": len(snapshots)}


def _sweep_point(cfg: PipelineConfig, ratio: float):
    phys = cfg.physical
    changes = {"measurement_rate": ratio * phys.omega}
    model = phys.default_model()
    if phys.loss.kind == "none" and cfg.sweep.cooperativity is not None and model != "IDEAL":
        changes["loss"] = LossModel.ideal_cavity(cfg.sweep.cooperativity)
        model = "S3"
    zc = phys.zeno_config(**changes)
    spec = cfg.trajectory_spec(default="I", t_over_T=cfg.sweep.t_over_T)
    if model == "IDEAL":
        raise ValueError("RATE_SWEEP needs a finite-rate model (S1 or S3)")
    s = state_at(spec, zc, model)
    return [ratio, zc.measurement_rate] + _pops(s) + [s.trace, transverse_spin_length(s)]


def _rate_sweep(cfg: PipelineConfig, out: OutputWriter) -> dict:
    ratios = sorted(cfg.sweep.rate_ratios)
    if cfg.workers > 1:
        rows = Parallel(n_jobs=cfg.workers)(delayed(_sweep_point)(cfg, r) for r in ratios)
    else:
        rows = [_sweep_point(cfg, r) for r in ratios]
    cols = ("rate_ratio", "measurement_rate_s") + POPULATION_COLUMNS + ("trace_sym", "transverse_spin")
    out.write_csv("rate_sweep.csv", cols, rows)
    rho11 = [r[3] for r in rows]
    best = int(np.argmax(rho11))
    report = {"scenario": cfg.scenario, "t_over_T": cfg.sweep.t_over_T,
              "cooperativity": cfg.sweep.cooperativity if cfg.physical.loss.kind == "none" else None,
              "argmax_rate_ratio": ratios[best], "max_rho11": rho11[best]}
    out.write_json("report.json", report)
    return report


def _ideal_fisher(spec: TrajectorySpec, zc: ZenoConfig, t_over_T: float) -> float:
    s = state_at(TrajectorySpec(spec.kind, spec.tilt_angle, t_over_T), zc, "IDEAL")
    return optimize_fisher_axis(s)[1] / zc.atom_count


def _ideal_qzd(cfg: PipelineConfig, out: OutputWriter) -> dict:
    phys = cfg.physical
    zc = phys.zeno_config()
    if zc.measurement_rate == 0:
        zc = zc.with_(measurement_rate=EXPERIMENT_RATE_RATIO * zc.rabi_frequency,
                      time_grid=zc.time_grid)
    spec = cfg.trajectory_spec(default="II")
    rec = run_trajectory(spec, zc, "IDEAL")
    out.write_csv("evolution.csv", EVOLUTION_COLUMNS, evolution_rows(rec))
    rows, fq = [], []
    for t, s in zip(rec.times, rec.states):
        axis, f = optimize_fisher_axis(s)
        fq.append(f / zc.atom_count)
        rows.append([float(t), float(t / zc.pi_pulse_time), f, f / zc.atom_count, *axis])
    out.write_csv("fisher.csv", ("time_s", "t_over_T", "fisher", "fisher_per_atom",
                                 "axis_x", "axis_y", "axis_z"), rows)
    i = int(np.argmax(fq))
    frac = rec.times / zc.pi_pulse_time
    lo, hi = frac[max(i - 1, 0)], frac[min(i + 1, len(frac) - 1)]
    res = minimize_scalar(lambda x: -_ideal_fisher(spec, zc, x), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-4})
    peak_t, peak = (float(res.x), float(-res.fun)) if -res.fun >= fq[i] else (float(frac[i]), fq[i])
    report = {"scenario": cfg.scenario, "trajectory": spec.kind.value,
              "peak_fisher_per_atom": peak, "peak_t_over_T": peak_t,
              "grid_peak_fisher_per_atom": fq[i], "grid_peak_t_over_T": float(frac[i])}
    out.write_json("report.json", report)
    return report


def _roundtrip_one(truth: DickeState, cfg: PipelineConfig, index: int) -> list:
    tom = cfg.tomography
    grid = tom.grid()
    errors = DetectionErrorModel.uniform_random(grid.size, tom.max_error,
                                                seed=_child_seed(cfg.seed, 2, index))
    seed = _child_seed(cfg.seed, 1, index)
    ds = synthesize_dataset(truth, grid, tom.shots, errors, seed=seed)
    a = mle_reconstruct(ds, tom.reconstruction())
    b = mle_reconstruct(ds, tom.reconstruction(tom.compare_n_max))
    pa, pb = a.populations, b.populations
    return [index, seed, fidelity(a.state, truth), pa[0], pa[1], a.trace, pb[0], pb[1],
            abs(pa[0] - pb[0]), abs(pa[1] - pb[1])]


def _roundtrip(cfg: PipelineConfig, out: OutputWriter) -> dict:
    phys = cfg.physical
    zc = phys.zeno_config()
    model = phys.model or "IDEAL"
    if model == "IDEAL" and zc.measurement_rate == 0:
        zc = zc.with_(measurement_rate=EXPERIMENT_RATE_RATIO * zc.rabi_frequency,
                      time_grid=zc.time_grid)
    truth = state_at(cfg.trajectory_spec(default="I"), zc, model)
    n = cfg.tomography.repeats
    if cfg.workers > 1:
        rows = Parallel(n_jobs=cfg.workers)(delayed(_roundtrip_one)(truth, cfg, i) for i in range(n))
    else:
        rows = [_roundtrip_one(truth, cfg, i) for i in range(n)]
    cols = ("index", "seed", "fidelity", "rho00", "rho11", "trace_sym",
            "rho00_compare", "rho11_compare", "shift00", "shift11")
    out.write_csv("roundtrip.csv", cols, rows)
    arr = np.array([r[2:] for r in rows], dtype=float)
    report = {
        "scenario": cfg.scenario, "model": model, "repeats": n,
        "truth_populations": _pops(truth),
        "mean_fidelity": float(arr[:, 0].mean()), "min_fidelity": float(arr[:, 0].min()),
        "max_shift00": float(arr[:, 6].max()), "max_shift11": float(arr[:, 7].max()),
        "stable_fraction": float(np.mean((arr[:, 6] < 0.01) & (arr[:, 7] < 0.01))),
    }
    out.write_json("report.json", report)
    return report


def projection_peak(phys: PhysicalSection, cooperativity: float, rate_ratio: float,
                    t_range=(0.6, 1.3), t_points: int = 71, spec: Optional[TrajectorySpec] = None):
    """Peak ``rho_11`` over time of trajectory I with ideal-cavity loss.

    Returns ``(t_over_T, rho11)``; the peak position is refined by a parabola
    through the three best grid samples.
    """
    spec = spec or TrajectorySpec(TrajectoryKind.I)
    frac = np.union1d([0.0], np.linspace(t_range[0], t_range[1], t_points))
    loss = LossModel.ideal_cavity(cooperativity)
    zc = ZenoConfig(DickeBasis(phys.atom_count), phys.omega, rate_ratio * phys.omega, loss,
                    frac * math.pi / phys.omega)
    rec = run_trajectory(spec, zc, "S3")
    p11 = rec.populations(1)[:, 1]
    i = int(np.argmax(p11))
    if 0 < i < len(frac) - 1:
        y0, y1, y2 = p11[i - 1: i + 2]
        h = frac[i + 1] - frac[i]
        den = y0 - 2 * y1 + y2
        if den < 0:
            dx = 0.5 * (y0 - y2) / den
            return float(frac[i] + dx * h), float(y1 - 0.25 * (y0 - y2) * dx)
    return float(frac[i]), float(p11[i])


def _projection(cfg: PipelineConfig, out: OutputWriter) -> dict:
    phys, proj = cfg.physical, cfg.projection
    c = proj.cooperativity
    t_range, tp = tuple(proj.t_over_T_range), proj.t_points
    evaluated = {}

    def peak(ratio):
        if ratio not in evaluated:
            evaluated[ratio] = projection_peak(phys, c, ratio, t_range, tp)
        return evaluated[ratio][1]

    if proj.optimize_rate:
        lo, hi = np.log(proj.rate_ratio_bounds)
        coarse = np.exp(np.linspace(lo, hi, 7))
        vals = [peak(float(r)) for r in coarse]
        j = int(np.argmax(vals))
        a, b = np.log(coarse[max(j - 1, 0)]), np.log(coarse[min(j + 1, len(coarse) - 1)])
        minimize_scalar(lambda x: -peak(float(np.exp(x))), bounds=(a, b), method="bounded",
                        options={"xatol": 0.02})
    else:
        peak(phys.rate / phys.omega)
    rows = sorted((r, c, t, p) for r, (t, p) in evaluated.items())
    out.write_csv("projection.csv", ("rate_ratio", "cooperativity", "peak_t_over_T", "peak_rho11"),
                  rows)
    best = max(rows, key=lambda r: r[3])
    report = {"scenario": cfg.scenario, "cooperativity": c, "rate_ratio": best[0],
              "peak_t_over_T": best[2], "peak_rho11": best[3]}
    out.write_json("report.json", report)
    return report


_SCENARIOS = {
    Scenario.RABI_REFERENCE: _rabi,
    Scenario.TRAJECTORY_I: lambda cfg, out: _trajectory(cfg, out, "I"),
    Scenario.TRAJECTORY_II: lambda cfg, out: _trajectory(cfg, out, "II"),
    Scenario.RATE_SWEEP: _rate_sweep,
    Scenario.IDEAL_QZD: _ideal_qzd,
    Scenario.ROUNDTRIP_TOMOGRAPHY: _roundtrip,
    Scenario.PROJECTION_BETTER_CAVITY: _projection,
}


def run_scenario(cfg: PipelineConfig, output_dir=None) -> RunManifest:
    """Run the configured scenario and write its outputs plus ``manifest.json``."""
    root = Path(output_dir if output_dir is not None else cfg.output_dir)
    out = OutputWriter(root)
    started = datetime.now(timezone.utc).isoformat()
    logger.info("running %s into %s", cfg.scenario.value, root)
    summary = _SCENARIOS[cfg.scenario](cfg, out)
    manifest = RunManifest(
        scenario=cfg.scenario.value,
        config=cfg.model_dump(mode="json"),
        library_version=__version__,
        seed=cfg.seed,
        started_utc=started,
        finished_utc=datetime.now(timezone.utc).isoformat(),
        outputs=list(out.files),
        summary=_jsonable(summary),
    )
    (root / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return manifest


def run_projection_better_cavity(cfg: PipelineConfig, output_dir=None) -> RunManifest:
    return run_scenario(cfg.model_copy(update={"scenario": Scenario.PROJECTION_BETTER_CAVITY}),
                        output_dir)
