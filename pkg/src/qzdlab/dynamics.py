"""Zeno dynamics of the collective spin under continuous cavity measurement.

Three models are available:

``S1``
    Microwave drive ``H/hbar = Omega J_x`` plus one Lindblad jump operator
    ``d = sqrt(r_m) |0_N><0_N|`` (the cavity transmits only for ``|0_N>``).
``S3``
    ``S1`` plus a diagonal anti-Hermitian loss term ``-i gamma_n`` that removes
    population from the symmetric subspace (spontaneous emission).
``IDEAL``
    The ``r_m -> infinity`` limit: unitary evolution generated by the drive
    projected onto the complement of ``|0_N>``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .spin import (
    DickeBasis,
    DickeState,
    RotationSpec,
    build_spin_operators,
    rotation_operator,
    transverse_spin_length,
)

logger = logging.getLogger(__name__)

#: Pi-pulse duration used in the experiment (s).
EXPERIMENT_PI_TIME = 4.65e-6
#: Measurement rate in units of the Rabi frequency used in the experiment.
EXPERIMENT_RATE_RATIO = 22.5
#: Snapshot times (units of the pi-pulse time) of the tomography panels.
SNAPSHOT_FRACTIONS = (0.83, 0.89, 0.96, 1.02, 1.09)

_IDEAL_LEAK_TOL = 1e-9


class NumericalAbort(RuntimeError):
    """Integration produced non-finite values."""

    def __init__(self, message, time=None, step=None):
        super().__init__(message)
        self.time = time
        self.step = step


class LossKind(str, enum.Enum):
    NONE = "none"
    TABLE = "table"
    IDEAL_CAVITY = "ideal_cavity"


@dataclass(frozen=True)
class LossModel:
    """Per-Dicke-state loss rates ``gamma_n`` (amplitude rates, s^-1).

    ``TABLE`` takes the rates directly. ``IDEAL_CAVITY`` derives them from the
    cooperativity of a birefringence-free cavity: the emission event rate of
    ``|n_N>`` is ``r_m/(2 n C)``, and since population decays at ``2 gamma_n``
    the amplitude rate is ``gamma_n = r_m/(4 n C)``.
    """

    kind: LossKind = LossKind.NONE
    gamma_table: Optional[tuple] = None
    cooperativity: Optional[float] = None

    def __post_init__(self):
        kind = LossKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is LossKind.TABLE:
            if self.gamma_table is None:
                raise ValueError("TABLE loss model needs gamma_table")
            g = np.asarray(self.gamma_table, dtype=float)
            if g.ndim != 1 or np.any(~np.isfinite(g)) or np.any(g < 0):
                raise ValueError("gamma_table must be a 1-d array of finite rates >= 0")
            if g[0] != 0:
                raise ValueError("gamma_0 must be 0: |0_N> has no optically excited atom")
            object.__setattr__(self, "gamma_table", tuple(g.tolist()))
        elif kind is LossKind.IDEAL_CAVITY:
            c = self.cooperativity
            if c is None or not c > 0:
                raise ValueError("IDEAL_CAVITY loss model needs cooperativity > 0")

    @classmethod
    def table(cls, rates) -> "LossModel":
        return cls(LossKind.TABLE, gamma_table=tuple(np.asarray(rates, float)))

    @classmethod
    def ideal_cavity(cls, cooperativity: float) -> "LossModel":
        return cls(LossKind.IDEAL_CAVITY, cooperativity=float(cooperativity))

    def rates(self, atom_count: int, measurement_rate: float) -> np.ndarray:
        if self.kind is LossKind.NONE:
            return np.zeros(atom_count + 1)
        if self.kind is LossKind.TABLE:
            g = np.asarray(self.gamma_table, dtype=float)
            if g.size != atom_count + 1:
                raise ValueError(
                    f"gamma_table has {g.size} entries, expected {atom_count + 1}"
                )
            return g
        n = np.arange(atom_count + 1)
        g = np.zeros(atom_count + 1)
        if np.isfinite(self.cooperativity):
            g[1:] = measurement_rate / (4.0 * n[1:] * self.cooperativity)
        return g


def default_time_grid(pi_time: float, points: int = 25, span: float = 1.3) -> np.ndarray:
    """Uniform grid over ``[0, span*T]`` merged with the snapshot times."""
    frac = np.union1d(np.linspace(0.0, span, points), SNAPSHOT_FRACTIONS)
    return frac * pi_time


@dataclass(frozen=True, eq=False)
class ZenoConfig:
    """Physical parameters of one dynamics run (SI units, rates in s^-1).

    ``integrator_step`` may not exceed ``min(0.01/Omega, 0.1/r_m)``; it
    defaults to ``min(0.0025/Omega, 0.1/r_m)``, which keeps the RK4 error of
    the drive below 1e-8 at N = 36.
    """

    basis: DickeBasis
    rabi_frequency: float
    measurement_rate: float = 0.0
    loss: LossModel = field(default_factory=LossModel)
    time_grid: Optional[np.ndarray] = field(default=None, repr=False)
    integrator_step: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.basis, DickeBasis):
            object.__setattr__(self, "basis", DickeBasis(self.basis))
        om = self.rabi_frequency
        if not (np.isfinite(om) and om > 0):
            raise ValueError(f"rabi_frequency must be positive, got {om}")
        rm = self.measurement_rate
        if not (np.isfinite(rm) and rm >= 0):
            raise ValueError(f"measurement_rate must be >= 0, got {rm}")
        grid = self.time_grid
        if grid is None:
            grid = default_time_grid(self.pi_pulse_time)
        grid = np.array(grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("time_grid must be a non-empty 1-d array")
        if grid[0] != 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("time_grid must start at 0 and be strictly increasing")
        grid.setflags(write=False)
        object.__setattr__(self, "time_grid", grid)
        cap = self.max_step
        step = self.integrator_step
        if step is None:
            step = self.default_step
        if not (step > 0 and step <= cap * (1 + 1e-12)):
            raise ValueError(
                f"integrator_step {step:.4g} s exceeds the stability cap {cap:.4g} s"
            )
        object.__setattr__(self, "integrator_step", float(step))

    @classmethod
    def experimental(cls, atom_count: int = 36, pi_time: float = EXPERIMENT_PI_TIME,
                     rate_ratio: float = EXPERIMENT_RATE_RATIO, **kw) -> "ZenoConfig":
        """Configuration from the pi-pulse time and ``r_m/Omega``."""
        om = np.pi / pi_time
        return cls(DickeBasis(atom_count), om, rate_ratio * om, **kw)

    @property
    def atom_count(self) -> int:
        return self.basis.atom_count

    @property
    def pi_pulse_time(self) -> float:
        return np.pi / self.rabi_frequency

    @property
    def max_step(self) -> float:
        cap = 0.01 / self.rabi_frequency
        if self.measurement_rate > 0:
            cap = min(cap, 0.1 / self.measurement_rate)
        return cap

    @property
    def default_step(self) -> float:
        step = 0.0025 / self.rabi_frequency
        if self.measurement_rate > 0:
            step = min(step, 0.1 / self.measurement_rate)
        return step

    @property
    def gamma(self) -> np.ndarray:
        return self.loss.rates(self.atom_count, self.measurement_rate)

    def with_(self, **changes) -> "ZenoConfig":
        """Copy with changes; the integrator step is re-derived unless given."""
        changes.setdefault("integrator_step", None)
        return replace(self, **changes)


def measurement_rate_from_flux(photon_flux: float, empty_cavity_transmission: float) -> float:
    """Effective measurement rate ``2 Phi sqrt(T0)`` of the cavity."""
    if not photon_flux >= 0:
        raise ValueError(f"photon flux must be >= 0, got {photon_flux}")
    if not 0 <= empty_cavity_transmission <= 1:
        raise ValueError(
            f"empty-cavity transmission must lie in [0, 1], got {empty_cavity_transmission}"
        )
    return 2.0 * photon_flux * np.sqrt(empty_cavity_transmission)


class Model(str, enum.Enum):
    S1 = "S1"
    S3 = "S3"
    IDEAL = "IDEAL"


# -- right-hand sides ---------------------------------------------------------

def _drift(config: ZenoConfig, drive_sign: float = 1.0, loss: bool = False) -> np.ndarray:
    """Non-Hermitian generator ``K`` with ``drho = K rho + rho K^dag + jumps``."""
    ops = build_spin_operators(config.basis)
    k = -1j * drive_sign * config.rabi_frequency * np.array(ops.jx)
    k[0, 0] -= 0.5 * config.measurement_rate
    if loss:
        k -= np.diag(config.gamma)
    return k


def _rhs(rho, k, rate, recycle=True):
    a = k @ rho
    out = a + a.conj().T
    if recycle:
        out[0, 0] += rate * rho[0, 0].real
    return out


def _matrix(state) -> np.ndarray:
    return state.matrix if isinstance(state, DickeState) else np.asarray(state, complex)


def lindblad_rhs(state, config: ZenoConfig, drive_sign: float = 1.0) -> np.ndarray:
    """Time derivative of the measurement-only master equation (s^-1)."""
    if config.loss.kind is not LossKind.NONE:
        raise ValueError("lindblad_rhs requires loss kind NONE; use lindblad_with_loss_rhs")
    return _rhs(_matrix(state), _drift(config, drive_sign), config.measurement_rate)


def lindblad_with_loss_rhs(state, config: ZenoConfig, drive_sign: float = 1.0) -> np.ndarray:
    """Time derivative including the ``-{Gamma, rho}`` loss term (s^-1)."""
    if config.loss.kind is LossKind.NONE:
        raise ValueError("lindblad_with_loss_rhs requires a loss model")
    return _rhs(_matrix(state), _drift(config, drive_sign, loss=True), config.measurement_rate)


# -- integration ----------------------------------------------------------------

def rk4_integrate(f, y0, times, max_step):
    """Fixed-step classic RK4 sampled at ``times``.

    Each interval between consecutive sample times is split into the
    smallest number of equal steps not exceeding ``max_step``.
    """
    y = np.array(y0, dtype=complex)
    out = np.empty((len(times),) + y.shape, dtype=complex)
    out[0] = y
    for i in range(1, len(times)):
        span = times[i] - times[i - 1]
        n = max(1, int(np.ceil(span / max_step - 1e-9)))
        h = span / n
        for s in range(n):
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(y)):
                t = times[i - 1] + (s + 1) * h
                raise NumericalAbort(
                    f"non-finite state at t={t:.6g} s (interval {i}, substep {s})",
                    time=t, step=s,
                )
        out[i] = y
    return out


@dataclass(frozen=True, eq=False)
class EvolutionRecord:
    """States sampled on the time grid.

    For conditional (no-click) runs ``states`` holds the unnormalised
    conditional states, ``normalized_states`` the renormalised ones and
    ``click_probability`` the cumulative probability that at least one
    photon was transmitted.
    """

    times: np.ndarray
    states: list
    click_probability: Optional[np.ndarray] = None
    normalized_states: Optional[list] = None
    model: Optional[str] = None

    def __len__(self):
        return len(self.times)

    @property
    def traces(self) -> np.ndarray:
        return np.array([s.trace for s in self.states])

    def populations(self, n_max: Optional[int] = None, normalized: bool = False) -> np.ndarray:
        """Diagonal elements, shape (times, n_max+1)."""
        states = self.normalized_states if normalized and self.normalized_states else self.states
        p = np.array([s.populations for s in states])
        return p if n_max is None else p[:, : n_max + 1]

    def relative_populations(self, n_max: Optional[int] = None) -> np.ndarray:
        """Populations divided by the symmetric-subspace trace."""
        p = self.populations(n_max)
        return p / self.traces[:, None]

    def transverse_spin(self, normalized: bool = False) -> np.ndarray:
        states = self.normalized_states if normalized and self.normalized_states else self.states
        return np.array([transverse_spin_length(s) for s in states])

    def at(self, t: float, normalized: bool = False) -> DickeState:
        """State at the grid time closest to ``t``."""
        i = int(np.argmin(np.abs(self.times - t)))
        states = self.normalized_states if normalized and self.normalized_states else self.states
        return states[i]


def _to_states(basis, mats, tol_clean=True):
    out = []
    for m in mats:
        m = 0.5 * (m + m.conj().T)
        out.append(DickeState(basis, m, validate=False))
    return out


def _check_initial(initial: DickeState, config: ZenoConfig):
    if initial.basis != config.basis:
        raise ValueError("initial state and config use different atom numbers")


def evolve(initial: DickeState, config: ZenoConfig, model="S1", drive_sign: float = 1.0) -> EvolutionRecord:
    """Integrate the chosen model on ``config.time_grid``.

    ``drive_sign`` flips the microwave drive (``-Omega J_x``), as used by
    trajectory I.
    """
    model = Model(model)
    _check_initial(initial, config)
    times = config.time_grid
    if model is Model.IDEAL:
        if config.measurement_rate == 0:
            raise ValueError("IDEAL model needs r_m > 0; use S1 with r_m = 0 for Rabi dynamics")
        return _evolve_ideal(initial, config, drive_sign)
    if model is Model.S1 and config.loss.kind is not LossKind.NONE:
        raise ValueError("model S1 requires loss kind NONE")
    if model is Model.S3 and config.loss.kind is LossKind.NONE:
        raise ValueError("model S3 requires a loss model")
    k = _drift(config, drive_sign, loss=model is Model.S3)
    rate = config.measurement_rate
    mats = rk4_integrate(lambda r: _rhs(r, k, rate), initial.matrix, times, config.integrator_step)
    logger.debug("evolved %s over %d samples", model.value, len(times))
    return EvolutionRecord(times.copy(), _to_states(config.basis, mats), model=model.value)


def conditional_no_click_evolve(initial: DickeState, config: ZenoConfig,
                                drive_sign: float = 1.0) -> EvolutionRecord:
    """Evolution post-selected on no transmitted photon.

    The jump-recycling term is dropped, so the trace of the unnormalised
    state decays by both photon clicks and (if configured) loss. The click
    probability is integrated separately as ``int r_m rho_00 dt``.
    """
    _check_initial(initial, config)
    d = config.basis.dimension
    k = _drift(config, drive_sign, loss=config.loss.kind is not LossKind.NONE)
    rate = config.measurement_rate

    def f(y):
        rho = y[:-1].reshape(d, d)
        dy = np.empty_like(y)
        dy[:-1] = _rhs(rho, k, rate, recycle=False).ravel()
        dy[-1] = rate * rho[0, 0].real
        return dy

    y0 = np.append(initial.matrix.ravel(), 0.0)
    ys = rk4_integrate(f, y0, config.time_grid, config.integrator_step)
    mats = ys[:, :-1].reshape(-1, d, d)
    states = _to_states(config.basis, mats)
    normalized = [
        DickeState(config.basis, s.matrix / s.trace, validate=False) if s.trace > 0 else s
        for s in states
    ]
    return EvolutionRecord(
        config.time_grid.copy(), states, click_probability=ys[:, -1].real.copy(),
        normalized_states=normalized, model="no_click",
    )


def zeno_hamiltonian(config: ZenoConfig, drive_sign: float = 1.0) -> np.ndarray:
    """``Pi_Z (Omega J_x) Pi_Z`` with ``Pi_Z = 1 - |0_N><0_N|``."""
    ops = build_spin_operators(config.basis)
    h = drive_sign * config.rabi_frequency * np.array(ops.jx)
    h[0, :] = 0
    h[:, 0] = 0
    return h


def _ideal_propagators(config, drive_sign, durations):
    w, v = np.linalg.eigh(zeno_hamiltonian(config, drive_sign))
    return [(v * np.exp(-1j * w * t)) @ v.conj().T for t in durations]


def ideal_qzd_step(state: DickeState, config: ZenoConfig, duration: float,
                   drive_sign: float = 1.0) -> DickeState:
    """Evolve for ``duration`` inside the Zeno subspace (infinite measurement rate)."""
    rho = state.matrix
    if rho[0, 0].real >= _IDEAL_LEAK_TOL:
        raise ValueError(
            f"ideal QZD needs a state inside the Zeno subspace (rho_00={rho[0, 0].real:.3g})"
        )
    (u,) = _ideal_propagators(config, drive_sign, [duration])
    return DickeState(state.basis, u @ rho @ u.conj().T, validate=False)


def _evolve_ideal(initial, config, drive_sign):
    if initial.matrix[0, 0].real >= _IDEAL_LEAK_TOL:
        raise ValueError(
            f"ideal QZD needs a state inside the Zeno subspace "
            f"(rho_00={initial.matrix[0, 0].real:.3g})"
        )
    rho = initial.matrix
    us = _ideal_propagators(config, drive_sign, config.time_grid)
    states = [DickeState(config.basis, u @ rho @ u.conj().T, validate=False) for u in us]
    return EvolutionRecord(config.time_grid.copy(), states, model=Model.IDEAL.value)


# -- trajectories -----------------------------------------------------------------

class TrajectoryKind(str, enum.Enum):
    I = "I"
    II = "II"


@dataclass(frozen=True)
class TrajectorySpec:
    """Drive sequence; ``t_over_T`` is the Zeno drive duration in pi-pulse units."""

    kind: TrajectoryKind = TrajectoryKind.I
    tilt_angle: float = np.pi / 10
    t_over_T: float = 0.96

    def __post_init__(self):
        object.__setattr__(self, "kind", TrajectoryKind(self.kind))
        if not self.t_over_T >= 0:
            raise ValueError("t_over_T must be >= 0")

    @property
    def drive_sign(self) -> float:
        # trajectory I drives theta = -pi t/T, trajectory II +pi t/T
        return -1.0 if self.kind is TrajectoryKind.I else 1.0


@dataclass(frozen=True)
class Segment:
    """One step of a pulse sequence.

    ``kind == "rotation"``: instantaneous rotation by ``angle`` about ``axis``.
    ``kind == "drive"``: continuous drive for ``duration`` seconds with
    ``drive_sign`` and the cavity measurement on or off.
    """

    kind: str
    axis: str = "x"
    angle: float = 0.0
    duration: float = 0.0
    drive_sign: float = 1.0
    measurement: bool = False


def trajectory_sequence(spec: TrajectorySpec, config: ZenoConfig) -> list:
    """Ordered pulse segments starting from ``|0_N>``."""
    spec = spec if isinstance(spec, TrajectorySpec) else TrajectorySpec(spec)
    duration = spec.t_over_T * config.pi_pulse_time
    drive = Segment("drive", duration=duration, drive_sign=spec.drive_sign, measurement=True)
    if spec.kind is TrajectoryKind.I:
        return [
            Segment("rotation", "x", 2 * np.pi),
            Segment("rotation", "x", -np.pi),
            drive,
        ]
    if spec.kind is TrajectoryKind.II:
        return [
            Segment("rotation", "y", spec.tilt_angle),
            Segment("rotation", "x", np.pi),
            drive,
        ]
    raise ValueError(f"unknown trajectory kind {spec.kind!r}")


def prepare_initial_state(spec: TrajectorySpec, config: ZenoConfig) -> DickeState:
    """Apply the instantaneous prelude rotations of ``spec`` to ``|0_N>``."""
    basis = config.basis
    ket = basis.ket(0)
    for seg in trajectory_sequence(spec, config):
        if seg.kind != "rotation":
            break
        rot = RotationSpec(seg.angle, 0.0) if seg.axis == "x" else RotationSpec(0.0, seg.angle)
        ket = rotation_operator(basis, rot) @ ket
    return DickeState.from_ket(basis, ket)


def run_trajectory(spec: TrajectorySpec, config: ZenoConfig, model="S1",
                   conditional: bool = False) -> EvolutionRecord:
    """Prelude rotations followed by the measured drive sampled on ``config.time_grid``."""
    initial = prepare_initial_state(spec, config)
    if model == Model.IDEAL or model == "IDEAL":
        # the prelude leaves an exponentially small |0_N> amplitude; project it out
        m = np.array(initial.matrix)
        m[0, :] = 0
        m[:, 0] = 0
        initial = DickeState(config.basis, m / np.trace(m).real)
    if conditional:
        return conditional_no_click_evolve(initial, config, spec.drive_sign)
    return evolve(initial, config, model, spec.drive_sign)


def state_at(spec: TrajectorySpec, config: ZenoConfig, model="S1") -> DickeState:
    """State at the end of the measured drive of ``spec``."""
    t = spec.t_over_T * config.pi_pulse_time
    grid = np.array([0.0, t]) if t > 0 else np.array([0.0])
    rec = run_trajectory(spec, config.with_(time_grid=grid), model)
    return rec.states[-1]


def turning_point_time(record: EvolutionRecord) -> float:
    """Time of the transverse-spin minimum that follows its first maximum.

    Trajectories that start at a pole have zero transverse spin at t = 0;
    searching after the maximum skips that trivial minimum.
    """
    tsl = record.transverse_spin()
    start = int(np.argmax(tsl))
    return float(record.times[start + int(np.argmin(tsl[start:]))])


def snapshot_grid(config: ZenoConfig, fractions: Sequence[float] = SNAPSHOT_FRACTIONS) -> np.ndarray:
    return np.concatenate([[0.0], np.asarray(fractions, float) * config.pi_pulse_time])
