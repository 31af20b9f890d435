"""Collective-spin algebra in the Dicke basis.

Basis index ``n`` runs over ``0..N`` and counts atoms in qubit state ``|1>``;
the J_z eigenvalue of ``|n_N>`` is ``n - N/2``. ``|0_N>`` is the south pole
(all atoms in ``|0>``) and the state whose occupation the cavity detects.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from numbers import Integral

import numpy as np

HERMITIAN_TOL = 1e-12
PSD_TOL = 1e-10
TRACE_TOL = 1e-10


@dataclass(frozen=True)
class DickeBasis:
    """Symmetric subspace of ``atom_count`` qubits."""

    atom_count: int

    def __post_init__(self):
        n = self.atom_count
        if isinstance(n, bool) or not isinstance(n, Integral):
            raise TypeError(f"atom_count must be an integer, got {n!r}")
        if n < 1:
            raise ValueError(f"atom_count must be >= 1, got {n}")
        object.__setattr__(self, "atom_count", int(n))

    @property
    def dimension(self) -> int:
        return self.atom_count + 1

    @property
    def m_values(self) -> np.ndarray:
        return np.arange(self.dimension) - self.atom_count / 2

    def ket(self, n: int) -> np.ndarray:
        if not 0 <= n <= self.atom_count:
            raise ValueError(f"Dicke index {n} outside 0..{self.atom_count}")
        v = np.zeros(self.dimension, dtype=complex)
        v[n] = 1.0
        return v


def _as_basis(basis) -> DickeBasis:
    if isinstance(basis, DickeBasis):
        return basis
    return DickeBasis(basis)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DickeState:
    """Density matrix on the symmetric subspace.

    The trace may be below one: the missing weight is population that has
    left the symmetric subspace (e.g. after spontaneous emission).

    Parameters
    ----------
    basis : DickeBasis
    matrix : array-like, shape (N+1, N+1)
    validate : bool
        Check hermiticity, positivity and the trace bound.
    """

    basis: DickeBasis
    matrix: np.ndarray = field(repr=False)
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        basis = _as_basis(self.basis)
        object.__setattr__(self, "basis", basis)
        m = _frozen(self.matrix)
        if m.shape != (basis.dimension, basis.dimension):
            raise ValueError(
                f"matrix shape {m.shape} does not match dimension {basis.dimension}"
            )
        object.__setattr__(self, "matrix", m)
        if self.validate:
            check_density_matrix(m)

    @classmethod
    def from_ket(cls, basis, ket) -> "DickeState":
        ket = np.asarray(ket, dtype=complex)
        return cls(basis, np.outer(ket, ket.conj()))

    @classmethod
    def from_matrix(cls, matrix, validate: bool = True) -> "DickeState":
        matrix = np.asarray(matrix)
        return cls(DickeBasis(matrix.shape[0] - 1), matrix, validate)

    @property
    def atom_count(self) -> int:
        return self.basis.atom_count

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    @property
    def populations(self) -> np.ndarray:
        return np.diag(self.matrix).real.copy()

    def normalized(self) -> "DickeState":
        tr = self.trace
        if tr <= 0:
            raise ValueError("cannot normalize a state with zero trace")
        return DickeState(self.basis, self.matrix / tr)

    def embed(self, atom_count: int) -> "DickeState":
        """Zero-pad a truncated state into the full ``atom_count`` basis."""
        d = self.basis.dimension
        if atom_count + 1 < d:
            raise ValueError("cannot embed into a smaller basis")
        out = np.zeros((atom_count + 1, atom_count + 1), dtype=complex)
        out[:d, :d] = self.matrix
        return DickeState(DickeBasis(atom_count), out)


def check_density_matrix(m: np.ndarray) -> None:
    """Raise ``ValueError`` unless ``m`` is Hermitian, PSD and has trace <= 1."""
    if not np.all(np.isfinite(m)):
        raise ValueError("density matrix has non-finite entries")
    if np.max(np.abs(m - m.conj().T), initial=0.0) > HERMITIAN_TOL:
        raise ValueError("density matrix is not Hermitian")
    lo = np.linalg.eigvalsh((m + m.conj().T) / 2)[0]
    if lo < -PSD_TOL:
        raise ValueError(f"density matrix not positive semidefinite (min eig {lo:.3g})")
    tr = np.trace(m).real
    if tr < -TRACE_TOL or tr > 1 + TRACE_TOL:
        raise ValueError(f"density matrix trace {tr:.12g} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class SpinOperatorSet:
    basis: DickeBasis
    jx: np.ndarray = field(repr=False)
    jy: np.ndarray = field(repr=False)
    jz: np.ndarray = field(repr=False)
    j_plus: np.ndarray = field(repr=False)
    j_minus: np.ndarray = field(repr=False)

    def component(self, axis) -> np.ndarray:
        """Return ``n . J`` for a 3-vector ``axis``."""
        nx, ny, nz = np.asarray(axis, dtype=float)
        return nx * self.jx + ny * self.jy + nz * self.jz

    @property
    def atom_count(self) -> int:
        return self.basis.atom_count


def build_spin_operators(basis) -> SpinOperatorSet:
    """Angular-momentum matrices for spin ``j = N/2`` in the Dicke basis."""
    return _spin_operators(_as_basis(basis).atom_count)


@lru_cache(maxsize=64)
def _spin_operators(atom_count: int) -> SpinOperatorSet:
    basis = DickeBasis(atom_count)
    j = atom_count / 2
    m = basis.m_values
    # <m+1|J+|m> = sqrt(j(j+1) - m(m+1)); index n+1 <- n
    up = np.sqrt(j * (j + 1) - m[:-1] * (m[:-1] + 1))
    j_plus = np.diag(up, -1).astype(complex)
    j_minus = j_plus.conj().T
    jx = (j_plus + j_minus) / 2
    jy = (j_plus - j_minus) / 2j
    jz = np.diag(m).astype(complex)
    return SpinOperatorSet(
        basis, _frozen(jx), _frozen(jy), _frozen(jz), _frozen(j_plus), _frozen(j_minus)
    )


@lru_cache(maxsize=64)
def _eigensystem(atom_count: int, axis: str):
    ops = _spin_operators(atom_count)
    w, v = np.linalg.eigh(getattr(ops, "j" + axis))
    return w, v


def _exp_generator(atom_count: int, axis: str, angle: float) -> np.ndarray:
    """``exp(-i angle J_axis)`` via the cached spectral decomposition."""
    w, v = _eigensystem(atom_count, axis)
    return (v * np.exp(-1j * angle * w)) @ v.conj().T


class RotationOrder(str, enum.Enum):
    X_THEN_Y = "x_then_y"
    Y_THEN_X = "y_then_x"


@dataclass(frozen=True)
class RotationSpec:
    """Tomography rotation: ``theta`` about X and ``phi`` about Y (radians).

    With the default order the operator is ``exp(-i phi J_y) exp(-i theta J_x)``.
    """

    theta: float
    phi: float = 0.0
    order: RotationOrder = RotationOrder.X_THEN_Y

    def __post_init__(self):
        if not (np.isfinite(self.theta) and np.isfinite(self.phi)):
            raise ValueError("rotation angles must be finite")
        object.__setattr__(self, "order", RotationOrder(self.order))


def _as_rotation(spec) -> RotationSpec:
    if isinstance(spec, RotationSpec):
        return spec
    theta, phi = spec
    return RotationSpec(float(theta), float(phi))


def rotation_operator(ops, spec) -> np.ndarray:
    """Unitary ``R(theta, phi)`` for a :class:`RotationSpec` (or ``(theta, phi)``)."""
    n = ops.atom_count if isinstance(ops, SpinOperatorSet) else _as_basis(ops).atom_count
    spec = _as_rotation(spec)
    rx = _exp_generator(n, "x", spec.theta)
    ry = _exp_generator(n, "y", spec.phi)
    if spec.order is RotationOrder.X_THEN_Y:
        return ry @ rx
    return rx @ ry


def rotate(state: DickeState, spec) -> DickeState:
    r = rotation_operator(state.basis, spec)
    return DickeState(state.basis, r @ state.matrix @ r.conj().T, validate=False)


class NamedState(str, enum.Enum):
    ALL_ZERO = "all_zero"
    ALL_ONE = "all_one"
    W = "w"
    COHERENT = "coherent"


def named_state(basis, which, theta: float = 0.0, phi: float = 0.0) -> DickeState:
    """Pure reference states.

    ``COHERENT`` is ``R(theta, phi)|0_N>``, a spin coherent state rotated away
    from the south pole.
    """
    basis = _as_basis(basis)
    which = NamedState(which)
    if which is NamedState.ALL_ZERO:
        ket = basis.ket(0)
    elif which is NamedState.ALL_ONE:
        ket = basis.ket(basis.atom_count)
    elif which is NamedState.W:
        ket = basis.ket(1)
    else:
        ket = rotation_operator(basis, RotationSpec(theta, phi)) @ basis.ket(0)
    return DickeState.from_ket(basis, ket)


def coherent_kets(atom_count: int, thetas, phis, order=RotationOrder.X_THEN_Y) -> np.ndarray:
    """Columns ``R(theta_i, phi_i)|0_N>`` for paired angle arrays, shape (N+1, n)."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    phis = np.atleast_1d(np.asarray(phis, dtype=float))
    thetas, phis = np.broadcast_arrays(thetas, phis)
    wx, vx = _eigensystem(atom_count, "x")
    wy, vy = _eigensystem(atom_count, "y")
    order = RotationOrder(order)
    e0 = np.zeros(atom_count + 1, dtype=complex)
    e0[0] = 1.0
    first_v, first_w, first_a, second_v, second_w, second_a = (
        (vx, wx, thetas, vy, wy, phis)
        if order is RotationOrder.X_THEN_Y
        else (vy, wy, phis, vx, wx, thetas)
    )
    # exp(-i a J) e0 = V diag(exp(-i a w)) V^dag e0, vectorised over angles
    c = first_v.conj().T @ e0
    k = first_v @ (np.exp(-1j * np.outer(first_w, first_a.ravel())) * c[:, None])
    k = second_v.conj().T @ k
    k = second_v @ (np.exp(-1j * np.outer(second_w, second_a.ravel())) * k)
    return k


def p_zero(state: DickeState, spec) -> float:
    """``<0_N| R^dag rho R |0_N>``: probability that no atom is in ``|1>``
    after the tomography rotation."""
    spec = _as_rotation(spec)
    v = rotation_operator(state.basis, spec)[:, 0]
    return float(np.real(v.conj() @ state.matrix @ v))


def p_zero_grid(state: DickeState, thetas, phis, order=RotationOrder.X_THEN_Y) -> np.ndarray:
    """Vectorised :func:`p_zero` over paired angle arrays."""
    thetas, phis = np.broadcast_arrays(np.asarray(thetas, float), np.asarray(phis, float))
    k = coherent_kets(state.atom_count, thetas, phis, order)
    p = np.einsum("in,ij,jn->n", k.conj(), state.matrix, k).real
    return p.reshape(thetas.shape)


def husimi_q(state: DickeState, spec) -> float:
    """Husimi-Q density (per steradian) at the rotation angles."""
    return (state.atom_count + 1) / (4 * np.pi) * p_zero(state, spec)


def husimi_q_grid(state: DickeState, thetas, phis, order=RotationOrder.X_THEN_Y) -> np.ndarray:
    return (state.atom_count + 1) / (4 * np.pi) * p_zero_grid(state, thetas, phis, order)


def sphere_quadrature(atom_count: int):
    """Gauss-Legendre in cos(polar) x uniform azimuth with (2N+2)^2 nodes.

    Returns ``(thetas, phis, weights)`` where the angles are tomography angles
    (rotation about X, then about Y) that reach each node from the south pole,
    and the weights sum to 4*pi.
    """
    n = 2 * atom_count + 2
    x, w = np.polynomial.legendre.leggauss(n)
    az = 2 * np.pi * np.arange(n) / n
    polar = np.arccos(x)  # measured from the south pole
    P, A = np.meshgrid(polar, az, indexing="ij")
    W = np.outer(w, np.full(n, 2 * np.pi / n))
    # Unit vector with polar angle P from -z; R = Ry(phi) Rx(theta) sends -z to
    # (-sin(phi)cos(theta), sin(theta), -cos(phi)cos(theta)).
    ux = np.sin(P) * np.cos(A)
    uy = np.sin(P) * np.sin(A)
    uz = -np.cos(P)
    theta = np.arcsin(np.clip(uy, -1, 1))
    phi = np.arctan2(-ux, -uz)
    return theta.ravel(), phi.ravel(), W.ravel()


def husimi_integral(state: DickeState) -> float:
    """Integral of the Husimi-Q density over the sphere; equals ``Tr rho``."""
    th, ph, w = sphere_quadrature(state.atom_count)
    return float(np.sum(w * husimi_q_grid(state, th, ph)))


def expectation(state: DickeState, operator) -> complex:
    operator = np.asarray(operator)
    if operator.shape != state.matrix.shape:
        raise ValueError(
            f"operator shape {operator.shape} does not match state {state.matrix.shape}"
        )
    return complex(np.trace(state.matrix @ operator))


def transverse_spin_length(state: DickeState) -> float:
    """``(2/N) sqrt(<J_x>^2 + <J_y>^2)``."""
    ops = build_spin_operators(state.basis)
    jx = expectation(state, ops.jx).real
    jy = expectation(state, ops.jy).real
    return 2.0 / state.atom_count * float(np.hypot(jx, jy))
