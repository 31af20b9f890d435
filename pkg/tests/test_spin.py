import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm
from scipy.special import comb

from qzdlab.spin import (
    DickeBasis,
    DickeState,
    NamedState,
    RotationOrder,
    RotationSpec,
    build_spin_operators,
    check_density_matrix,
    coherent_kets,
    expectation,
    husimi_integral,
    husimi_q,
    husimi_q_grid,
    named_state,
    p_zero,
    p_zero_grid,
    rotate,
    rotation_operator,
    sphere_quadrature,
    transverse_spin_length,
)

from conftest import dicke_vectors, qubit_collective_operators, random_density_matrix

angles = st.floats(-2 * np.pi, 2 * np.pi, allow_nan=False)
atoms = st.integers(1, 12)


def binomial_populations(n, theta):
    # |<k| exp(-i theta J_x) |0>|^2 for a product of rotated qubits
    k = np.arange(n + 1)
    return comb(n, k) * np.sin(theta / 2) ** (2 * k) * np.cos(theta / 2) ** (2 * (n - k))


# -- basis and states ------------------------------------------------------------

def test_basis_dimension_and_m_values():
    b = DickeBasis(5)
    assert b.dimension == 6
    np.testing.assert_allclose(b.m_values, np.arange(6) - 2.5)


@pytest.mark.parametrize("bad", [0, -3])
def test_basis_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        DickeBasis(bad)


@pytest.mark.parametrize("bad", [2.5, "3", True])
def test_basis_rejects_non_integer(bad):
    with pytest.raises(TypeError):
        DickeBasis(bad)


def test_state_validation_rejects_bad_matrices():
    b = DickeBasis(2)
    with pytest.raises(ValueError):
        DickeState(b, np.array([[0.5, 0.1], [0.1, 0.5]]))  # wrong shape
    nonherm = np.diag([0.5, 0.5, 0]).astype(complex)
    nonherm[0, 1] = 0.1
    with pytest.raises(ValueError):
        DickeState(b, nonherm)
    with pytest.raises(ValueError):
        DickeState(b, np.diag([1.2, -0.2, 0.0]))
    with pytest.raises(ValueError):
        DickeState(b, np.diag([0.6, 0.6, 0.0]))


def test_state_allows_subunit_trace():
    s = DickeState(DickeBasis(2), np.diag([0.3, 0.25, 0.0]))
    assert s.trace == pytest.approx(0.55)
    np.testing.assert_allclose(s.normalized().populations, [0.3 / 0.55, 0.25 / 0.55, 0])


def test_state_matrix_is_read_only():
    s = named_state(3, "w")
    with pytest.raises(ValueError):
        s.matrix[0, 0] = 1


def test_embed_pads_with_zeros():
    s = DickeState(DickeBasis(2), np.diag([0.2, 0.8, 0.0]))
    e = s.embed(5)
    assert e.atom_count == 5
    np.testing.assert_allclose(e.populations, [0.2, 0.8, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        e.embed(3)


# -- spin operators ----------------------------------------------------------------

def test_spin_half_operators():
    ops = build_spin_operators(DickeBasis(1))
    np.testing.assert_allclose(ops.jx, 0.5 * np.array([[0, 1], [1, 0]]))
    np.testing.assert_allclose(ops.jz, np.diag([-0.5, 0.5]))


def test_spin_one_ladder():
    ops = build_spin_operators(DickeBasis(2))
    np.testing.assert_allclose(ops.jz, np.diag([-1.0, 0.0, 1.0]))
    np.testing.assert_allclose(np.diag(ops.j_plus, -1), [math.sqrt(2), math.sqrt(2)])
    np.testing.assert_allclose(ops.j_minus, ops.j_plus.conj().T)


def test_commutators_at_36_atoms():
    ops = build_spin_operators(DickeBasis(36))
    jx, jy, jz = ops.jx, ops.jy, ops.jz
    for a, b, c in ((jx, jy, jz), (jy, jz, jx), (jz, jx, jy)):
        assert np.abs(a @ b - b @ a - 1j * c).max() < 1e-10


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_operators_match_qubit_tensor_product(n):
    # independent construction: sum of single-qubit spins projected on Dicke states
    ops = build_spin_operators(DickeBasis(n))
    P = dicke_vectors(n)
    for mine, full in zip((ops.jx, ops.jy, ops.jz), qubit_collective_operators(n)):
        np.testing.assert_allclose(mine, P.T @ full @ P, atol=1e-12)


def test_ladder_matrix_elements():
    n = 7
    ops = build_spin_operators(DickeBasis(n))
    j = n / 2
    m = np.arange(n) - j
    np.testing.assert_allclose(np.diag(ops.j_plus, -1), np.sqrt(j * (j + 1) - m * (m + 1)))


def test_build_spin_operators_rejects_bad_basis():
    with pytest.raises(ValueError):
        build_spin_operators(0)


def test_component_axis_lookup():
    ops = build_spin_operators(DickeBasis(3))
    np.testing.assert_allclose(ops.component([0, 1, 0]), ops.jy)
    np.testing.assert_allclose(ops.component([0, 0, 1]), ops.jz)


# -- rotations ------------------------------------------------------------------------

def test_null_rotation_is_identity():
    np.testing.assert_allclose(rotation_operator(DickeBasis(6), RotationSpec(0, 0)), np.eye(7),
                               atol=1e-14)


@pytest.mark.parametrize("n", [2, 10, 36])
def test_full_turn_is_identity_for_integer_spin(n):
    r = rotation_operator(DickeBasis(n), RotationSpec(2 * np.pi, 0))
    np.testing.assert_allclose(r, np.eye(n + 1), atol=1e-10)


@pytest.mark.parametrize("n", [1, 5, 36])
def test_pi_rotation_flips_pole(n):
    b = DickeBasis(n)
    out = rotation_operator(b, RotationSpec(np.pi, 0)) @ b.ket(0)
    # |d^j_{j,-j}(pi)| = 1
    assert abs(abs(out[n]) - 1) < 1e-12
    assert np.abs(out[:n]).max() < 1e-12


def test_rotation_matches_scipy_expm():
    b = DickeBasis(5)
    ops = build_spin_operators(b)
    th, ph = 0.7, -1.1
    ref = expm(-1j * ph * ops.jy) @ expm(-1j * th * ops.jx)
    np.testing.assert_allclose(rotation_operator(ops, RotationSpec(th, ph)), ref, atol=1e-12)
    ref_yx = expm(-1j * th * ops.jx) @ expm(-1j * ph * ops.jy)
    got = rotation_operator(ops, RotationSpec(th, ph, RotationOrder.Y_THEN_X))
    np.testing.assert_allclose(got, ref_yx, atol=1e-12)


def test_rotation_rejects_non_finite():
    with pytest.raises(ValueError):
        RotationSpec(np.inf, 0)


@given(atoms, angles, angles)
def test_rotation_composition(n, a, b):
    basis = DickeBasis(n)
    lhs = rotation_operator(basis, (a, 0)) @ rotation_operator(basis, (b, 0))
    np.testing.assert_allclose(lhs, rotation_operator(basis, (a + b, 0)), atol=1e-10)


@given(atoms, angles, angles)
def test_rotation_is_unitary(n, th, ph):
    r = rotation_operator(DickeBasis(n), (th, ph))
    np.testing.assert_allclose(r @ r.conj().T, np.eye(n + 1), atol=1e-12)


@given(atoms, angles, angles)
def test_coherent_kets_match_rotation_columns(n, th, ph):
    k = coherent_kets(n, [th], [ph])[:, 0]
    np.testing.assert_allclose(k, rotation_operator(DickeBasis(n), (th, ph))[:, 0], atol=1e-12)


# -- named states ---------------------------------------------------------------------------

def test_w_state_populations():
    np.testing.assert_allclose(named_state(3, NamedState.W).populations, [0, 1, 0, 0])


def test_coherent_zero_is_south_pole():
    s = named_state(4, "coherent", 0.0, 0.0)
    np.testing.assert_allclose(s.matrix, named_state(4, "all_zero").matrix, atol=1e-14)


def test_equatorial_coherent_populations_two_atoms():
    np.testing.assert_allclose(named_state(2, "coherent", np.pi / 2, 0).populations,
                               [0.25, 0.5, 0.25], atol=1e-12)


@given(st.integers(1, 30), st.floats(0, np.pi))
def test_coherent_populations_are_binomial(n, theta):
    got = named_state(n, "coherent", theta, 0).populations
    np.testing.assert_allclose(got, binomial_populations(n, theta), atol=1e-10)


@pytest.mark.parametrize("which", list(NamedState))
def test_named_states_are_pure_unit_trace(which):
    s = named_state(8, which, 0.4, 0.3)
    assert s.trace == pytest.approx(1.0)
    assert np.linalg.matrix_rank(s.matrix, tol=1e-10) == 1


def test_all_one_is_north_pole():
    np.testing.assert_allclose(named_state(5, "all_one").populations, [0, 0, 0, 0, 0, 1])


# -- P0 and Husimi ----------------------------------------------------------------------------

def test_p_zero_of_pointer_state():
    assert p_zero(named_state(36, "all_zero"), RotationSpec(0, 0)) == pytest.approx(1.0)
    assert p_zero(named_state(36, "all_one"), RotationSpec(0, 0)) == pytest.approx(0.0, abs=1e-15)


@given(st.integers(1, 40), st.floats(-np.pi, np.pi))
def test_p_zero_overlap_power_law(n, theta):
    # exact overlap has exponent 2N
    got = p_zero(named_state(n, "all_zero"), RotationSpec(theta, 0))
    assert got == pytest.approx(np.cos(theta / 2) ** (2 * n), abs=1e-12)


def test_p_zero_grid_matches_scalar(rng):
    b = DickeBasis(6)
    s = DickeState(b, random_density_matrix(7, rng))
    th = rng.uniform(-1, 1, 5)
    ph = rng.uniform(-1, 1, 5)
    ref = [p_zero(s, (a, c)) for a, c in zip(th, ph)]
    np.testing.assert_allclose(p_zero_grid(s, th, ph), ref, atol=1e-13)


def test_husimi_peak_value():
    assert husimi_q(named_state(36, "all_zero"), (0, 0)) == pytest.approx(37 / (4 * np.pi))
    assert 37 / (4 * np.pi) == pytest.approx(2.944, abs=1e-3)


def test_husimi_zero_for_w_at_origin():
    assert husimi_q(named_state(36, "w"), (0, 0)) == pytest.approx(0.0, abs=1e-15)


def test_quadrature_weights_cover_sphere():
    _, _, w = sphere_quadrature(5)
    assert w.sum() == pytest.approx(4 * np.pi)
    assert w.size == (2 * 5 + 2) ** 2


@pytest.mark.parametrize("n", [1, 4, 36])
def test_husimi_integral_equals_trace(n, rng):
    for trace in (1.0, 0.55):
        s = DickeState(DickeBasis(n), random_density_matrix(n + 1, rng, trace=trace))
        assert husimi_integral(s) == pytest.approx(trace, abs=1e-3)


@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_husimi_nonnegative_and_bounded(n, seed):
    rng = np.random.default_rng(seed)
    s = DickeState(DickeBasis(n), random_density_matrix(n + 1, rng, rank=2))
    th, ph, _ = sphere_quadrature(n)
    q = husimi_q_grid(s, th, ph)
    assert q.min() >= -1e-12
    assert q.max() <= (n + 1) / (4 * np.pi) * s.trace + 1e-12


@given(st.integers(1, 10), angles, angles, st.floats(0, 2 * np.pi))
def test_p_zero_ignores_global_phase(n, th, ph, gphase):
    rng = np.random.default_rng(n)
    ket = rng.normal(size=n + 1) + 1j * rng.normal(size=n + 1)
    ket /= np.linalg.norm(ket)
    b = DickeBasis(n)
    a = DickeState.from_ket(b, ket)
    c = DickeState.from_ket(b, np.exp(1j * gphase) * ket)
    assert p_zero(a, (th, ph)) == pytest.approx(p_zero(c, (th, ph)), abs=1e-12)


# -- expectation values -------------------------------------------------------------------------

def test_jz_on_poles():
    ops = build_spin_operators(DickeBasis(36))
    assert expectation(named_state(36, "all_zero"), ops.jz) == pytest.approx(-18)
    assert expectation(named_state(36, "all_one"), ops.jz) == pytest.approx(18)


def test_jz_vanishes_on_equator():
    ops = build_spin_operators(DickeBasis(36))
    assert abs(expectation(named_state(36, "coherent", np.pi / 2, 0), ops.jz)) < 1e-10


@given(st.integers(1, 50), st.data())
def test_jz_of_dicke_states(n, data):
    k = data.draw(st.integers(0, n))
    b = DickeBasis(n)
    val = expectation(DickeState.from_ket(b, b.ket(k)), build_spin_operators(b).jz)
    assert val.real == k - n / 2
    assert val.imag == 0


def test_expectation_shape_mismatch():
    with pytest.raises(ValueError):
        expectation(named_state(3, "w"), np.eye(3))


def test_expectation_real_for_hermitian(rng):
    s = DickeState(DickeBasis(5), random_density_matrix(6, rng))
    ops = build_spin_operators(s.basis)
    for op in (ops.jx, ops.jy, ops.jz, ops.jx @ ops.jx):
        assert abs(expectation(s, op).imag) < 1e-10


# -- transverse spin ---------------------------------------------------------------------------

def test_transverse_spin_examples():
    assert transverse_spin_length(named_state(36, "coherent", np.pi / 2, 0)) == pytest.approx(1, abs=1e-9)
    assert transverse_spin_length(named_state(36, "all_zero")) == 0.0
    assert transverse_spin_length(named_state(36, "w")) == 0.0


@given(st.integers(1, 20), st.floats(0, np.pi), angles)
def test_transverse_spin_of_coherent_state(n, theta, phi):
    # Ry only tilts within the x-z plane, so the polar angle from -z is set by theta and phi
    s = named_state(n, "coherent", theta, phi)
    ops = build_spin_operators(s.basis)
    mean = np.array([expectation(s, o).real for o in (ops.jx, ops.jy, ops.jz)])
    assert np.linalg.norm(mean) == pytest.approx(n / 2, abs=1e-9)
    assert transverse_spin_length(s) == pytest.approx(2 / n * np.hypot(*mean[:2]), abs=1e-12)
    assert transverse_spin_length(s) <= s.trace + 1e-12


def test_rotate_preserves_trace(rng):
    s = DickeState(DickeBasis(4), random_density_matrix(5, rng, trace=0.7))
    assert rotate(s, (0.3, 1.2)).trace == pytest.approx(0.7)
    check_density_matrix(rotate(s, (0.3, 1.2)).matrix)
