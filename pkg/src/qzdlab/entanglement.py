"""Entanglement witnesses: quantum Fisher information and entanglement depth."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .spin import DickeState, build_spin_operators

logger = logging.getLogger(__name__)

EIGEN_CUTOFF = 1e-14
BOUNDARY_FORMAT_VERSION = 1
_DEGENERACY_TOL = 1e-9


# -- quantum Fisher information -------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def of(cls, matrix) -> "SpectralDecomposition":
        m = np.asarray(matrix, dtype=complex)
        p, v = np.linalg.eigh(0.5 * (m + m.conj().T))
        # tiny negative eigenvalues from reconstruction noise carry no weight
        return cls(np.clip(p, 0.0, None), v)

    def reassemble(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T


def _matrix(state):
    return state.matrix if isinstance(state, DickeState) else np.asarray(state, complex)


def _operators_for(matrix):
    return build_spin_operators(matrix.shape[0] - 1)


def _fisher_weights(p):
    s = p[:, None] + p[None, :]
    d = (p[:, None] - p[None, :]) ** 2
    mask = s > EIGEN_CUTOFF
    w = np.zeros_like(s)
    w[mask] = d[mask] / s[mask]
    return w


def fisher_matrix(state) -> np.ndarray:
    """3x3 matrix ``M`` with ``F_Q(n) = n^T M n`` for rotations about ``n``."""
    m = _matrix(state)
    dec = SpectralDecomposition.of(m)
    w = _fisher_weights(dec.eigenvalues)
    ops = _operators_for(m)
    v = dec.eigenvectors
    comps = [v.conj().T @ j @ v for j in (ops.jx, ops.jy, ops.jz)]
    out = np.empty((3, 3))
    for a in range(3):
        for b in range(a, 3):
            out[a, b] = out[b, a] = 2.0 * np.sum(w * np.real(comps[a] * comps[b].T))
    return out


def fisher_information(state, axis) -> float:
    """Quantum Fisher information for rotations about the unit vector ``axis``.

    Evaluates ``2 sum_jk (p_j - p_k)^2/(p_j + p_k) |<j|J_n|k>|^2`` over the
    eigen-decomposition of the state, skipping pairs with ``p_j + p_k`` below
    ``EIGEN_CUTOFF``.
    """
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if not np.isclose(norm, 1.0, atol=1e-9):
        raise ValueError(f"axis must be a unit vector (norm {norm:.6g})")
    m = _matrix(state)
    dec = SpectralDecomposition.of(m)
    jn = _operators_for(m).component(axis / norm)
    v = dec.eigenvectors
    a = v.conj().T @ jn @ v
    return float(2.0 * np.sum(_fisher_weights(dec.eigenvalues) * np.abs(a) ** 2))


def _tie_break(vecs: np.ndarray) -> np.ndarray:
    """Pick one unit vector from the column span ``vecs`` deterministically."""
    proj = vecs @ vecs.T
    for e in np.eye(3):
        cand = proj @ e
        if np.linalg.norm(cand) > 1e-8:
            n = cand / np.linalg.norm(cand)
            break
    first = n[np.flatnonzero(np.abs(n) > 1e-12)[0]]
    return n if first > 0 else -n


def optimize_fisher_axis(state):
    """Maximise the Fisher information over rotation axes.

    Returns ``(axis, F_Q)``; exact, from the largest eigenpair of the 3x3
    quadratic form. Degenerate maxima resolve to the direction with the
    largest ``|n_x|``, then ``|n_y|``, with a positive leading component.
    """
    mq = fisher_matrix(state)
    w, v = np.linalg.eigh(mq)
    top = w[-1]
    tol = _DEGENERACY_TOL * max(1.0, abs(top))
    span = v[:, np.abs(w - top) <= tol]
    return _tie_break(span), float(max(top, 0.0))


def fisher_lower_bound(state_s):
    """Fisher information of the symmetric part, a lower bound for the full state.

    Returns ``(F_Q, axis, entangled)`` with ``entangled`` true when
    ``F_Q > N``.
    """
    m = _matrix(state_s)
    n_atoms = m.shape[0] - 1
    if np.trace(m).real <= 0:
        return 0.0, np.array([1.0, 0.0, 0.0]), False
    axis, fq = optimize_fisher_axis(m)
    return fq, axis, bool(fq > n_atoms)


def nonsymmetric_fisher_correction(state_s, atom_count: int, n_sp: float) -> float:
    """Rough Fisher contribution of the population outside the symmetric subspace.

    ``(N - n_sp) * (1 - Tr rho_s)``: each of the ``n_sp`` emission events is
    taken to remove one atom and leave the rest in ``|0>``. Reported alongside
    the certified bound, never added to it.
    """
    if n_sp < 0 or n_sp > atom_count:
        raise ValueError(f"n_sp must lie in [0, N={atom_count}], got {n_sp}")
    tr = np.trace(_matrix(state_s)).real if not np.isscalar(state_s) else float(state_s)
    outside = 1.0 - tr
    if outside < -1e-10:
        raise ValueError(f"trace of the symmetric part exceeds 1 ({tr})")
    return (atom_count - n_sp) * max(outside, 0.0)


# -- entanglement depth -------------------------------------------------------------

def greedy_partition(atom_count: int, k: int) -> tuple:
    q, r = divmod(atom_count, k)
    return (k,) * q + ((r,) if r else ())


def balanced_partition(atom_count: int, groups: int) -> tuple:
    q, r = divmod(atom_count, groups)
    return (q + 1,) * r + (q,) * (groups - r)


def candidate_partitions(atom_count: int, k: int) -> list:
    """Partitions into parts of size <= k scanned by the boundary optimizer."""
    k = min(k, atom_count)
    m = -(-atom_count // k)
    cands = {greedy_partition(atom_count, k)}
    for groups in range(m, min(m + 2, atom_count) + 1):
        cands.add(balanced_partition(atom_count, groups))
    return sorted(cands, reverse=True)


def _product_w_overlap(sizes, atom_count: int, rho00: float) -> float:
    """Max ``|<1_N|psi>|^2`` over products of two-level group states with
    ``|<0_N|psi>|^2 = rho00``.

    Group ``g`` (``k_g`` atoms) holds ``a_g |0_k> + w_g |1_k>``; with
    ``t_g = w_g/a_g`` the problem is ``max rho00 (sum_g sqrt(k_g/N) t_g)^2``
    subject to ``sum_g log(1 + t_g^2) = -log rho00``. Stationarity puts each
    ``t_g`` on one of two branches ``(mu -/+ sqrt(mu^2 - c_g^2))/c_g``; all
    branch assignments are enumerated per group-size class and the
    multiplier ``mu`` is found by root bracketing.
    """
    if rho00 >= 1.0:
        return 0.0
    if rho00 <= 0.0:
        return max(sizes) / atom_count
    budget = -np.log(rho00)
    classes = {}
    for s in sizes:
        classes[s] = classes.get(s, 0) + 1
    cs = np.sqrt(np.array(list(classes), float) / atom_count)
    ns = np.array(list(classes.values()))
    cmax = cs.max()
    mus = cmax * np.exp(np.linspace(0.0, 14.0, 300))
    best = 0.0
    for n_large in itertools.product(*[range(n + 1) for n in ns]):
        n_large = np.array(n_large)
        n_small = ns - n_large

        def branches(mu):
            mu = np.atleast_1d(mu)[:, None]
            r = np.sqrt(np.maximum(mu * mu - cs * cs, 0.0))
            return (mu - r) / cs, (mu + r) / cs

        def excess(mu):
            ts, tl = branches(mu)
            return (n_small * np.log1p(ts * ts) + n_large * np.log1p(tl * tl)).sum(axis=1) - budget

        f = excess(mus)
        roots = list(mus[f == 0])
        for i in np.flatnonzero(f[:-1] * f[1:] < 0):
            roots.append(brentq(lambda m: excess(m)[0], mus[i], mus[i + 1], xtol=1e-14, rtol=1e-14))
        for mu in roots:
            ts, tl = branches(mu)
            amp = float((cs * (n_small * ts[0] + n_large * tl[0])).sum())
            best = max(best, rho00 * amp * amp)
    return min(best, 1.0 - rho00)


def upper_concave_envelope(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Upper concave hull of the points ``(x, y)`` evaluated at ``x`` (sorted x)."""
    hull = []
    for i in range(len(x)):
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            cross = (x[i1] - x[i0]) * (y[i] - y[i0]) - (y[i1] - y[i0]) * (x[i] - x[i0])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return np.interp(x, x[hull], y[hull])


@dataclass(frozen=True, eq=False)
class BoundaryCurve:
    """Largest ``rho_11`` reachable by k-producible states at each ``rho_00``.

    ``values`` is the concave envelope of the pure-product optimum, since
    mixtures of k-producible states are k-producible.
    """

    atom_count: int
    k: int
    rho00: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    format_version: int = BOUNDARY_FORMAT_VERSION

    def __call__(self, rho00):
        return np.interp(rho00, self.rho00, self.values)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "atom_count": self.atom_count,
            "k": self.k,
            "rho00": self.rho00.tolist(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryCurve":
        if d.get("format_version") != BOUNDARY_FORMAT_VERSION:
            raise ValueError(f"unsupported boundary format {d.get('format_version')!r}")
        return cls(int(d["atom_count"]), int(d["k"]), np.asarray(d["rho00"], float),
                   np.asarray(d["values"], float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BoundaryCurve":
        return cls.from_dict(json.loads(Path(path).read_text()))


def boundary_point(atom_count: int, k: int, rho00: float) -> float:
    """Pure-product optimum (before the concave envelope) at one ``rho00``."""
    return max(_product_w_overlap(p, atom_count, rho00) for p in candidate_partitions(atom_count, k))


@lru_cache(maxsize=512)
def _boundary_curve(atom_count: int, k: int, points: int) -> BoundaryCurve:
    x = np.linspace(0.0, 1.0, points)
    if k >= atom_count:
        y = 1.0 - x
    else:
        y = np.array([boundary_point(atom_count, k, xi) for xi in x])
    return BoundaryCurve(atom_count, k, x, upper_concave_envelope(x, y))


def boundary_curve(atom_count: int, k: int, points: int = 201,
                   cache_dir: Optional[Path] = None) -> BoundaryCurve:
    """Boundary ``b_k`` on a uniform ``rho00`` grid, cached in memory and,
    when ``cache_dir`` is given, on disk."""
    if not 1 <= k <= atom_count:
        raise ValueError(f"k must lie in 1..{atom_count}, got {k}")
    if cache_dir is not None:
        path = Path(cache_dir) / f"boundary_N{atom_count}_k{k}_p{points}.json"
        if path.exists():
            try:
                return BoundaryCurve.load(path)
            except (ValueError, KeyError, json.JSONDecodeError):
                logger.warning("regenerating unreadable boundary cache %s", path)
        curve = _boundary_curve(atom_count, k, points)
        path.parent.mkdir(parents=True, exist_ok=True)
        curve.save(path)
        return curve
    return _boundary_curve(atom_count, k, points)


def entanglement_depth(rho00: float, rho11: float, atom_count: int,
                       points: int = 201, cache_dir=None) -> int:
    """Smallest k for which k-producible states can reach ``(rho00, rho11)``.

    Depth ``>= k`` is certified when ``rho11`` exceeds ``b_{k-1}(rho00)``.
    """
    if rho00 < 0 or rho11 < 0 or rho00 + rho11 > 1 + 1e-12:
        raise ValueError(f"inconsistent populations rho00={rho00}, rho11={rho11}")
    tol = 1e-12

    def reachable(k):
        return rho11 <= boundary_curve(atom_count, k, points, cache_dir)(rho00) + tol

    lo, hi = 1, atom_count
    if reachable(lo):
        return 1
    # b_k is non-decreasing in k: bisect for the first reachable k
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if reachable(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class EntanglementReport:
    """Witness values for one reconstructed state."""

    fisher_info: float
    fisher_per_atom: float
    optimal_axis: np.ndarray
    depth_bound: int
    entangled: bool
    intervals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fisher_info": self.fisher_info,
            "fisher_per_atom": self.fisher_per_atom,
            "optimal_axis": [float(a) for a in self.optimal_axis],
            "depth_bound": int(self.depth_bound),
            "entangled": self.entangled,
            "intervals": self.intervals,
        }


def entanglement_report(state_s, atom_count: Optional[int] = None) -> EntanglementReport:
    """Fisher bound and depth for a (possibly truncated) symmetric-part state."""
    m = _matrix(state_s)
    if atom_count is not None and m.shape[0] < atom_count + 1:
        full = np.zeros((atom_count + 1, atom_count + 1), complex)
        full[: m.shape[0], : m.shape[0]] = m
        m = full
    n = m.shape[0] - 1
    fq, axis, entangled = fisher_lower_bound(m)
    pops = np.clip(np.diag(m).real, 0.0, None)
    depth = entanglement_depth(float(pops[0]), float(min(pops[1], 1 - pops[0])), n)
    return EntanglementReport(fq, fq / n, axis, depth, entangled)
