"""Cavity-transmission tomography: forward model, synthetic data and
maximum-likelihood reconstruction.

At each grid point ``(theta, phi)`` the atoms are rotated by ``R(theta, phi)``
and the cavity reports *high* transmission when no atom is in ``|1>``. The
detector flips the outcome with probabilities ``eps01`` (high reported while
some atom is in ``|1>``) and ``eps10`` (low reported while all atoms are in
``|0>``)::

    P(high) = (1 - eps10) P0 + eps01 (1 - P0)

Population outside the symmetric subspace never yields ``P0 > 0``, so it
only contributes ``eps01``. The reconstruction models it with one extra
"sink" dimension and reports the symmetric block, whose trace estimates
``Tr rho_s``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import _check_sample_weight, check_array, check_is_fitted

from .spin import DickeBasis, DickeState, coherent_kets, p_zero_grid

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-9
MAX_DETECTION_ERROR = 0.5
DEFAULT_GRID_HALF_SPAN = 0.26 * np.pi


@dataclass(frozen=True, eq=False)
class TomographyGrid:
    """Cartesian product of rotation angles about X (``thetas``) and Y (``phis``)."""

    thetas: np.ndarray
    phis: np.ndarray

    def __post_init__(self):
        for name in ("thetas", "phis"):
            a = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if a.ndim != 1 or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be a finite 1-d array")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def experimental(cls, points: int = 7, half_span: float = DEFAULT_GRID_HALF_SPAN) -> "TomographyGrid":
        a = np.linspace(-half_span, half_span, points)
        return cls(a, a)

    @property
    def shape(self):
        return (self.thetas.size, self.phis.size)

    @property
    def size(self) -> int:
        return self.thetas.size * self.phis.size

    def points(self):
        """Flattened ``(theta, phi)`` arrays, theta-major."""
        th, ph = np.meshgrid(self.thetas, self.phis, indexing="ij")
        return th.ravel(), ph.ravel()


@dataclass(frozen=True, eq=False)
class DetectionErrorModel:
    """Per-grid-point detection error probabilities (flattened, theta-major)."""

    eps01: np.ndarray
    eps10: np.ndarray

    def __post_init__(self):
        e01, e10 = np.broadcast_arrays(np.asarray(self.eps01, float), np.asarray(self.eps10, float))
        for name, e in (("eps01", e01), ("eps10", e10)):
            if np.any(~np.isfinite(e)) or np.any(e < 0) or np.any(e >= MAX_DETECTION_ERROR):
                raise ValueError(f"{name} must lie in [0, {MAX_DETECTION_ERROR})")
        e01, e10 = np.array(e01), np.array(e10)
        e01.setflags(write=False)
        e10.setflags(write=False)
        object.__setattr__(self, "eps01", e01)
        object.__setattr__(self, "eps10", e10)

    @classmethod
    def perfect(cls) -> "DetectionErrorModel":
        return cls(0.0, 0.0)

    @classmethod
    def uniform_random(cls, size: int, high: float = 0.06, seed=None) -> "DetectionErrorModel":
        """Angle-dependent errors drawn uniformly from ``[0, high]``."""
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(0, high, size), rng.uniform(0, high, size))

    def for_points(self, size: int):
        """``(eps01, eps10)`` broadcast to ``size`` grid points."""
        try:
            return (np.broadcast_to(self.eps01, (size,)).copy(),
                    np.broadcast_to(self.eps10, (size,)).copy())
        except ValueError:
            raise ValueError(
                f"detection-error table of shape {self.eps01.shape} does not match {size} points"
            ) from None


@dataclass(frozen=True, eq=False)
class TomographyDataset:
    """High-transmission counts on a rotation grid."""

    grid: TomographyGrid
    high_counts: np.ndarray
    shots: np.ndarray
    errors: DetectionErrorModel
    atom_count: int
    seed: Optional[int] = None

    def __post_init__(self):
        n = self.grid.size
        h = np.broadcast_to(np.asarray(self.high_counts), (n,)).astype(np.int64)
        s = np.broadcast_to(np.asarray(self.shots), (n,)).astype(np.int64)
        if np.any(s < 1):
            raise ValueError("every grid point needs at least one shot")
        if np.any(h < 0) or np.any(h > s):
            raise ValueError("high_counts must lie in [0, shots]")
        self.errors.for_points(n)
        DickeBasis(self.atom_count)
        h.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "high_counts", h)
        object.__setattr__(self, "shots", s)

    @property
    def frequencies(self) -> np.ndarray:
        return self.high_counts / self.shots

    def with_counts(self, high_counts, seed=None) -> "TomographyDataset":
        return TomographyDataset(self.grid, high_counts, self.shots, self.errors,
                                 self.atom_count, seed)

    def to_features(self):
        """``(X, y, sample_weight)`` for :class:`MLETomography`."""
        th, ph = self.grid.points()
        e01, e10 = self.errors.for_points(self.grid.size)
        X = np.column_stack([th, ph, e01, e10])
        return X, self.frequencies, self.shots.astype(float)


@dataclass(frozen=True)
class ReconstructionConfig:
    """Settings of the iterative maximum-likelihood reconstruction.

    ``n_max`` truncates the basis to Dicke states ``0..n_max``. Iteration stops
    once the relative log-likelihood change stays below
    ``likelihood_tolerance`` for ``patience`` consecutive iterations.
    """

    n_max: int = 4
    max_iterations: int = 10000
    likelihood_tolerance: float = 1e-10
    dilution: float = 1.0
    patience: int = 10

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0 < self.dilution <= 1:
            raise ValueError("dilution must lie in (0, 1]")
        if self.max_iterations < 1 or self.patience < 1:
            raise ValueError("max_iterations and patience must be >= 1")


def forward_probability(state: DickeState, theta, phi, errors: DetectionErrorModel):
    """Probability of a high-transmission outcome at ``(theta, phi)``.

    Scalar angles give a float; arrays give an array (errors broadcast per point).
    """
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    p0 = p_zero_grid(state, theta, phi)
    e01, e10 = errors.for_points(theta.size)
    p0 = p0.ravel()
    p = (1 - e10) * p0 + e01 * (1 - p0)
    p = np.clip(p, 0.0, 1.0).reshape(theta.shape)
    return float(p) if p.ndim == 0 else p


def synthesize_dataset(state: DickeState, grid: TomographyGrid, shots, errors: DetectionErrorModel,
                       seed=None) -> TomographyDataset:
    """Binomial high-transmission counts drawn from the forward model."""
    th, ph = grid.points()
    p = forward_probability(state, th, ph, errors)
    shots = np.broadcast_to(np.asarray(shots, dtype=np.int64), (grid.size,))
    if np.any(shots < 1):
        raise ValueError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    counts = rng.binomial(shots, p)
    return TomographyDataset(grid, counts, shots, errors, state.atom_count,
                             seed if isinstance(seed, (int, np.integer)) else None)


def _truncated_kets(atom_count, thetas, phis, n_max, sink):
    k = coherent_kets(atom_count, thetas, phis)[: n_max + 1].T  # (points, n_max+1)
    if sink:
        k = np.hstack([k, np.zeros((k.shape[0], 1), complex)])
    return k


def povm_elements(grid: TomographyGrid, errors: DetectionErrorModel, basis, n_max: int,
                  sink: bool = False) -> np.ndarray:
    """``{E_high, E_low}`` per grid point, shape (points, 2, d, d).

    ``E_high = (1 - eps10) Pi0 + eps01 (1 - Pi0)`` with ``Pi0 = R|0_N><0_N|R^dag``
    truncated to Dicke states ``0..n_max`` (plus a sink state if requested,
    on which ``E_high`` acts as ``eps01``).
    """
    basis = basis if isinstance(basis, DickeBasis) else DickeBasis(basis)
    if not 1 <= n_max <= basis.atom_count:
        raise ValueError(f"n_max must lie in 1..{basis.atom_count}")
    th, ph = grid.points()
    v = _truncated_kets(basis.atom_count, th, ph, n_max, sink)
    e01, e10 = errors.for_points(grid.size)
    d = v.shape[1]
    pi0 = np.einsum("ni,nj->nij", v, v.conj())
    eye = np.eye(d)
    high = (1 - e10)[:, None, None] * pi0 + e01[:, None, None] * (eye - pi0)
    return np.stack([high, eye - high], axis=1)


def _high_probabilities(v, kappa, e01, rho):
    # v_i^dag rho v_i for every row v_i of v
    p0 = np.einsum("ni,ni->n", v.conj(), v @ rho.T).real
    return e01 * np.trace(rho).real + kappa * p0


def _loglik(p, counts, shots):
    p = np.minimum(np.maximum(p, PROB_FLOOR), 1 - PROB_FLOOR)
    return float(counts @ np.log(p) + (shots - counts) @ np.log1p(-p))


def log_likelihood(state, dataset: TomographyDataset) -> float:
    """Binomial log-likelihood of the dataset under ``state``.

    ``state`` may be a full :class:`DickeState` or a :class:`Reconstruction`.
    """
    if isinstance(state, Reconstruction):
        state = state.state
    th, ph = dataset.grid.points()
    p = forward_probability(state, th, ph, dataset.errors)
    return _loglik(p, dataset.high_counts, dataset.shots)


@dataclass(frozen=True, eq=False)
class Reconstruction:
    """Result of :func:`mle_reconstruct`.

    ``matrix`` is the symmetric block on Dicke states ``0..n_max``;
    ``state`` embeds it into the full ``N+1`` basis.
    """

    matrix: np.ndarray = field(repr=False)
    atom_count: int
    n_max: int
    log_likelihood: float
    n_iter: int
    converged: bool
    sink_weight: float
    history: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def state(self) -> DickeState:
        full = np.zeros((self.atom_count + 1,) * 2, complex)
        d = self.n_max + 1
        full[:d, :d] = self.matrix
        return DickeState(DickeBasis(self.atom_count), full, validate=False)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    @property
    def populations(self) -> np.ndarray:
        return np.diag(self.matrix).real.copy()

    def diagnostics(self) -> dict:
        return {
            "log_likelihood": self.log_likelihood,
            "iterations": self.n_iter,
            "converged": self.converged,
            "sink_weight": self.sink_weight,
            "trace_sym": self.trace,
        }


def _batch_probabilities(v, kappa, e01, rho):
    # rho: (B, d, d) -> P(high): (B, points)
    p0 = np.einsum("ni,bin->bn", v.conj(), rho @ v.T).real
    tr = np.trace(rho, axis1=1, axis2=2).real
    return e01 * tr[:, None] + kappa * p0


def _batch_loglik(p, counts, shots):
    p = np.minimum(np.maximum(p, PROB_FLOOR), 1 - PROB_FLOOR)
    return np.sum(counts * np.log(p) + (shots - counts) * np.log1p(-p), axis=-1)


def _r_operator(v, kappa, e01, f_high, f_low, p):
    # R = sum_i f_low_i/p_low_i I + b_i (eps01_i I + kappa_i v_i v_i^dag), batched
    g_low = f_low / np.maximum(1 - p, PROB_FLOOR)
    b = f_high / np.maximum(p, PROB_FLOOR) - g_low
    scal = g_low.sum(axis=1) + b @ e01
    d = v.shape[1]
    return scal[:, None, None] * np.eye(d) + (v.T[None] * (b * kappa)[:, None, :]) @ v.conj()


def rrr_map(matrix, dataset: TomographyDataset, n_max: Optional[int] = None,
            sink: bool = True, frequencies=None) -> np.ndarray:
    """One undiluted ``R rho R / Tr`` update of ``matrix`` for ``dataset``.

    ``matrix`` lives on the truncated space (plus the sink dimension when
    ``sink`` is set). ``frequencies`` replaces the observed high frequencies,
    which allows non-integer data in fixed-point checks.
    """
    rho = np.asarray(matrix, dtype=complex)
    n_max = rho.shape[0] - 1 - int(sink) if n_max is None else n_max
    th, ph = dataset.grid.points()
    e01, e10 = dataset.errors.for_points(dataset.grid.size)
    v = _truncated_kets(dataset.atom_count, th, ph, n_max, sink)
    if v.shape[1] != rho.shape[0]:
        raise ValueError(f"matrix has dimension {rho.shape[0]}, expected {v.shape[1]}")
    kappa = 1 - e01 - e10
    freq = dataset.frequencies if frequencies is None else np.asarray(frequencies, float)
    w = dataset.shots / dataset.shots.sum()
    f_high = (freq * w)[None]
    f_low = ((1 - freq) * w)[None]
    p = _batch_probabilities(v, kappa, e01, rho[None])
    r = _r_operator(v, kappa, e01, f_high, f_low, p)[0]
    out = r @ rho @ r
    return out / np.trace(out).real


def rrr_iterate_batch(v, kappa, e01, counts, shots, config, record_history=False):
    """Diluted R-rho-R iteration for a batch of count vectors sharing one design.

    ``counts`` has shape (B, points). Every replica starts from the maximally
    mixed state and stops on its own; a step that would lower a replica's
    likelihood is retried with half the dilution weight, so accepted
    iterates have non-decreasing likelihood.

    Returns ``(rho, ll, n_iter, converged, history)`` with a leading batch axis
    (``history`` only for B == 1 when requested).
    """
    counts = np.atleast_2d(np.asarray(counts, float))
    shots = np.asarray(shots, float)
    n_batch, d = counts.shape[0], v.shape[1]
    total = shots.sum()
    f_high = counts / total
    f_low = (shots - counts) / total
    rho = np.repeat((np.eye(d, dtype=complex) / d)[None], n_batch, axis=0)
    p = _batch_probabilities(v, kappa, e01, rho)
    ll = _batch_loglik(p, counts, shots)
    history = [ll[0]] if record_history else None
    quiet = np.zeros(n_batch, int)
    n_iter = np.zeros(n_batch, int)
    converged = np.zeros(n_batch, bool)
    active = np.arange(n_batch)
    for _ in range(config.max_iterations):
        if active.size == 0:
            break
        r_, p_, ll_ = rho[active], p[active], ll[active]
        r = _r_operator(v, kappa, e01, f_high[active], f_low[active], p_)
        target = r @ r_ @ r
        target /= np.trace(target, axis1=1, axis2=2).real[:, None, None]
        new = target
        if config.dilution != 1.0:
            new = (1 - config.dilution) * r_ + config.dilution * target
        new = 0.5 * (new + new.conj().swapaxes(1, 2))
        p_new = _batch_probabilities(v, kappa, e01, new)
        ll_new = _batch_loglik(p_new, counts[active], shots)
        alpha = np.full(active.size, config.dilution)
        bad = np.flatnonzero(ll_new < ll_)
        while bad.size:
            alpha[bad] *= 0.5
            ok = alpha[bad] >= 1e-6
            bad = bad[ok]
            if not bad.size:
                break
            a = alpha[bad][:, None, None]
            trial = (1 - a) * r_[bad] + a * target[bad]
            trial = 0.5 * (trial + trial.conj().swapaxes(1, 2))
            new[bad] = trial
            p_new[bad] = _batch_probabilities(v, kappa, e01, trial)
            ll_new[bad] = _batch_loglik(p_new[bad], counts[active[bad]], shots)
            bad = bad[ll_new[bad] < ll_[bad]]
        stalled = ll_new < ll_
        accept = ~stalled
        acc = active[accept]
        rel = (ll_new[accept] - ll_[accept]) / np.maximum(np.abs(ll_[accept]), 1e-300)
        rho[acc], p[acc], ll[acc] = new[accept], p_new[accept], ll_new[accept]
        n_iter[acc] += 1
        quiet[acc] = np.where(rel < config.likelihood_tolerance, quiet[acc] + 1, 0)
        if record_history and n_batch == 1 and accept[0]:
            history.append(ll[0])
        done = stalled.copy()
        done[accept] |= quiet[acc] >= config.patience
        converged[active[done]] = True
        active = active[~done]
    hist = np.array(history) if record_history else None
    return rho, ll, n_iter, converged, hist


class MLETomography(RegressorMixin, BaseEstimator):
    """Maximum-likelihood reconstruction of the symmetric density matrix.

    Parameters
    ----------
    atom_count : int
        Number of atoms ``N``.
    n_max : int, default=4
        Highest Dicke state kept in the reconstruction basis.
    max_iterations, likelihood_tolerance, dilution, patience
        See :class:`ReconstructionConfig`.
    sink : bool, default=True
        Add one dimension for population outside the symmetric subspace, so
        that the reconstructed trace can fall below one.

    Notes
    -----
    ``X`` has one row per grid point with columns ``theta, phi`` and,
    optionally, ``eps01, eps10``. ``y`` holds the observed high-transmission
    frequencies and ``sample_weight`` the number of shots (default 1).
    ``predict`` returns the model probability of a high outcome.
    """

    def __init__(self, atom_count=36, n_max=4, max_iterations=10000,
                 likelihood_tolerance=1e-10, dilution=1.0, patience=10, sink=True,
                 record_history=False):
        self.atom_count = atom_count
        self.n_max = n_max
        self.max_iterations = max_iterations
        self.likelihood_tolerance = likelihood_tolerance
        self.dilution = dilution
        self.patience = patience
        self.sink = sink
        self.record_history = record_history

    def _config(self):
        return ReconstructionConfig(self.n_max, self.max_iterations,
                                    self.likelihood_tolerance, self.dilution, self.patience)

    def _design(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] not in (2, 4):
            raise ValueError(f"X must have 2 or 4 columns (theta, phi[, eps01, eps10]), got {X.shape[1]}")
        if X.shape[1] == 4:
            e01, e10 = X[:, 2], X[:, 3]
            DetectionErrorModel(e01, e10)
        else:
            e01 = e10 = np.zeros(X.shape[0])
        DickeBasis(self.atom_count)
        if not 1 <= self.n_max <= self.atom_count:
            raise ValueError(f"n_max must lie in 1..{self.atom_count}")
        v = _truncated_kets(self.atom_count, X[:, 0], X[:, 1], self.n_max, self.sink)
        return v, 1 - e01 - e10, e01

    def fit(self, X, y, sample_weight=None):
        config = self._config()
        v, kappa, e01 = self._design(X)
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != v.shape[0]:
            raise ValueError("X and y have inconsistent numbers of samples")
        if np.any((y < 0) | (y > 1)):
            raise ValueError("y must hold frequencies in [0, 1]")
        shots = _check_sample_weight(sample_weight, np.empty(y.shape[0]))
        counts = y * shots
        rho, ll, it, converged, hist = rrr_iterate_batch(v, kappa, e01, counts[None], shots,
                                                         config, self.record_history)
        rho, ll, it, converged = rho[0], float(ll[0]), int(it[0]), bool(converged[0])
        if not converged:
            logger.info("MLE stopped after %d iterations without meeting the tolerance", it)
        d = self.n_max + 1
        self.full_matrix_ = rho
        self.density_matrix_ = rho[:d, :d].copy()
        self.sink_weight_ = float(rho[d:, d:].trace().real) if self.sink else 0.0
        self.log_likelihood_ = ll
        self.n_iter_ = it
        self.converged_ = converged
        self.history_ = hist
        return self

    def fit_dataset(self, dataset: TomographyDataset):
        X, y, w = dataset.to_features()
        return self.fit(X, y, sample_weight=w)

    def predict(self, X):
        check_is_fitted(self, "full_matrix_")
        v, kappa, e01 = self._design(X)
        return np.clip(_high_probabilities(v, kappa, e01, self.full_matrix_), 0.0, 1.0)

    def score(self, X, y, sample_weight=None):
        """Mean binomial log-likelihood per shot."""
        p = self.predict(X)
        y = np.asarray(y, float).ravel()
        shots = _check_sample_weight(sample_weight, np.empty(y.shape[0]))
        return _loglik(p, y * shots, shots) / shots.sum()

    def reconstruction(self) -> Reconstruction:
        check_is_fitted(self, "full_matrix_")
        return Reconstruction(self.density_matrix_, self.atom_count, self.n_max,
                              self.log_likelihood_, self.n_iter_, self.converged_,
                              self.sink_weight_, self.history_)


def mle_reconstruct(dataset: TomographyDataset, config: Optional[ReconstructionConfig] = None,
                    record_history: bool = False) -> Reconstruction:
    """Maximum-likelihood estimate of the symmetric block from a dataset."""
    config = config or ReconstructionConfig()
    est = MLETomography(dataset.atom_count, config.n_max, config.max_iterations,
                        config.likelihood_tolerance, config.dilution, config.patience,
                        record_history=record_history)
    return est.fit_dataset(dataset).reconstruction()


def mle_reconstruct_many(dataset: TomographyDataset, counts,
                         config: Optional[ReconstructionConfig] = None) -> list:
    """Reconstruct several count vectors that share the grid, shots and errors
    of ``dataset``; the iterations run in lockstep across the batch."""
    config = config or ReconstructionConfig()
    counts = np.atleast_2d(np.asarray(counts, float))
    if counts.shape[1] != dataset.grid.size:
        raise ValueError("counts must have one column per grid point")
    est = MLETomography(dataset.atom_count, config.n_max)
    X, _, shots = dataset.to_features()
    v, kappa, e01 = est._design(X)
    rho, ll, it, conv, _ = rrr_iterate_batch(v, kappa, e01, counts, shots, config)
    d = config.n_max + 1
    return [
        Reconstruction(r[:d, :d].copy(), dataset.atom_count, config.n_max, float(l), int(i),
                       bool(c), float(r[d:, d:].trace().real))
        for r, l, i, c in zip(rho, ll, it, conv)
    ]


def fidelity(rho, sigma) -> float:
    """Uhlmann fidelity ``(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2``."""
    rho = rho.matrix if isinstance(rho, DickeState) else np.asarray(rho)
    sigma = sigma.matrix if isinstance(sigma, DickeState) else np.asarray(sigma)
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    sq = (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T
    inner = sq @ sigma @ sq
    ev = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    return float(np.sum(np.sqrt(np.clip(ev, 0, None))) ** 2)
