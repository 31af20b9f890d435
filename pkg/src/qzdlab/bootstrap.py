"""Parametric bootstrap for quantities derived from tomographic reconstructions.

Each replica redraws the high-transmission counts at every grid point from a
binomial with the same number of shots and, by default, the observed
frequency as success probability. The replica is reconstructed and the
statistic evaluated; percentile intervals summarise the replica samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed

from .entanglement import entanglement_depth, optimize_fisher_axis
from .spin import transverse_spin_length
from .tomography import (
    Reconstruction,
    ReconstructionConfig,
    TomographyDataset,
    forward_probability,
    mle_reconstruct,
    mle_reconstruct_many,
)

logger = logging.getLogger(__name__)


# replicas reconstructed together in one batched iteration
CHUNK_SIZE = 250


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    """``resample`` is ``"empirical"`` (observed frequencies) or ``"model"``
    (forward probabilities of the point-estimate reconstruction)."""

    replicas: int = 1000
    seed: int = 0
    confidence_levels: tuple = (0.68, 0.95)
    resample: str = "empirical"
    workers: int = 1
    max_drop_fraction: float = 0.05

    def __post_init__(self):
        if self.replicas < 2:
            raise ValueError("replicas must be >= 2")
        levels = tuple(float(c) for c in self.confidence_levels)
        if any(not 0 < c < 1 for c in levels):
            raise ValueError("confidence levels must lie in (0, 1)")
        object.__setattr__(self, "confidence_levels", levels)
        if self.resample not in ("empirical", "model"):
            raise ValueError(f"unknown resampling scheme {self.resample!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class BootstrapResult:
    point_estimate: float
    samples: np.ndarray = field(repr=False)
    intervals: dict
    standard_deviation: float
    dropped: int = 0
    integer: bool = False

    def errors(self, level: float = 0.68):
        """``(minus, plus)`` distances from the point estimate to the interval ends."""
        lo, hi = self.intervals[level]
        return self.point_estimate - lo, hi - self.point_estimate

    def formatted(self, level: float = 0.68, digits: int = 2) -> str:
        """``"8 (+3/-5)"`` style summary.

        A percentile interval need not contain the point estimate; the
        offending side then carries the opposite sign.
        """
        minus, plus = self.errors(level)
        if self.integer:
            pe, plus, minus = int(round(self.point_estimate)), int(round(plus)), int(round(minus))
            fmt = "d"
        else:
            pe, fmt = self.point_estimate, f".{digits}f"
        up = f"+{plus:{fmt}}" if plus >= 0 else f"-{-plus:{fmt}}"
        down = f"-{minus:{fmt}}" if minus >= 0 else f"+{-minus:{fmt}}"
        return f"{pe:{fmt}} ({up}/{down})"

    def to_dict(self) -> dict:
        return {
            "point_estimate": self.point_estimate,
            "standard_deviation": self.standard_deviation,
            "intervals": {f"{k:g}": list(v) for k, v in self.intervals.items()},
            "replicas": int(self.samples.size),
            "dropped": self.dropped,
            "summary": self.formatted(),
        }


# -- statistics ---------------------------------------------------------------

def _population(index):
    def stat(rec: Reconstruction):
        return float(rec.populations[index]) if index <= rec.n_max else 0.0
    stat.__name__ = f"rho{index}{index}"
    return stat


def _trace(rec):
    return rec.trace


def _fisher(rec):
    return optimize_fisher_axis(rec.state)[1]


def _fisher_per_atom(rec):
    return _fisher(rec) / rec.atom_count


def _depth(rec):
    p = np.clip(rec.populations, 0.0, None)
    return float(entanglement_depth(p[0], min(p[1], 1 - p[0]), rec.atom_count))


def _transverse(rec):
    return transverse_spin_length(rec.state)


_NAMED = {
    "trace_sym": _trace,
    "fisher": _fisher,
    "fisher_per_atom": _fisher_per_atom,
    "depth": _depth,
    "transverse_spin": _transverse,
}
INTEGER_STATISTICS = {"depth"}


def resolve_statistic(name) -> Callable:
    """Map a statistic name (``rho00``..``rhoNN``, ``trace_sym``, ``fisher``,
    ``fisher_per_atom``, ``depth``, ``transverse_spin``) to a function of a
    :class:`Reconstruction`. Callables pass through."""
    if callable(name):
        return name
    if name in _NAMED:
        return _NAMED[name]
    if name.startswith("rho"):
        digits = name[3:]
        half = len(digits) // 2
        if digits.isdigit() and len(digits) % 2 == 0 and digits[:half] == digits[half:]:
            return _population(int(digits[:half]))
    raise ValueError(f"unknown statistic {name!r}")


def _name(stat) -> str:
    return stat if isinstance(stat, str) else getattr(stat, "__name__", "statistic")


# -- resampling -----------------------------------------------------------------

def replica_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replica ``index``, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def resample_counts(dataset: TomographyDataset, probabilities, rng) -> np.ndarray:
    return rng.binomial(dataset.shots, probabilities)


def _evaluate(rec, stats, index):
    try:
        values = [float(f(rec)) for f in stats]
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.warning("bootstrap replica %d failed: %s", index, exc)
        return None
    return values if all(np.isfinite(values)) else None


def _replica_chunk(dataset, probs, rec_config, stats, seed, indices):
    counts = np.array([resample_counts(dataset, probs, replica_rng(seed, i)) for i in indices])
    recs = mle_reconstruct_many(dataset, counts, rec_config)
    return [_evaluate(rec, stats, i) for rec, i in zip(recs, indices)]


def percentile_interval(samples, level: float, integer: bool = False):
    s = np.sort(np.asarray(samples, dtype=float))
    q_lo, q_hi = 50 * (1 - level), 50 * (1 + level)
    if integer:
        return (float(np.percentile(s, q_lo, method="lower")),
                float(np.percentile(s, q_hi, method="higher")))
    return float(np.percentile(s, q_lo)), float(np.percentile(s, q_hi))


def bootstrap(dataset: TomographyDataset, reconstruct: Optional[ReconstructionConfig] = None,
              statistic: Union[str, Callable, Sequence] = "trace_sym",
              config: Optional[BootstrapConfig] = None,
              point_reconstruction: Optional[Reconstruction] = None):
    """Parametric bootstrap of one or several statistics.

    Returns a :class:`BootstrapResult`, or a dict of them keyed by name when
    ``statistic`` is a list. All statistics share the same replicas.
    """
    reconstruct = reconstruct or ReconstructionConfig()
    config = config or BootstrapConfig()
    many = isinstance(statistic, (list, tuple))
    names = [_name(s) for s in (statistic if many else [statistic])]
    stats = [resolve_statistic(s) for s in (statistic if many else [statistic])]

    point = point_reconstruction or mle_reconstruct(dataset, reconstruct)
    if config.resample == "empirical":
        probs = dataset.frequencies
    else:
        th, ph = dataset.grid.points()
        probs = forward_probability(point.state, th, ph, dataset.errors)

    args = (dataset, probs, reconstruct, stats, config.seed)
    chunks = np.array_split(np.arange(config.replicas),
                            max(config.workers, -(-config.replicas // CHUNK_SIZE)))
    if config.workers > 1:
        parts = Parallel(n_jobs=config.workers)(delayed(_replica_chunk)(*args, c) for c in chunks)
    else:
        parts = [_replica_chunk(*args, c) for c in chunks]
    rows = [r for part in parts for r in part]
    kept = [r for r in rows if r is not None]
    dropped = config.replicas - len(kept)
    if dropped > config.max_drop_fraction * config.replicas:
        raise BootstrapError(
            f"{dropped} of {config.replicas} bootstrap replicas failed "
            f"(limit {config.max_drop_fraction:.0%})"
        )
    table = np.array(kept, dtype=float).reshape(len(kept), len(stats))

    results = {}
    for j, (name, f) in enumerate(zip(names, stats)):
        samples = table[:, j]
        integer = name in INTEGER_STATISTICS
        results[name] = BootstrapResult(
            point_estimate=float(f(point)),
            samples=samples,
            intervals={lvl: percentile_interval(samples, lvl, integer)
                       for lvl in config.confidence_levels},
            standard_deviation=float(np.std(samples, ddof=1)),
            dropped=dropped,
            integer=integer,
        )
    return results if many else results[names[0]]
