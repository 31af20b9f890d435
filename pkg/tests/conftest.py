import itertools
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_density_matrix(dim, rng, rank=None, trace=1.0):
    rank = rank or dim
    a = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    m = a @ a.conj().T
    return trace * m / np.trace(m).real


def qubit_collective_operators(n):
    """Brute-force J_x, J_y, J_z on the 2^n tensor-product space."""
    sx = np.array([[0, 1], [1, 0]], complex) / 2
    # index 0 is the lower level, so s_y = (s+ - s-)/2i has +i/2 above the diagonal
    sy = np.array([[0, 1j], [-1j, 0]], complex) / 2
    sz = np.array([[-1, 0], [0, 1]], complex) / 2  # |0> has s_z = -1/2
    eye = np.eye(2)
    out = []
    for s in (sx, sy, sz):
        total = np.zeros((2 ** n, 2 ** n), complex)
        for site in range(n):
            op = np.array([[1.0]])
            for j in range(n):
                op = np.kron(op, s if j == site else eye)
            total += op
        out.append(total)
    return out


def dicke_vectors(n):
    """Columns: normalized symmetric states with k excitations, k = 0..n."""
    from itertools import combinations

    cols = []
    for k in range(n + 1):
        v = np.zeros(2 ** n)
        for ones in combinations(range(n), k):
            idx = sum(1 << (n - 1 - i) for i in ones)
            v[idx] = 1
        cols.append(v / np.linalg.norm(v))
    return np.array(cols).T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def partitions(n, k):
    """All partitions of ``n`` into parts of size <= k (non-increasing)."""
    if n == 0:
        yield ()
        return
    for first in range(min(n, k), 0, -1):
        for rest in partitions(n - first, first):
            yield (first,) + rest


def product_support_oracle(sizes, n, lam, rng, samples=2000, polish=4):
    """Brute-force ``max rho11 + lam*rho00`` over products of pure symmetric
    group states with the given group sizes.

    Each group holds a full (size+1)-dimensional amplitude vector; random
    starts are polished with BFGS. The corners where every group sits in its
    zero- or one-excitation state are scored exactly as well, since BFGS
    reaches those optima only slowly from the interior.
    """
    from scipy.optimize import minimize

    dims = [s + 1 for s in sizes]
    weights = np.sqrt(np.array(sizes) / n)
    offsets = np.cumsum([0] + [2 * d for d in dims])

    def value(p):
        p = np.atleast_2d(p)
        a, w = [], []
        for g, d in enumerate(dims):
            blk = p[:, offsets[g]:offsets[g + 1]]
            v = blk[:, :d] + 1j * blk[:, d:]
            v = v / np.linalg.norm(v, axis=1, keepdims=True)
            a.append(v[:, 0])
            w.append(v[:, 1])
        a, w = np.array(a), np.array(w)
        amp = 0
        for g in range(len(sizes)):
            amp = amp + weights[g] * w[g] * np.prod(np.delete(a, g, axis=0), axis=0)
        return np.abs(amp) ** 2 + lam * np.abs(np.prod(a, axis=0)) ** 2

    starts = rng.normal(size=(samples, offsets[-1]))
    vals = value(starts)
    best = vals.max()
    for i in np.argsort(vals)[-polish:]:
        res = minimize(lambda q: -value(q)[0], starts[i], method="BFGS")
        best = max(best, -res.fun)
    for mask in itertools.product((0, 1), repeat=len(dims)):
        c = np.zeros(offsets[-1])
        for g, m in enumerate(mask):
            c[offsets[g] + m] = 1.0
        best = max(best, value(c)[0])
    return best
