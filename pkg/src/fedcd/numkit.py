"""Dense numeric substrate: matrix exponential, Cholesky with jitter, seeded streams.

Matrices are plain ``float64`` numpy arrays. Randomness flows through
:class:`RngStream`, a Philox (counter-based) generator keyed by a master seed
and a stream path, so child streams can be derived without consuming draws.
"""

from __future__ import annotations

import math

import numpy as np

# Taylor order and target norm for scaling-and-squaring.
_EXPM_ORDER = 18
_EXPM_TARGET_NORM = 0.5


class DimensionError(ValueError):
    pass


class FactorizationError(np.linalg.LinAlgError):
    pass


def _check_square(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    return M


def matexp(M: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with an order-18 Taylor sum."""
    M = _check_square(M)
    d = M.shape[0]
    norm = np.abs(M).sum(axis=0).max() if d else 0.0
    s = 0
    if norm > _EXPM_TARGET_NORM:
        s = int(math.ceil(math.log2(norm / _EXPM_TARGET_NORM)))
    A = M / (2.0 ** s)
    eye = np.eye(d)
    # Horner: I + A/1 (I + A/2 (I + ... (I + A/18)))
    E = eye.copy()
    for k in range(_EXPM_ORDER, 0, -1):
        E = eye + (A @ E) / k
    for _ in range(s):
        E = E @ E
    return E


def trace_exp_gradient(M: np.ndarray) -> np.ndarray:
    """Gradient of ``Tr[exp(M)]`` with respect to ``M``, i.e. ``exp(M).T``."""
    return matexp(M).T


def cholesky(K: np.ndarray, return_jitter: bool = False):
    """Lower Cholesky factor of a symmetric matrix, adding diagonal jitter if needed.

    The jitter ladder starts at ``1e-10 * mean(diag)`` and grows tenfold up to
    ``1e-4 * mean(diag)``; an exact factorization is tried first.
    """
    K = _check_square(K)
    if not np.allclose(K, K.T, rtol=1e-12, atol=1e-12):
        raise FactorizationError("matrix is not symmetric")
    scale = float(np.mean(np.diag(K))) if K.size else 1.0
    if scale <= 0:
        scale = 1.0
    eye = np.eye(K.shape[0])
    jitters = [0.0] + [scale * 10.0 ** e for e in range(-10, -3)]
    for jitter in jitters:
        try:
            L = np.linalg.cholesky(K + jitter * eye if jitter else K)
        except np.linalg.LinAlgError:
            continue
        return (L, jitter) if return_jitter else L
    raise FactorizationError(
        f"matrix not positive definite even with jitter {jitters[-1]:.3g}")


class RngStream:
    """Deterministic random stream identified by ``(seed, path)``.

    Streams are single-owner. ``split(k)`` derives an independent child from
    the identity alone, so the parent's draw position never matters.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._bitgen = np.random.Philox(ss)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"

    def split(self, k: int) -> RngStream:
        return RngStream(self.seed, self.path + (k,))

    def uniform01(self, size=None):
        """Uniform draws on the open interval (0, 1) from 53 random bits."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._bitgen.random_raw(n) >> np.uint64(11)
        u = (raw.astype(np.float64) + 0.5) * 2.0 ** -53
        return float(u[0]) if size is None else u.reshape(size)

    def gaussian(self, size=None):
        """Standard normal draws via the Box-Muller transform."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = self.uniform01(pairs)
        u2 = self.uniform01(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return float(z[0]) if size is None else z[:n].reshape(size)

    def gumbel(self, size=None):
        """Standard Gumbel(0, 1) draws, ``-log(-log(u))``."""
        u = self.uniform01(size)
        return -np.log(-np.log(u)) if size is not None else -math.log(-math.log(u))

    def uniform(self, low: float, high: float, size=None):
        return low + (high - low) * self.uniform01(size)

    def integers(self, high: int, size=None):
        """Integers in ``[0, high)``."""
        u = self.uniform01(size)
        return np.minimum((u * high).astype(np.int64), high - 1) if size is not None \
            else min(int(u * high), high - 1)

    def signs(self, size):
        return np.where(self.uniform01(size) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform01(n - 1)
        for idx, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[idx] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """Sorted uniform ``k``-subset of ``range(n)`` without replacement."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n}")
        perm = np.arange(n)
        if k:
            u = self.uniform01(k)
            for i in range(k):
                j = i + min(int(u[i] * (n - i)), n - i - 1)
                perm[i], perm[j] = perm[j], perm[i]
        return np.sort(perm[:k])


def rng_draw(stream: RngStream, kind: str) -> float:
    """Single draw of ``kind`` in {"uniform01", "gaussian", "gumbel"}."""
    if kind == "uniform01":
        return stream.uniform01()
    if kind == "gaussian":
        return stream.gaussian()
    if kind == "gumbel":
        return stream.gumbel()
    raise ValueError(f"unknown draw kind {kind!r}")
