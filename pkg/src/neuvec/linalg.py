"""Dense symmetric linear algebra and reproducible Gaussian sampling.

Every routine accepts a stack of matrices: arrays with shape ``(..., n, n)``
are factorized/solved independently over the leading axes.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite

PIVOT_RTOL = 1e-12


class Rng:
    """Seeded pseudorandom stream.

    Uniform bits come from PCG64; standard normals are produced by the
    Box-Muller transform on those uniforms, so the normal stream does not
    depend on numpy's ziggurat implementation.

    Parameters
    ----------
    seed : int or sequence of int
        Identical seeds give identical streams.
    """

    def __init__(self, seed=0):
        self.seed = seed
        self._seq = np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def __repr__(self):
        return f"Rng(seed={self.seed!r})"

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * half)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n]
        return float(z[0]) if size is None else z.reshape(shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn(self, *key):
        """Independent child stream determined by ``(seed, *key)``."""
        base = list(self.seed) if isinstance(self.seed, (tuple, list)) else [self.seed]
        return Rng(tuple(base) + tuple(int(k) for k in key))

    @property
    def state(self):
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value):
        self._gen.bit_generator.state = value


def _check_square(A):
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionMismatch(f"expected square matrix (stack), got shape {A.shape}")
    if A.shape[-1] < 1:
        raise DimensionMismatch("matrix dimension must be >= 1")


def cholesky(A):
    """Lower Cholesky factor ``L`` with ``L @ L.T == A``.

    Raises
    ------
    NotPositiveDefinite
        If a pivot falls at or below ``1e-12 * max(diag(A))``.
    """
    A = np.asarray(A, dtype=np.float64)
    _check_square(A)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    diagA = np.diagonal(A, axis1=-2, axis2=-1)
    pivots = np.diagonal(L, axis1=-2, axis2=-1) ** 2
    tol = PIVOT_RTOL * np.max(diagA, axis=-1, keepdims=True)
    if not np.all(np.isfinite(L)) or np.any(pivots <= tol):
        raise NotPositiveDefinite("pivot below tolerance")
    return L


def solve_triangular(L, b, side="lower"):
    """Solve ``L x = b`` (``side="lower"``) or ``L.T x = b`` (``side="upper"``).

    ``b`` may be a vector stack ``(..., n)`` or a matrix stack ``(..., n, k)``.
    Plain forward/back substitution, vectorized over the leading axes.
    """
    L = np.asarray(L, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_square(L)
    n = L.shape[-1]
    if side not in ("lower", "upper"):
        raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
    vector = b.ndim == L.ndim - 1
    if vector:
        if b.shape[-1] != n:
            raise DimensionMismatch(f"rhs length {b.shape[-1]} != {n}")
        b = b[..., None]
    elif b.ndim != L.ndim or b.shape[-2] != n:
        raise DimensionMismatch(f"rhs shape {b.shape} incompatible with {L.shape}")
    # broadcast leading axes
    lead = np.broadcast_shapes(L.shape[:-2], b.shape[:-2])
    L = np.broadcast_to(L, lead + (n, n))
    x = np.array(np.broadcast_to(b, lead + b.shape[-2:]), dtype=np.float64)
    if side == "upper":
        # L.T is upper triangular: back substitution with column i of L
        for i in range(n - 1, -1, -1):
            if i + 1 < n:
                x[..., i, :] -= (L[..., None, i + 1:, i] @ x[..., i + 1:, :])[..., 0, :]
            x[..., i, :] /= L[..., i, i][..., None]
    else:
        for i in range(n):
            if i:
                x[..., i, :] -= (L[..., i:i + 1, :i] @ x[..., :i, :])[..., 0, :]
            x[..., i, :] /= L[..., i, i][..., None]
    return x[..., 0] if vector else x


def cho_solve(L, b):
    """Solve ``(L L^T) x = b`` given the lower factor."""
    return solve_triangular(L, solve_triangular(L, b, "lower"), "upper")


def sample_mvn(mean, chol, rng):
    """Draw ``mean + L z`` with ``z`` standard normal from ``rng``.

    ``chol`` must have a strictly positive diagonal; a zero-scale factor is
    rejected rather than producing a degenerate draw.
    """
    mean = np.asarray(mean, dtype=np.float64)
    chol = np.asarray(chol, dtype=np.float64)
    _check_square(chol)
    if mean.shape[-1] != chol.shape[-1]:
        raise DimensionMismatch(f"mean length {mean.shape[-1]} != {chol.shape[-1]}")
    if np.any(np.diagonal(chol, axis1=-2, axis2=-1) <= 0.0):
        raise NotPositiveDefinite("Cholesky factor must have a positive diagonal")
    lead = np.broadcast_shapes(mean.shape[:-1], chol.shape[:-2])
    z = rng.normal(lead + (chol.shape[-1],))
    return mean + np.einsum("...ij,...j->...i", chol, z)
