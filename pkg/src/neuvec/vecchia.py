"""Vecchia approximation in the kriging-coefficient parameterization.

Each observation, taken in plan order, gets a conditional law
``y_i | y_c(i) ~ N(mu_i + beta^T (y_c - mu_c), sigma^2)``.  The collection
of laws is interchangeable with the sparse upper-triangular inverse Cholesky
factor ``V`` of the approximate covariance, ``Sigma~ = (V V^T)^{-1}``:

    V[i, i] = 1 / sigma_i,      V[c(i), i] = -beta_i / sigma_i.

Positions refer to places in ``plan.order``; per-observation arrays such as
responses and means are indexed by the original observation index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, NotPositiveDefinite, ShapeMismatch
from .kernels import covariance_matrix
from .linalg import cholesky, solve_triangular

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class ConditioningPlan:
    """Ordering plus conditioning sets.

    Attributes
    ----------
    order : ndarray of int
        ``order[k]`` is the observation at position ``k``.
    neighbors : list of ndarray of int
        ``neighbors[k]`` holds sorted positions ``< k``.
    m : int
        Maximum conditioning-set size.
    flagged : list of int
        Positions that were expected to have neighbors but had no eligible
        candidate (see ``build_plan``'s ``require`` argument).
    """

    order: np.ndarray
    neighbors: list
    m: int
    flagged: list = None

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self.neighbors = [np.asarray(c, dtype=np.int64) for c in self.neighbors]
        if self.flagged is None:
            self.flagged = []
        self.validate()

    def validate(self):
        n = len(self.order)
        if len(self.neighbors) != n:
            raise ShapeMismatch(f"{len(self.neighbors)} neighbor sets for {n} positions")
        if sorted(self.order.tolist()) != list(range(n)):
            raise ShapeMismatch("order is not a permutation of 0..n-1")
        for k, c in enumerate(self.neighbors):
            if len(c) > self.m:
                raise ShapeMismatch(f"position {k}: |c| = {len(c)} exceeds m = {self.m}")
            if len(c) and (c.min() < 0 or c.max() >= k):
                raise ShapeMismatch(f"position {k}: neighbors must precede it")
            if len(np.unique(c)) != len(c):
                raise ShapeMismatch(f"position {k}: duplicate neighbors")

    def __len__(self):
        return len(self.order)

    @property
    def position_of(self):
        pos = np.empty_like(self.order)
        pos[self.order] = np.arange(len(self.order))
        return pos

    def neighbor_indices(self, k):
        """Observation indices of the conditioning set at position ``k``."""
        return self.order[self.neighbors[k]]

    def to_text(self):
        """One line per observation in plan order: ``i: j1 j2 ...`` (observation indices)."""
        lines = []
        for k, c in enumerate(self.neighbors):
            js = " ".join(str(int(j)) for j in self.order[c])
            lines.append(f"{int(self.order[k])}:{' ' + js if js else ''}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, m=None):
        order, nbr_obs = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            head, _, tail = line.partition(":")
            if not _:
                raise ShapeMismatch(f"line {lineno}: expected 'i: j1 j2 ...'")
            order.append(int(head))
            nbr_obs.append([int(t) for t in tail.split()])
        order = np.array(order, dtype=np.int64)
        pos = np.empty_like(order)
        pos[order] = np.arange(len(order))
        neighbors = [np.sort(pos[np.array(js, dtype=np.int64)]) if js else np.zeros(0, np.int64)
                     for js in nbr_obs]
        if m is None:
            m = max((len(c) for c in neighbors), default=0)
        return cls(order, neighbors, m)


@dataclass
class ConditionalLaw:
    """Kriging coefficients and conditional SD for one observation."""

    beta: np.ndarray
    sigma: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")


class SparseInvChol:
    """Sparse upper-triangular inverse Cholesky factor, stored column-wise.

    Column ``i`` is kept as the scale ``sigma_i`` and the unit-diagonal part
    ``u_i = V[c(i), i] / V[i, i]``, i.e. ``V = U diag(1 / sigma)``.  This makes
    the correspondence with conditional laws exact in floating point.
    """

    def __init__(self, plan, scales, offdiag):
        if len(scales) != len(plan) or len(offdiag) != len(plan):
            raise ShapeMismatch("factor columns do not match plan length")
        for k, (u, c) in enumerate(zip(offdiag, plan.neighbors)):
            if len(u) != len(c):
                raise ShapeMismatch(f"column {k}: {len(u)} entries for {len(c)} neighbors")
        self.plan = plan
        self.scales = np.asarray(scales, dtype=np.float64)
        if np.any(self.scales <= 0):
            raise ValueError("diagonal of V must be positive")
        self.offdiag = [np.asarray(u, dtype=np.float64) for u in offdiag]

    @property
    def diagonal(self):
        return 1.0 / self.scales

    def column(self, k):
        """``(rows, values)`` of column ``k`` in position space; the last row is ``k``."""
        rows = np.append(self.plan.neighbors[k], k)
        vals = np.append(self.offdiag[k] / self.scales[k], 1.0 / self.scales[k])
        return rows, vals

    def to_dense(self):
        n = len(self.plan)
        V = np.zeros((n, n))
        for k in range(n):
            rows, vals = self.column(k)
            V[rows, k] = vals
        return V

    @classmethod
    def from_dense(cls, V, plan):
        V = np.asarray(V, dtype=np.float64)
        diag = np.diagonal(V)
        if np.any(diag <= 0):
            raise ValueError("diagonal of V must be positive")
        scales = 1.0 / diag
        offdiag = [V[c, k] / V[k, k] for k, c in enumerate(plan.neighbors)]
        return cls(plan, scales, offdiag)

    def covariance(self):
        """Dense ``(V V^T)^{-1}`` in position space."""
        V = self.to_dense()
        return np.linalg.inv(V @ V.T)


def build_plan(locs, m, lengthscales=None, order=None, eligible=None, require=None):
    """Nearest-earlier-neighbor conditioning sets by brute force.

    Parameters
    ----------
    locs : array (n, d)
    m : int
        Maximum conditioning size.
    lengthscales : array (d,), optional
        Distances are computed on ``locs / lengthscales``.
    order : array of int, optional
        Observation ordering; defaults to lexicographic (first coordinate
        primary, ties broken by later coordinates, then index).
    eligible : callable, optional
        ``eligible(target_obs, candidate_obs_array) -> bool mask`` restricting
        candidate neighbors (e.g. same-year / different-float rules).
    require : callable, optional
        ``require(k) -> bool``; positions where it is true but no candidate
        is eligible are recorded in ``plan.flagged``.
    """
    X = np.asarray(locs, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n == 0:
        raise EmptyInput("cannot build a plan over zero locations")
    if m < 1:
        raise ValueError("m must be >= 1")
    if lengthscales is not None:
        ls = np.asarray(lengthscales, dtype=np.float64)
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be strictly positive")
        X = X / ls
    if order is None:
        keys = [np.arange(n)] + [X[:, q] for q in range(X.shape[1] - 1, -1, -1)]
        order = np.lexsort(keys)
    order = np.asarray(order, dtype=np.int64)
    Xo = X[order]
    neighbors, flagged = [], []
    for k in range(n):
        cand = np.arange(k)
        if eligible is not None and k:
            cand = cand[np.asarray(eligible(order[k], order[cand]), dtype=bool)]
        if len(cand) == 0:
            if k and require is not None and require(k):
                flagged.append(k)
            neighbors.append(np.zeros(0, np.int64))
            continue
        dist = np.sum((Xo[cand] - Xo[k]) ** 2, axis=1)
        nearest = cand[np.argsort(dist, kind="stable")[:m]]
        neighbors.append(np.sort(nearest))
    return ConditioningPlan(order, neighbors, m, flagged)


def full_plan(n, order=None):
    """Plan with ``c(i) = {all earlier positions}``; exact joint density."""
    order = np.arange(n) if order is None else order
    return ConditioningPlan(order, [np.arange(k) for k in range(n)], max(n - 1, 1))


def conditional_from_covariance(S):
    """Kriging coefficients and conditional SDs from covariance stacks.

    ``S`` has shape ``(..., s + 1, s + 1)`` with the target in the last
    row/column.  Returns ``beta (..., s)`` and ``sigma (...)``.
    """
    S = np.asarray(S, dtype=np.float64)
    s = S.shape[-1] - 1
    if s == 0:
        return np.zeros(S.shape[:-2] + (0,)), np.sqrt(S[..., 0, 0])
    L = cholesky(S[..., :s, :s])
    w = solve_triangular(L, S[..., :s, s], "lower")
    beta = solve_triangular(L, w, "upper")
    var = S[..., s, s] - np.sum(w * w, axis=-1)
    if np.any(var <= 0):
        raise NotPositiveDefinite("nonpositive conditional variance")
    return beta, np.sqrt(var)


def exact_conditional(spec, locs, i, c):
    """Exact law of ``y_i`` given ``y_c`` under ``spec`` (observation indices)."""
    X = np.asarray(locs, dtype=np.float64)
    idx = np.append(np.asarray(c, dtype=np.int64), int(i))
    beta, sigma = conditional_from_covariance(covariance_matrix(spec, X[idx]))
    return ConditionalLaw(beta, float(sigma))


def _size_groups(plan, positions):
    groups = {}
    for k in positions:
        groups.setdefault(len(plan.neighbors[k]), []).append(k)
    return groups


def exact_law_arrays(spec, locs, plan, positions=None):
    """Batched exact laws, grouped by conditioning size.

    Returns ``{size: (positions, beta (B, size), sigma (B,))}``.
    """
    X = np.asarray(locs, dtype=np.float64)
    positions = range(len(plan)) if positions is None else positions
    out = {}
    for s, ks in _size_groups(plan, positions).items():
        ks = np.asarray(ks, dtype=np.int64)
        nbr = np.array([plan.order[plan.neighbors[k]] for k in ks], dtype=np.int64).reshape(len(ks), s)
        idx = np.concatenate([nbr, plan.order[ks][:, None]], axis=1)
        beta, sigma = conditional_from_covariance(covariance_matrix(spec, X[idx]))
        out[s] = (ks, beta, sigma)
    return out


def exact_laws(spec, locs, plan):
    """Exact conditional law for every position of ``plan``."""
    laws = [None] * len(plan)
    for ks, beta, sigma in exact_law_arrays(spec, locs, plan).values():
        for k, b, sd in zip(ks, beta, sigma):
            laws[k] = ConditionalLaw(b, float(sd))
    return laws


def laws_to_factor(laws, plan):
    """Conditional laws -> sparse inverse Cholesky factor."""
    if len(laws) != len(plan):
        raise ShapeMismatch(f"{len(laws)} laws for a plan of {len(plan)}")
    for k, (law, c) in enumerate(zip(laws, plan.neighbors)):
        if len(law.beta) != len(c):
            raise ShapeMismatch(f"position {k}: beta has {len(law.beta)} entries, |c| = {len(c)}")
    return SparseInvChol(plan, [law.sigma for law in laws], [-law.beta for law in laws])


def factor_to_laws(V):
    """Sparse inverse Cholesky factor -> conditional laws."""
    return [ConditionalLaw(-u, float(s)) for u, s in zip(V.offdiag, V.scales)]


def _check_lengths(plan, *arrays):
    for a in arrays:
        if a is not None and len(a) != len(plan):
            raise ShapeMismatch(f"array of length {len(a)} for a plan of {len(plan)}")


def vecchia_nll(laws, plan, y, mu=None):
    """Negative log of the Vecchia density ``prod_i f(y_i | y_c(i))``."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.zeros_like(y) if mu is None else np.asarray(mu, dtype=np.float64)
    _check_lengths(plan, laws, y, mu)
    r = (y - mu)[plan.order]
    terms = np.empty(len(plan))
    for k, (law, c) in enumerate(zip(laws, plan.neighbors)):
        if len(law.beta) != len(c):
            raise ShapeMismatch(f"position {k}: beta/neighbor size mismatch")
        resid = r[k] - law.beta @ r[c]
        terms[k] = math.log(law.sigma) + resid * resid / (2.0 * law.sigma ** 2) + HALF_LOG_2PI
    return float(np.sum(terms))


def exact_vecchia_nll(spec, locs, plan, y, mu=None, positions=None):
    """Vecchia NLL with exact laws from ``spec``, summed over ``positions``.

    Batched counterpart of ``vecchia_nll(exact_laws(...))``; used for kernel
    fitting where the same plan is evaluated many times.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.zeros_like(y) if mu is None else np.asarray(mu, dtype=np.float64)
    r = (y - mu)[plan.order]
    total = 0.0
    for s, (ks, beta, sigma) in sorted(exact_law_arrays(spec, locs, plan, positions).items()):
        if s:
            nbr = np.array([plan.neighbors[k] for k in ks], dtype=np.int64)
            resid = r[ks] - np.sum(beta * r[nbr], axis=1)
        else:
            resid = r[ks]
        total += float(np.sum(np.log(sigma) + resid ** 2 / (2.0 * sigma ** 2) + HALF_LOG_2PI))
    return total


def dense_mvn_nll(Sigma, y, mu=None):
    """``-log N(y; mu, Sigma)`` via Cholesky; reference for full conditioning."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.zeros_like(y) if mu is None else np.asarray(mu, dtype=np.float64)
    L = cholesky(Sigma)
    z = solve_triangular(L, y - mu, "lower")
    return float(np.sum(np.log(np.diagonal(L))) + 0.5 * z @ z + len(y) * HALF_LOG_2PI)


def vecchia_predict(laws, plan, y_observed, mu, target_positions):
    """Conditional mean and SD for target positions.

    Targets may condition only on non-target positions; ``y_observed`` is
    indexed by observation and its entries at targets are ignored.
    """
    y = np.asarray(y_observed, dtype=np.float64)
    mu = np.zeros_like(y) if mu is None else np.asarray(mu, dtype=np.float64)
    _check_lengths(plan, laws, y, mu)
    targets = [int(t) for t in target_positions]
    target_set = set(targets)
    r = (y - mu)[plan.order]
    mu_o = mu[plan.order]
    means, sds = np.empty(len(targets)), np.empty(len(targets))
    for t, k in enumerate(targets):
        c = plan.neighbors[k]
        if target_set.intersection(c.tolist()):
            raise ShapeMismatch(f"target position {k} conditions on another target")
        law = laws[k]
        if len(law.beta) != len(c):
            raise ShapeMismatch(f"position {k}: beta/neighbor size mismatch")
        means[t] = mu_o[k] + (law.beta @ r[c] if len(c) else 0.0)
        sds[t] = law.sigma
    return means, sds
