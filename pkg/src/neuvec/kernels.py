"""Covariance kernels used for simulation and as classical baselines.

Families
--------
MT15
    ARD Matern-3/2: ``sigma^2 M(||(x_i - x_j) / l||) + tau2 [i == j]``.
RangeNS
    Exponential kernel with an input-dependent lengthscale field
    ``l(x) = exp(beta0 + beta1 sin(3 pi s) + beta2 cos(2 pi s))``, ``s = sum(x)``.
Periodic
    ``sigma^2 exp(-(2 / l) sum_q sin^2(pi (x_iq - x_jq) / p))``.
DTMT15
    Matern-3/2 on linearly transformed inputs ``A x``, scaled by ``l``.
SpectralMixture
    Product-over-dimensions Gaussian-cosine mixture with Q components.

All evaluation is vectorized: location arrays of shape ``(..., n, d)`` give
covariance stacks of shape ``(..., n, n)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch, UnknownFamily, UnsupportedDimension

FAMILIES = ("MT15", "RangeNS", "Periodic", "DTMT15", "SpectralMixture")
SQRT3 = math.sqrt(3.0)

# parameter keys allowed for each family
_KEYS = {
    "MT15": ("sigma", "lengthscale", "nu", "tau2"),
    "RangeNS": ("sigma", "beta0", "beta1", "beta2", "tau2"),
    "Periodic": ("sigma", "lengthscale", "period", "tau2"),
    "DTMT15": ("sigma", "lengthscale", "A", "nu", "tau2"),
    "SpectralMixture": ("log_weights", "means", "log_variances", "tau2"),
}


def magic_square(d):
    """Lo-Shu magic square; only ``d = 3`` is supported."""
    if d != 3:
        raise UnsupportedDimension(f"magic square only available for d=3, got d={d}")
    return np.array([[8.0, 1.0, 6.0], [3.0, 5.0, 7.0], [4.0, 9.0, 2.0]])


def matern15(h):
    """Unit-lengthscale Matern-3/2 correlation ``(1 + sqrt(3) h) exp(-sqrt(3) h)``."""
    a = SQRT3 * h
    return (1.0 + a) * np.exp(-a)


@dataclass(frozen=True)
class KernelSpec:
    """Declarative covariance kernel: a family name plus named parameters.

    Array-valued parameters (``lengthscale`` for MT15, ``A``, spectral
    mixture tables) are stored as float arrays.
    """

    family: str
    params: dict = field(default_factory=dict)
    d: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnknownFamily(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        unknown = set(self.params) - set(_KEYS[self.family])
        if unknown:
            raise ConfigError(f"{self.family}: unexpected parameters {sorted(unknown)}")
        missing = set(_KEYS[self.family]) - set(self.params) - {"nu"}
        if missing:
            raise ConfigError(f"{self.family}: missing parameters {sorted(missing)}")
        p = {k: (np.asarray(v, dtype=np.float64) if np.ndim(v) else float(v))
             for k, v in self.params.items()}
        object.__setattr__(self, "params", p)
        self._validate()

    def _validate(self):
        p, d = self.params, self.d
        if d < 1:
            raise ConfigError("input dimension d must be >= 1")
        if "sigma" in p and not p["sigma"] > 0:
            raise ConfigError("sigma must be > 0")
        if not p["tau2"] >= 0:
            raise ConfigError("tau2 must be >= 0")
        if p.get("nu", 1.5) != 1.5:
            raise ConfigError("only nu = 1.5 is supported")
        if "lengthscale" in p:
            ls = np.atleast_1d(p["lengthscale"])
            if np.any(ls <= 0):
                raise ConfigError("lengthscales must be > 0")
            if self.family == "MT15" and ls.size not in (1, d):
                raise ConfigError(f"MT15 needs 1 or {d} lengthscales, got {ls.size}")
        if "period" in p and not p["period"] > 0:
            raise ConfigError("period must be > 0")
        if self.family == "DTMT15" and np.shape(p["A"]) != (d, d):
            raise ConfigError(f"A must be {d}x{d}")
        if self.family == "SpectralMixture":
            q = np.size(p["log_weights"])
            if np.shape(p["means"]) != (q, d) or np.shape(p["log_variances"]) != (q, d):
                raise ConfigError(f"means/log_variances must be ({q}, {d})")

    @property
    def variance(self):
        """Marginal variance without the nugget."""
        if self.family == "SpectralMixture":
            return float(np.sum(np.exp(self.params["log_weights"])))
        return self.params["sigma"] ** 2

    def replace(self, **params):
        new = dict(self.params)
        new.update(params)
        return KernelSpec(self.family, new, self.d)

    def to_dict(self):
        return {
            "family": self.family,
            "d": self.d,
            "params": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                       for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(obj["family"], dict(obj.get("params", {})), int(obj.get("d", 3)))
        except KeyError as exc:
            raise ConfigError(f"kernel config missing key {exc}") from None

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def table2_spec(family, d=3, rng=None, n_components=6):
    """Simulation kernels with the parameter values used for the benchmarks.

    ``SpectralMixture`` has no fixed truth; this returns the default
    initialization (equal weights, means drawn from U[0, 5], unit variances).
    """
    if family == "MT15":
        return KernelSpec("MT15", {"sigma": 1.0, "lengthscale": [0.3] * d, "nu": 1.5, "tau2": 0.01}, d)
    if family == "RangeNS":
        return KernelSpec("RangeNS", {"sigma": 1.0, "beta0": -2.0, "beta1": 1.0, "beta2": -1.0,
                                      "tau2": 0.01}, d)
    if family == "Periodic":
        return KernelSpec("Periodic", {"sigma": 1.0, "lengthscale": float(d), "period": 0.5,
                                       "tau2": 0.01}, d)
    if family == "DTMT15":
        return KernelSpec("DTMT15", {"sigma": 1.0, "lengthscale": math.sqrt(d) / 10.0,
                                     "A": magic_square(d), "nu": 1.5, "tau2": 0.01}, d)
    if family == "SpectralMixture":
        if rng is None:
            from .linalg import Rng
            rng = Rng(0)
        q = n_components
        return KernelSpec("SpectralMixture", {
            "log_weights": np.full(q, -math.log(q)),
            "means": 5.0 * rng.uniform((q, d)),
            "log_variances": np.zeros((q, d)),
            "tau2": 0.01,
        }, d)
    raise UnknownFamily(f"unknown kernel family {family!r}")


def _lengthscale_field(p, X):
    s = X.sum(axis=-1)
    return np.exp(p["beta0"] + p["beta1"] * np.sin(3.0 * np.pi * s) + p["beta2"] * np.cos(2.0 * np.pi * s))


def cross_covariance(spec, X1, X2):
    """Kernel values between two location stacks, without any nugget.

    ``X1``: ``(..., n1, d)``, ``X2``: ``(..., n2, d)`` -> ``(..., n1, n2)``.
    """
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.shape[-1] != spec.d or X2.shape[-1] != spec.d:
        raise DimensionMismatch(f"locations have d={X1.shape[-1]}/{X2.shape[-1]}, kernel expects {spec.d}")
    p = spec.params
    diff = X1[..., :, None, :] - X2[..., None, :, :]
    fam = spec.family
    if fam == "MT15":
        h = np.sqrt(np.sum((diff / p["lengthscale"]) ** 2, axis=-1))
        return p["sigma"] ** 2 * matern15(h)
    if fam == "DTMT15":
        Adiff = diff @ p["A"].T
        h = np.sqrt(np.sum(Adiff ** 2, axis=-1)) / p["lengthscale"]
        return p["sigma"] ** 2 * matern15(h)
    if fam == "Periodic":
        # sin(u - v) = sin u cos v - cos u sin v avoids pairwise trig calls
        u1, u2 = np.pi * X1 / p["period"], np.pi * X2 / p["period"]
        s1, c1, s2, c2 = np.sin(u1), np.cos(u1), np.sin(u2), np.cos(u2)
        sd = s1[..., :, None, :] * c2[..., None, :, :] - c1[..., :, None, :] * s2[..., None, :, :]
        s2 = sd * sd
        return p["sigma"] ** 2 * np.exp(-(2.0 / p["lengthscale"]) * s2.sum(axis=-1))
    if fam == "RangeNS":
        l1 = _lengthscale_field(p, X1)[..., :, None]
        l2 = _lengthscale_field(p, X2)[..., None, :]
        mean_l = (l1 + l2) / 2.0
        c = ((l1 ** 0.25 * l2 ** 0.25) / np.sqrt(mean_l)) ** spec.d
        h = np.sqrt(np.sum(diff ** 2, axis=-1)) / np.sqrt(mean_l)
        return p["sigma"] ** 2 * c * np.exp(-h)
    if fam == "SpectralMixture":
        w = np.exp(p["log_weights"])
        v = np.exp(p["log_variances"])
        mu = p["means"]
        tau = diff[..., None, :]  # (..., n1, n2, 1, d) against (Q, d)
        terms = np.exp(-2.0 * np.pi ** 2 * tau ** 2 * v) * np.cos(2.0 * np.pi * tau * mu)
        return np.sum(w * np.prod(terms, axis=-1), axis=-1)
    raise UnknownFamily(fam)


def kernel_eval(spec, x_i, x_j, same_index=False):
    """Single kernel value; the nugget is added only when ``same_index``."""
    x_i = np.asarray(x_i, dtype=np.float64).reshape(1, -1)
    x_j = np.asarray(x_j, dtype=np.float64).reshape(1, -1)
    val = float(cross_covariance(spec, x_i, x_j)[0, 0])
    if same_index:
        val += spec.params["tau2"]
    return val


def covariance_matrix(spec, locs):
    """Covariance over a location set (or stack of sets), nugget on the diagonal.

    The nugget follows index equality, so duplicated coordinates at distinct
    indices share covariance ``sigma^2`` but no nugget.
    """
    X = np.asarray(locs, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    K = cross_covariance(spec, X, X)
    n = X.shape[-2]
    K[..., np.arange(n), np.arange(n)] += spec.params["tau2"]
    return K
