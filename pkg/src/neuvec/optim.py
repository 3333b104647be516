"""AdamW, cosine learning-rate decay, and finite-difference kernel fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, IterOutOfRange, NonFiniteLoss, NotPositiveDefinite, ShapeMismatch
from .kernels import KernelSpec
from .vecchia import exact_vecchia_nll


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list = None
    v: list = None

    def init_moments(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adamw_step(state, params, grads):
    """One AdamW update with decoupled weight decay.

    Returns new parameter arrays; ``state`` is advanced in place.
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    if state.m is None:
        state.init_moments(params)
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match parameters")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    lr, wd = state.lr, state.weight_decay
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g) or np.shape(p) != state.m[k].shape:
            raise ShapeMismatch(f"parameter {k}: shape {np.shape(p)} vs gradient {np.shape(g)}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        decayed = p * (1.0 - lr * wd)
        out.append(decayed - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass
class CosineSchedule:
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    total_iters: int = 1

    def __call__(self, it):
        return schedule_lr(self, it)


def schedule_lr(schedule, it):
    """Cosine interpolation from ``lr_start`` (iter 0) to ``lr_end`` (iter ``total_iters``)."""
    T = schedule.total_iters
    if not 0 <= it <= T:
        raise IterOutOfRange(f"iteration {it} outside [0, {T}]")
    if T == 0:
        return schedule.lr_start
    if it == T:
        return schedule.lr_end
    w = 0.5 * (1.0 + math.cos(math.pi * it / T))
    return schedule.lr_end + (schedule.lr_start - schedule.lr_end) * w


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]


# -- classical kernel fitting -------------------------------------------------

# (key, transform) for every free parameter, per family
_FREE = {
    "MT15": [("sigma", "log"), ("lengthscale", "log"), ("tau2", "log")],
    "Periodic": [("sigma", "log"), ("lengthscale", "log"), ("period", "log"), ("tau2", "log")],
    "DTMT15": [("sigma", "log"), ("lengthscale", "log"), ("tau2", "log")],
    "RangeNS": [("sigma", "log"), ("beta0", "id"), ("beta1", "id"), ("beta2", "id"), ("tau2", "log")],
}
TAU2_FLOOR = 1e-8


def _slots(spec):
    """Flattened (key, index, transform) list of free parameters."""
    if spec.family not in _FREE:
        raise FitError(f"fitting is not supported for family {spec.family}")
    slots = []
    for key, tr in _FREE[spec.family]:
        val = spec.params[key]
        if np.ndim(val):
            slots.extend((key, i, tr) for i in range(np.size(val)))
        else:
            slots.append((key, None, tr))
    return slots


def _pack(spec, slots):
    theta = np.empty(len(slots))
    for k, (key, idx, tr) in enumerate(slots):
        val = spec.params[key] if idx is None else np.ravel(spec.params[key])[idx]
        if key == "tau2":
            val = max(val, TAU2_FLOOR)
        theta[k] = math.log(val) if tr == "log" else val
    return theta


def _unpack(spec, slots, theta):
    params = {k: (np.array(v, copy=True) if isinstance(v, np.ndarray) else v) for k, v in spec.params.items()}
    for (key, idx, tr), t in zip(slots, theta):
        val = math.exp(t) if tr == "log" else float(t)
        if idx is None:
            params[key] = val
        else:
            params[key].reshape(-1)[idx] = val
    return KernelSpec(spec.family, params, spec.d)


@dataclass
class FitResult:
    spec: KernelSpec
    nll: float
    initial_nll: float
    trace: list = field(default_factory=list)


def fit_kernel_params(family, data, plan, init=None, *, positions=None, mu=None, iters=200,
                      lr=0.05, h=1e-4, frozen=(), d=None):
    """Fit a classical kernel by minimizing the exact-law Vecchia NLL.

    Gradients are central finite differences (step ``h``) in the transformed
    (mostly log) parameter space, fed to ``adamw_step`` without weight decay.

    Parameters
    ----------
    family : str
        Kernel family; the number of free parameters must not exceed ``2d + 2``.
    data : (locs, y)
    plan : ConditioningPlan
    init : KernelSpec, optional
        Starting point; defaults to unit variance, lengthscale 0.3, nugget 0.01.
    positions : sequence of int, optional
        Plan positions scored by the objective (default: all).
    frozen : iterable of str
        Parameter names held fixed (``"lengthscale"`` freezes all its entries).

    Returns
    -------
    FitResult
        Best spec seen (never worse than ``init``) and its mean NLL.
    """
    locs, y = data
    locs = np.asarray(locs, dtype=np.float64)
    d = locs.shape[-1] if d is None else d
    if init is None:
        init = _default_init(family, d)
    if init.family != family:
        raise FitError(f"init family {init.family} != {family}")
    slots = _slots(init)
    if len(slots) > 2 * d + 2:
        raise FitError(f"{family} has {len(slots)} free parameters (> 2d + 2 = {2 * d + 2})")
    active = np.array([key not in frozen for key, _, _ in slots])
    n_scored = len(plan) if positions is None else len(positions)

    def objective(theta):
        try:
            val = exact_vecchia_nll(_unpack(init, slots, theta), locs, plan, y, mu, positions) / n_scored
        except NotPositiveDefinite:
            return math.inf
        return val

    theta = _pack(init, slots)
    f0 = objective(theta)
    if not math.isfinite(f0):
        raise NonFiniteLoss("initial kernel NLL is not finite", 0)
    best_theta, best_f = theta.copy(), f0
    state = AdamWState(lr=lr, weight_decay=0.0)
    trace = [f0]
    for it in range(iters):
        grad = np.zeros_like(theta)
        for k in np.flatnonzero(active):
            e = np.zeros_like(theta)
            e[k] = h
            grad[k] = (objective(theta + e) - objective(theta - e)) / (2.0 * h)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLoss("non-finite finite-difference gradient", it)
        (theta,) = adamw_step(state, [theta], [grad])
        f = objective(theta)
        if not math.isfinite(f):
            raise NonFiniteLoss("kernel NLL became non-finite", it)
        trace.append(f)
        if f < best_f:
            best_theta, best_f = theta.copy(), f
    return FitResult(_unpack(init, slots, best_theta), best_f, f0, trace)


def _default_init(family, d):
    if family == "MT15":
        return KernelSpec("MT15", {"sigma": 1.0, "lengthscale": [0.3] * d, "nu": 1.5, "tau2": 0.01}, d)
    if family == "Periodic":
        return KernelSpec("Periodic", {"sigma": 1.0, "lengthscale": float(d), "period": 0.5, "tau2": 0.01}, d)
    if family == "DTMT15":
        from .kernels import magic_square
        return KernelSpec("DTMT15", {"sigma": 1.0, "lengthscale": math.sqrt(d) / 10.0, "A": magic_square(d),
                                     "nu": 1.5, "tau2": 0.01}, d)
    if family == "RangeNS":
        return KernelSpec("RangeNS", {"sigma": 1.0, "beta0": -2.0, "beta1": 0.0, "beta2": 0.0, "tau2": 0.01}, d)
    raise FitError(f"fitting is not supported for family {family}")
