"""Simulated Vecchia-type training data, the training loop, and evaluation.

Each training/test item is a group of ``m + 1`` Latin-hypercube locations in
``[0, 1]^d`` with one joint GP draw; the task is to predict the last
response from the first ``m``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import NonFiniteLoss, ShapeMismatch
from .kernels import KernelSpec, covariance_matrix
from .linalg import Rng, cholesky, sample_mvn
from .optim import AdamWState, CosineSchedule, adamw_step, clip_by_global_norm, fit_kernel_params
from .vecchia import ConditioningPlan, conditional_from_covariance

log = logging.getLogger(__name__)

# stream ids for derived seeds
TRAIN_STREAM = 1
EVAL_STREAM = 2
FIT_STREAM = 3
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def lhs_sample(n, d, rng, size=None):
    """Latin hypercube design with uniform jitter inside each cell.

    Returns ``(n, d)``, or ``(size, n, d)`` independent designs when ``size``
    is given.  Every column has exactly one point in each ``[k/n, (k+1)/n)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    B = 1 if size is None else size
    keys = rng.uniform((B, d, n))
    strata = np.argsort(keys, axis=-1).astype(np.float64)  # independent permutation per column
    jitter = rng.uniform((B, d, n))
    X = np.swapaxes((strata + jitter) / n, -1, -2)
    return X[0] if size is None else X


@dataclass
class TrainingBatch:
    """``locs``: (B, m + 1, d); ``y``: (B, m + 1); the target is the last column."""

    locs: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.locs.ndim != 3 or self.y.shape != self.locs.shape[:2]:
            raise ShapeMismatch(f"locs {self.locs.shape} / y {self.y.shape}")

    @property
    def m(self):
        return self.locs.shape[1] - 1

    def __len__(self):
        return self.locs.shape[0]


def simulate_batch(scenario, m, n_batch, rng):
    """Draw ``n_batch`` independent groups of ``m + 1`` points from ``scenario``."""
    X = lhs_sample(m + 1, scenario.d, rng, size=n_batch)
    L = cholesky(covariance_matrix(scenario, X))
    y = sample_mvn(np.zeros((n_batch, m + 1)), L, rng)
    return TrainingBatch(X, y)


@dataclass
class TrainConfig:
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = None
    log_every: int = 100


@dataclass
class TrainResult:
    model: nn.NeuVecModel
    losses: np.ndarray
    state: AdamWState
    next_iter: int


def train_loop(model, batch_fn, iters, config=None, seed=0, start_iter=0, stop_iter=None,
               state=None, train_mode=False):
    """AdamW + cosine-decay loop over batches ``batch_fn(iteration, rng)``.

    The rng handed to ``batch_fn`` (and used for dropout) is derived from
    ``(seed, iteration)``, so a run split at ``stop_iter`` and resumed from
    ``start_iter`` with the saved optimizer state reproduces the
    uninterrupted trajectory exactly.
    """
    cfg = config or TrainConfig()
    schedule = CosineSchedule(cfg.lr_start, cfg.lr_end, iters)
    if state is None:
        state = AdamWState(lr=cfg.lr_start, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)
    stop = iters if stop_iter is None else stop_iter
    params = model.parameters()
    base = Rng(seed)
    losses = []
    for it in range(start_iter, stop):
        rng = base.spawn(TRAIN_STREAM, it)
        batch = batch_fn(it, rng)
        model.zero_grad()
        loss = nn.batch_nll_loss(model, batch, train_mode=train_mode, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite training loss at iteration {it}", it)
        loss.backward()
        grads = [p.grad for p in params]
        if cfg.clip_norm:
            grads = clip_by_global_norm(grads, cfg.clip_norm)
        state.lr = schedule(it)
        for p, new in zip(params, adamw_step(state, [p.data for p in params], grads)):
            p.data = new
        losses.append(value)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info("iter %d loss %.4f (trailing mean %.4f)", it + 1, value,
                     float(np.mean(losses[-cfg.log_every:])))
    return TrainResult(model, np.array(losses), state, stop)


def train(model, scenario, m, iters, batch_size, config=None, seed=0, start_iter=0,
          stop_iter=None, state=None):
    """Fresh-data training on simulated groups from ``scenario``.

    Dropout is never applied: new data every iteration makes it unnecessary.
    """
    return train_loop(model, lambda it, rng: simulate_batch(scenario, m, batch_size, rng), iters,
                      config, seed, start_iter, stop_iter, state, train_mode=False)


def train_on_groups(model, groups, iters, batch_size, config=None, seed=0, start_iter=0,
                    stop_iter=None, state=None, train_mode=True):
    """Training on a fixed pool of groups (application data), sampled without
    replacement within each mini-batch; dropout on by default."""
    n = len(groups)
    size = min(batch_size, n)

    def batch_fn(it, rng):
        idx = np.sort(rng.choice(n, size, replace=False))
        return TrainingBatch(groups.locs[idx], groups.y[idx])

    return train_loop(model, batch_fn, iters, config, seed, start_iter, stop_iter, state, train_mode)


def smoothed(losses, window=100):
    """Trailing mean over ``window`` iterations."""
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) == 0:
        return losses
    c = np.cumsum(np.insert(losses, 0, 0.0))
    idx = np.arange(1, len(losses) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    scenario: str
    method: str
    m: int
    n_test: int
    mse: float
    nll: float
    mse_se: float = 0.0
    nll_se: float = 0.0

    FIELDS = ("scenario", "method", "m", "n_test", "mse", "nll", "mse_se", "nll_se")


def _predictor(predictor):
    if isinstance(predictor, nn.NeuVecModel):
        return lambda locs, y_c: nn.predict(predictor, locs, y_c)
    if isinstance(predictor, KernelSpec):
        def kernel_predict(locs, y_c):
            beta, sd = conditional_from_covariance(covariance_matrix(predictor, locs))
            return np.sum(beta * y_c, axis=-1), sd
        return kernel_predict
    if callable(predictor):
        return predictor
    raise TypeError(f"cannot evaluate predictor of type {type(predictor).__name__}")


def iter_test_groups(scenario, m, n_test, seed, chunk=2048):
    """Yield the seeded test set in chunks; identical for every predictor."""
    base = Rng(seed)
    for c, start in enumerate(range(0, n_test, chunk)):
        yield simulate_batch(scenario, m, min(chunk, n_test - start), base.spawn(EVAL_STREAM, c))


def score(predictor, batch):
    """Per-group squared error and Gaussian NLL of the target prediction."""
    mean, sd = _predictor(predictor)(batch.locs, batch.y[:, :-1])
    err = batch.y[:, -1] - mean
    return err ** 2, np.log(sd) + 0.5 * (err / sd) ** 2 + HALF_LOG_2PI


def _report(se, nl, scenario_name, method, m):
    n = len(se)
    return EvalReport(scenario_name, method, m, n, float(se.mean()), float(nl.mean()),
                      float(se.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                      float(nl.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)


def _method_name(predictor):
    if isinstance(predictor, KernelSpec):
        return predictor.family
    return "NeuVec" if isinstance(predictor, nn.NeuVecModel) else "custom"


def evaluate(predictor, scenario, m, n_test, seed=0, method=None, scenario_name=None, chunk=2048):
    """Predictive MSE and Gaussian NLL on ``n_test`` fresh groups.

    ``predictor`` is a ``NeuVecModel``, a ``KernelSpec`` (exact kriging with
    that kernel), or a callable ``(locs, y_c) -> (mean, sd)``.  The test set
    depends only on ``(scenario, m, n_test, seed)``.
    """
    parts = [score(predictor, b) for b in iter_test_groups(scenario, m, n_test, seed, chunk)]
    se = np.concatenate([p[0] for p in parts])
    nl = np.concatenate([p[1] for p in parts])
    return _report(se, nl, scenario_name or scenario.family, method or _method_name(predictor), m)


def evaluate_groups(predictor, groups, m, scenario_name="data", method=None):
    """Same metrics on a fixed set of groups (e.g. application test targets)."""
    se, nl = score(predictor, groups)
    return _report(se, nl, scenario_name, method or _method_name(predictor), m)


def group_plan(n_groups, m):
    """Plan over stacked groups: each group's last point conditions on its others.

    Returns ``(plan, target_positions)``; non-target points have empty sets.
    """
    neighbors = []
    for r in range(n_groups):
        start = r * (m + 1)
        neighbors.extend(np.zeros(0, np.int64) for _ in range(m))
        neighbors.append(np.arange(start, start + m))
    plan = ConditioningPlan(np.arange(n_groups * (m + 1)), neighbors, m)
    return plan, np.arange(m, n_groups * (m + 1), m + 1)


def fit_baseline(family, scenario, m, n_groups, seed=0, init=None, iters=150, lr=0.05):
    """Fit a classical kernel to simulated groups by finite-difference AdamW."""
    batch = simulate_batch(scenario, m, n_groups, Rng(seed).spawn(FIT_STREAM))
    plan, targets = group_plan(n_groups, m)
    locs = batch.locs.reshape(-1, scenario.d)
    return fit_kernel_params(family, (locs, batch.y.reshape(-1)), plan, init,
                             positions=targets, iters=iters, lr=lr)


def write_reports(path, reports):
    """Tab-separated table, one row per scenario x method x m."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(EvalReport.FIELDS)
        for r in reports:
            row = asdict(r)
            w.writerow([f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in EvalReport.FIELDS])


def read_reports(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [EvalReport(r["scenario"], r["method"], int(r["m"]), int(r["n_test"]), float(r["mse"]),
                       float(r["nll"]), float(r["mse_se"]), float(r["nll_se"])) for r in rows]


def write_curves(directory, reports):
    """One ``<scenario>_<method>.dat`` file per curve with columns ``m mse nll``."""
    os.makedirs(directory, exist_ok=True)
    curves = {}
    for r in reports:
        curves.setdefault((r.scenario, r.method), []).append(r)
    paths = []
    for (scen, meth), rows in sorted(curves.items()):
        p = os.path.join(directory, f"{scen}_{meth}.dat")
        with open(p, "w") as fh:
            fh.write("# m mse nll\n")
            for r in sorted(rows, key=lambda r: r.m):
                fh.write(f"{r.m} {r.mse:.6f} {r.nll:.6f}\n")
        paths.append(p)
    return paths
