"""Set-structured networks that predict kriging coefficients and conditional SDs.

Given the conditioning locations ``X_c`` (m x d) and the target ``x_i``,
each row is augmented to ``a_j = [X_c[j], x_i]`` (or a distance/direction
encoding).  Then

* the SD network is a Deep Sets map ``sigma = softplus(rho(sum_j phi(a_j))) + floor``,
  invariant to the order of the rows;
* the coefficient network is permutation preserving,
  ``beta_j = rho1(phi(a_j), rho2(sum_{k != j} phi(a_k)))``, with the
  leave-one-out sum formed as total minus own term (linear in m).

An optional mean network maps a single location to a scalar mean.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ACTIVATIONS, Tensor, concat
from .errors import CheckpointError, MeanNetAbsent, ShapeMismatch, ZeroDistance
from .linalg import Rng

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"NEUVECCK"
CHECKPOINT_VERSION = 1

AUGMENTATIONS = ("concat", "distance-direction")
BLOCKS = ("phi_mu", "rho2_mu", "rho1_mu", "phi_sigma", "rho_sigma", "mean_net")


@dataclass
class MlpConfig:
    widths: list
    activation: str = "tanh"
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"invalid widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def dropout_apply(values, rate, rng, train_mode):
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    if not train_mode or rate == 0.0:
        return values
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    shape = values.shape
    mask = (rng.uniform(shape) >= rate) / (1.0 - rate)
    return values * mask


class Mlp:
    """Fully connected network; activation and dropout after hidden layers only."""

    def __init__(self, config, rng):
        self.config = config
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(config.widths[:-1], config.widths[1:]):
            # uniform with variance 2 / fan_in
            bound = math.sqrt(6.0 / fan_in)
            W = bound * (2.0 * rng.uniform((fan_in, fan_out)) - 1.0)
            self.weights.append(Tensor(W, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def __call__(self, x, train_mode=False, rng=None):
        act = ACTIVATIONS[self.config.activation]
        rate = self.config.dropout_rate
        last = len(self.weights) - 1
        fused = self.config.activation == "tanh"
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if fused:
                x = x.dense(W, b, "tanh" if k < last else None)
            else:
                x = x @ W + b
                if k < last:
                    x = act(x)
            if k < last:
                if train_mode and rate > 0.0:
                    x = dropout_apply(x, rate, rng, True)
        return x

    def named_parameters(self, prefix):
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{k}.W", W
            yield f"{prefix}.{k}.b", b


def augmented_dim(d, mode):
    if mode == "concat":
        return 2 * d
    if mode == "distance-direction":
        return 2 * d + 1
    raise ValueError(f"unknown augmentation {mode!r}; expected one of {AUGMENTATIONS}")


def augment(X_c, x_i, mode="concat"):
    """Pair every conditioning location with the target.

    ``X_c``: ``(..., m, d)``, ``x_i``: ``(..., d)`` -> ``(..., m, d_A)``.
    """
    X_c = np.asarray(X_c, dtype=np.float64)
    x_i = np.asarray(x_i, dtype=np.float64)
    if X_c.shape[-1] != x_i.shape[-1] or X_c.shape[:-2] != x_i.shape[:-1]:
        raise ShapeMismatch(f"X_c {X_c.shape} and x_i {x_i.shape} are inconsistent")
    target = np.broadcast_to(x_i[..., None, :], X_c.shape)
    if mode == "concat":
        return np.concatenate([X_c, target], axis=-1)
    if mode == "distance-direction":
        diff = X_c - target
        dist = np.sqrt(np.sum(diff ** 2, axis=-1, keepdims=True))
        if np.any(dist == 0.0):
            raise ZeroDistance("conditioning location coincides with the target")
        return np.concatenate([dist, diff / dist, target], axis=-1)
    raise ValueError(f"unknown augmentation {mode!r}")


@dataclass
class NeuVecConfig:
    """Architecture of a NeuVec model (block widths include input and output)."""

    d: int
    phi_mu: list
    rho2_mu: list
    rho1_mu: list
    phi_sigma: list
    rho_sigma: list
    mean_net: list = None
    augmentation: str = "concat"
    activation: str = "tanh"
    dropout_rate: float = 0.0
    rho1_input: str = "latent"  # "latent": phi(a_j); "augmented": a_j itself
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        d_A = self.d_A
        if self.phi_mu[0] != d_A or self.phi_sigma[0] != d_A:
            raise ShapeMismatch(f"phi blocks must take d_A = {d_A} inputs")
        if self.rho2_mu[0] != self.phi_mu[-1]:
            raise ShapeMismatch("rho2 input must equal phi_mu output (d_L1)")
        own = self.phi_mu[-1] if self.rho1_input == "latent" else d_A
        if self.rho1_input not in ("latent", "augmented"):
            raise ValueError(f"unknown rho1_input {self.rho1_input!r}")
        if self.rho1_mu[0] != own + self.rho2_mu[-1]:
            raise ShapeMismatch(f"rho1 input must be {own} + {self.rho2_mu[-1]}")
        if self.rho1_mu[-1] != 1 or self.rho_sigma[-1] != 1:
            raise ShapeMismatch("rho1 and rho must have scalar outputs")
        if self.rho_sigma[0] != self.phi_sigma[-1]:
            raise ShapeMismatch("rho input must equal phi_sigma output (d_L)")
        if self.mean_net is not None and (self.mean_net[0] != self.d or self.mean_net[-1] != 1):
            raise ShapeMismatch(f"mean_net must map {self.d} -> 1")

    @property
    def d_A(self):
        return augmented_dim(self.d, self.augmentation)


def preset_config(name, d=3, augmentation="concat", mean_net=None, **overrides):
    """Architecture presets: ``table1`` (simulation), ``table4`` (reduced), ``desk`` (CPU)."""
    d_A = augmented_dim(d, augmentation)
    if name == "table1":
        cfg = dict(phi_mu=[d_A, 128, 128, 128, 64], rho2_mu=[64, 128, 128, 128, 64],
                   rho1_mu=[128, 128, 128, 128, 1], phi_sigma=[d_A, 128, 128, 128, 64],
                   rho_sigma=[64, 128, 128, 128, 1])
    elif name == "table4":
        cfg = dict(phi_mu=[d_A, 16, 16, 16, 16], rho2_mu=[16, 16, 16, 16, 16],
                   rho1_mu=[32, 16, 16, 16, 1], phi_sigma=[d_A, 16, 16, 16, 16],
                   rho_sigma=[16, 16, 16, 16, 1])
        if mean_net is None:
            mean_net = True
        cfg["dropout_rate"] = 0.3
    elif name == "desk":
        cfg = dict(phi_mu=[d_A, 64, 64, 32], rho2_mu=[32, 64, 32],
                   rho1_mu=[64, 64, 64, 1], phi_sigma=[d_A, 64, 64, 32],
                   rho_sigma=[32, 64, 64, 1])
    else:
        raise ValueError(f"unknown preset {name!r}; expected table1, table4 or desk")
    if mean_net:
        cfg["mean_net"] = [d, 8, 8, 8, 1]
    cfg.update(overrides)
    if cfg.get("rho1_input") == "augmented":
        cfg["rho1_mu"] = [d_A + cfg["rho2_mu"][-1]] + list(cfg["rho1_mu"][1:])
    return NeuVecConfig(d=d, augmentation=augmentation, **cfg)


class NeuVecModel:
    """Parameters of the coefficient, SD and (optional) mean networks."""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        rng = Rng(seed)
        mk = lambda widths, dropout=config.dropout_rate: Mlp(
            MlpConfig(widths, config.activation, dropout), rng)
        self.phi_mu = mk(config.phi_mu)
        self.rho2_mu = mk(config.rho2_mu)
        self.rho1_mu = mk(config.rho1_mu)
        self.phi_sigma = mk(config.phi_sigma)
        self.rho_sigma = mk(config.rho_sigma)
        self.mean_net = mk(config.mean_net) if config.mean_net is not None else None

    @property
    def d(self):
        return self.config.d

    def named_parameters(self):
        out = []
        for name in BLOCKS:
            block = getattr(self, name)
            if block is not None:
                out.extend(block.named_parameters(name))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.parameters():
            n = p.data.size
            p.data = flat[i:i + n].reshape(p.data.shape).copy()
            i += n
        if i != flat.size:
            raise ShapeMismatch(f"expected {i} values, got {flat.size}")

    def copy(self):
        other = NeuVecModel.__new__(NeuVecModel)
        other.__init__(self.config, self.seed)
        other.set_flat(self.get_flat())
        return other


# -- forward passes --------------------------------------------------------

def _as_batch(X_c, x_i):
    X_c = np.asarray(X_c, dtype=np.float64)
    x_i = np.asarray(x_i, dtype=np.float64)
    single = X_c.ndim == 2
    if single:
        X_c, x_i = X_c[None], x_i.reshape(1, -1)
    if X_c.ndim != 3 or x_i.shape != (X_c.shape[0], X_c.shape[2]):
        raise ShapeMismatch(f"X_c {X_c.shape} / x_i {x_i.shape}")
    return X_c, x_i, single


def sigma_graph(model, aug, train_mode=False, rng=None):
    """SD network on augmented rows ``(B, m, d_A)`` -> Tensor ``(B,)``."""
    feats = model.phi_sigma(Tensor(aug), train_mode, rng)
    pooled = feats.sum(axis=-2)
    raw = model.rho_sigma(pooled, train_mode, rng)
    return raw.softplus().reshape(aug.shape[0]) + model.config.sigma_floor


def mu_graph(model, aug, train_mode=False, rng=None):
    """Coefficient network on augmented rows ``(B, m, d_A)`` -> Tensor ``(B, m)``."""
    a = Tensor(aug)
    feats = model.phi_mu(a, train_mode, rng)
    total = feats.sum(axis=-2, keepdims=True)
    loo = total - feats  # m = 1 gives the zero vector
    context = model.rho2_mu(loo, train_mode, rng)
    own = feats if model.config.rho1_input == "latent" else a
    out = model.rho1_mu(concat([own, context], axis=-1), train_mode, rng)
    return out.reshape(aug.shape[0], aug.shape[1])


def forward_sigma(model, X_c, x_i, train_mode=False, rng=None):
    """Predicted conditional SD(s); accepts one set ``(m, d)`` or a batch ``(B, m, d)``."""
    X_c, x_i, single = _as_batch(X_c, x_i)
    if X_c.shape[-1] != model.d:
        raise ShapeMismatch(f"model expects d={model.d}")
    s = sigma_graph(model, augment(X_c, x_i, model.config.augmentation), train_mode, rng).data
    return float(s[0]) if single else s


def forward_mu(model, X_c, x_i, train_mode=False, rng=None):
    """Predicted kriging coefficients, one per conditioning row."""
    X_c, x_i, single = _as_batch(X_c, x_i)
    if X_c.shape[-1] != model.d:
        raise ShapeMismatch(f"model expects d={model.d}")
    b = mu_graph(model, augment(X_c, x_i, model.config.augmentation), train_mode, rng).data
    return b[0] if single else b


def mean_graph(model, X, train_mode=False, rng=None):
    if model.mean_net is None:
        raise MeanNetAbsent("model was built without a mean network")
    X = np.asarray(X, dtype=np.float64)
    out = model.mean_net(Tensor(X), train_mode, rng)
    return out.reshape(X.shape[:-1])


def forward_mean(model, x, train_mode=False, rng=None):
    """Mean network at one location ``(d,)`` or many ``(..., d)``."""
    x = np.asarray(x, dtype=np.float64)
    out = mean_graph(model, x, train_mode, rng).data
    return float(out) if x.ndim == 1 else out


def predictive_graph(model, locs, y_c, train_mode=False, rng=None):
    """Predictive mean and SD for the last location of each group.

    ``locs``: ``(B, m + 1, d)`` with the target last; ``y_c``: ``(B, m)``.
    """
    locs = np.asarray(locs, dtype=np.float64)
    y_c = np.asarray(y_c, dtype=np.float64)
    B, n, d = locs.shape
    if d != model.d or y_c.shape != (B, n - 1):
        raise ShapeMismatch(f"locs {locs.shape} / y_c {y_c.shape} inconsistent with d={model.d}")
    aug = augment(locs[:, :-1], locs[:, -1], model.config.augmentation)
    beta = mu_graph(model, aug, train_mode, rng)
    sigma = sigma_graph(model, aug, train_mode, rng)
    if model.mean_net is not None:
        mu = mean_graph(model, locs, train_mode, rng)
        resid = Tensor(y_c) - mu[:, :-1]
        mean = mu[:, -1] + (beta * resid).sum(axis=-1)
    else:
        mean = (beta * Tensor(y_c)).sum(axis=-1)
    return mean, sigma


def batch_nll_loss(model, batch, train_mode=False, rng=None):
    """Mean Gaussian NLL of each group's target given its conditioning responses."""
    y = np.asarray(batch.y, dtype=np.float64)
    if y.ndim != 2 or y.shape != np.shape(batch.locs)[:2]:
        raise ShapeMismatch(f"responses {y.shape} do not match locations {np.shape(batch.locs)}")
    mean, sigma = predictive_graph(model, batch.locs, y[:, :-1], train_mode, rng)
    z = (Tensor(y[:, -1]) - mean) / sigma
    return (sigma.log() + 0.5 * z * z).mean() + HALF_LOG_2PI


def predict(model, locs, y_c):
    """Eval-mode predictive mean/SD as arrays."""
    mean, sigma = predictive_graph(model, locs, y_c)
    return mean.data, sigma.data


# -- checkpoints -------------------------------------------------------------

def _config_header(model):
    cfg = asdict(model.config)
    return {"format_version": CHECKPOINT_VERSION, "d": model.d, "d_A": model.config.d_A,
            "augmentation": model.config.augmentation, "seed": model.seed, "config": cfg}


def save_checkpoint(path, model, extra=None, extra_arrays=None):
    """Write header + parameter blocks (declared order, little-endian float64).

    ``extra`` is JSON-serializable metadata; ``extra_arrays`` maps names to
    float arrays appended after the parameters (e.g. optimizer moments).
    """
    header = _config_header(model)
    blocks = [(name, p.data) for name, p in model.named_parameters()]
    blocks += [(name, np.asarray(a, dtype=np.float64)) for name, a in (extra_arrays or {}).items()]
    header["blocks"] = [[name, list(a.shape)] for name, a in blocks]
    header["extra"] = extra or {}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, extra, extra_arrays)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a NeuVec checkpoint")
    off = len(CHECKPOINT_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", raw, off)
        header = json.loads(raw[off + 4:off + 4 + hlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    model = NeuVecModel(NeuVecConfig(**header["config"]), header["seed"])
    off += 4 + hlen
    arrays = {}
    for name, shape in header["blocks"]:
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated at block {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    for name, p in model.named_parameters():
        if name not in arrays or arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: block {name} missing or misshapen")
        p.data = arrays.pop(name)
    return model, header["extra"], arrays
