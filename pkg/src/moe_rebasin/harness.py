"""Desk-scale training of an MoE block inside a frozen random backbone.

The classifier is ``logits = R (moe(E x + e) + E x + e) + r``: a frozen
linear encoder, the trainable MoE layer with a residual skip, and a frozen
linear readout.  Only the MoE parameters are trained, with plain SGD on
mean cross-entropy.  Everything is driven by :class:`RngStream` so a
(dataset, backbone, train config) triple fixes the checkpoint bitwise.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import MoEConfig, MoEParams, all_expert_outputs, gating_weights
from .numerics import RngStream, log_softmax, stable_softmax


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class BackboneMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 6
    samples_per_class: int = 100
    input_dim: int = 16
    noise_sigma: float = 1.0
    seed: int = 0
    kind: str = "blobs"

    def __post_init__(self):
        if self.kind != "blobs":
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.classes < 2 or self.samples_per_class < 1 or self.input_dim < 1:
            raise ValueError("need at least 2 classes, 1 sample per class and 1 input dim")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def input_dim(self) -> int:
        return self.X_train.shape[1]


def _split(X, y, classes, rng: RngStream, test_fraction=0.2) -> Dataset:
    perm = rng.permutation(len(y))
    n_train = int(round((1.0 - test_fraction) * len(y)))
    tr, te = perm[:n_train], perm[n_train:]
    return Dataset(X[tr], y[tr], X[te], y[te], classes)


def gen_blobs(spec: DatasetSpec) -> Dataset:
    """Gaussian blobs around random unit directions scaled by 4 * sigma, split 80/20."""
    rng = RngStream(spec.seed)
    means = rng.normal((spec.classes, spec.input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= 4.0 * spec.noise_sigma
    y = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    X = means[y] + spec.noise_sigma * rng.normal((len(y), spec.input_dim))
    return _split(X, y, spec.classes, rng)


def load_csv_dataset(path, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Read ``f0..f{D-1},label`` rows and split them deterministically."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
            raise ValueError(f"{path}: expected header f0,...,f{{D-1}},label, got {header}")
        rows = [row for row in reader if row]
    X = np.array([[float(v) for v in row[:-1]] for row in rows], dtype=np.float64)
    y = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    if len(y) < 2 or y.min() < 0:
        raise ValueError(f"{path}: need at least two rows and non-negative labels")
    return _split(X, y, int(y.max()) + 1, RngStream(seed), test_fraction)


@dataclass(frozen=True, eq=False)
class FrozenBackbone:
    seed: int
    encoder: np.ndarray  # (d, input_dim)
    encoder_bias: np.ndarray  # (d,)
    readout: np.ndarray  # (classes, d)
    readout_bias: np.ndarray  # (classes,)

    @classmethod
    def generate(cls, seed: int, input_dim: int, d: int, classes: int) -> "FrozenBackbone":
        rng = RngStream(seed)
        enc = rng.normal((d, input_dim)) / math.sqrt(input_dim)
        out = rng.normal((classes, d)) / math.sqrt(d)
        return cls(seed, enc, np.zeros(d), out, np.zeros(classes))

    def encode(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.encoder.T + self.encoder_bias


def require_same_backbone(seed_a: int, seed_b: int):
    if seed_a != seed_b:
        raise BackboneMismatch(f"runs use different frozen backbones (seeds {seed_a} and {seed_b})")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 0.1
    init_seed: int = 0
    data_order_seed: int = 0
    init_scale: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.init_scale < 0:
            raise ValueError("steps, batch size, learning rate and init scale must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(config: MoEConfig, rng: RngStream, init_scale: float = 1.0) -> MoEParams:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    c = config
    return MoEParams(
        c,
        W=rng.normal((c.n_gates, c.d)) * init_scale / math.sqrt(c.d),
        b=np.zeros(c.n_gates),
        A=rng.normal((c.n, c.h, c.d)) * init_scale / math.sqrt(c.d),
        u=np.zeros((c.n, c.h)),
        B=rng.normal((c.n, c.d, c.h)) * init_scale / math.sqrt(c.h),
        v=np.zeros((c.n, c.d)),
    )


def random_params(config: MoEConfig, rng: RngStream, scale: float = 1.0) -> MoEParams:
    """Every entry, biases included, drawn from N(0, scale^2)."""
    c = config
    return MoEParams(c, rng.normal((c.n_gates, c.d)) * scale, rng.normal(c.n_gates) * scale,
                     rng.normal((c.n, c.h, c.d)) * scale, rng.normal((c.n, c.h)) * scale,
                     rng.normal((c.n, c.d, c.h)) * scale, rng.normal((c.n, c.d)) * scale)


def _check_labels(y, classes):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"label out of range for {classes} classes")
    return y


def _forward_backward(params: MoEParams, backbone: FrozenBackbone, X, y, want_grad: bool):
    c = params.config
    y = _check_labels(y, backbone.readout.shape[0])
    z = backbone.encode(X)
    N = len(z)
    pre, outs = all_expert_outputs(z, params)
    scores = z @ params.W.T + params.b
    weights, mask = gating_weights(scores, c)
    s = c.n_shared
    moe = np.einsum("Nn,Nnd->Nd", weights, outs[:, s:]) + outs[:, :s].sum(axis=1)
    logits = (moe + z) @ backbone.readout.T + backbone.readout_bias
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(N), y].mean())
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    if not want_grad:
        return loss, acc, None

    g_logits = np.exp(logp)
    g_logits[np.arange(N), y] -= 1.0
    g_logits /= N
    g_out = g_logits @ backbone.readout  # (N, d)

    # weight on every expert: routed gate weights, 1 for shared ones
    full_w = np.concatenate([np.ones((N, s)), weights], axis=1)
    g_y = full_w[:, :, None] * g_out[:, None, :]  # (N, n, d)
    hid = np.maximum(pre, 0.0)
    g_v = g_y.sum(axis=0)
    g_B = np.einsum("Nnd,Nnh->ndh", g_y, hid)
    g_pre = np.einsum("Nnd,ndh->Nnh", g_y, params.B) * (pre > 0)
    g_u = g_pre.sum(axis=0)
    g_A = np.einsum("Nnh,Nd->nhd", g_pre, z)

    g_w = np.einsum("Nd,Nnd->Nn", g_out, outs[:, s:])
    if c.variant == "shared":
        # weights = mask * softmax(scores); differentiate through the full softmax
        probs = stable_softmax(scores)
        q = np.where(mask, g_w, 0.0)
        g_scores = probs * (q - (probs * q).sum(axis=1, keepdims=True))
    else:
        # dense, or sparse with the selection held fixed (weights vanish off the mask)
        g_scores = weights * (g_w - (weights * g_w).sum(axis=1, keepdims=True))
    g_W = g_scores.T @ z
    g_b = g_scores.sum(axis=0)
    grads = params.replace(W=g_W, b=g_b, A=g_A, u=g_u, B=g_B, v=g_v)
    return loss, acc, grads


def model_loss(params: MoEParams, backbone: FrozenBackbone, X, y) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on a batch."""
    loss, acc, _ = _forward_backward(params, backbone, X, y, want_grad=False)
    return loss, acc


def grad_model_loss(params: MoEParams, backbone: FrozenBackbone, X, y) -> MoEParams:
    """Gradient of the mean cross-entropy, returned in a parameter-shaped container."""
    return _forward_backward(params, backbone, X, y, want_grad=True)[2]


def make_loss_fn(backbone: FrozenBackbone, X, y):
    """Closure ``params -> (loss, accuracy)`` on a fixed evaluation set."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    return lambda params: model_loss(params, backbone, X, y)


@dataclass(eq=False)
class TrainResult:
    params: MoEParams
    history: list[tuple[int, float]] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan


def train_sgd(data: Dataset, backbone: FrozenBackbone, config: TrainConfig,
              moe_config: MoEConfig, init: MoEParams | None = None) -> TrainResult:
    """Plain minibatch SGD (with-replacement sampling) on the MoE parameters only."""
    if backbone.encoder.shape != (moe_config.d, data.input_dim):
        raise ValueError(
            f"backbone encoder {backbone.encoder.shape} does not map {data.input_dim} -> {moe_config.d}")
    params = init if init is not None else init_params(
        moe_config, RngStream(config.init_seed), config.init_scale)
    order = RngStream(config.data_order_seed)
    X, y = data.X_train, data.y_train
    initial, _ = model_loss(params, backbone, X, y)
    history = [(0, initial)]
    lr = config.learning_rate
    for step in range(1, config.steps + 1):
        idx = order.integers(len(y), config.batch_size)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            loss, _, g = _forward_backward(params, backbone, X[idx], y[idx], want_grad=True)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if lr:
            params = params.replace(**{k: v - lr * getattr(g, k) for k, v in params.as_dict().items()})
        if config.log_every and step % config.log_every == 0:
            history.append((step, model_loss(params, backbone, X, y)[0]))
    final, _ = model_loss(params, backbone, X, y)
    if not math.isfinite(final):
        raise TrainingDiverged(config.steps, final)
    return TrainResult(params, history, initial, final)


@dataclass(frozen=True)
class Experiment:
    """Dataset + backbone shared bitwise by every run that will be compared."""

    dataset_spec: DatasetSpec
    backbone_seed: int
    d: int

    def build(self) -> tuple[Dataset, FrozenBackbone]:
        data = gen_blobs(self.dataset_spec)
        bb = FrozenBackbone.generate(self.backbone_seed, data.input_dim, self.d, data.classes)
        return data, bb
