"""Fully-connected network training with coded backpropagation.

Columns are samples: activations of layer ``l`` form an ``M_l x batch``
matrix.  Hidden layers use ReLU, the output layer a sigmoid, and the loss
is ``J = 1/(2m) * sum_i ||a_i^L - y_i||^2``.

For every hidden layer the product ``W^T delta`` is farmed out to the
cluster: ``W^T`` is row-partitioned, masked and encoded, workers multiply
their share by the broadcast ``delta`` of the layer above, and the master
decodes, restacks and applies the ReLU derivative.  ``conv`` training does
the same product uncoded (one plain block per worker, wait for all).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cluster import Cluster, ClusterReport, TaskSpec, WaitPolicy, make_profiles
from .codec import CodecConfig, default_anchors
from .ecc import P256, CurveParams
from .realmat import stack_rows

log = logging.getLogger(__name__)

__all__ = [
    "NetworkParams",
    "TrainConfig",
    "TrainTrace",
    "Dataset",
    "init_params",
    "forward",
    "loss",
    "accuracy",
    "serial_gradients",
    "backprop_delta_serial",
    "backprop_delta_coded",
    "backprop_delta_uncoded",
    "sgd_step",
    "build_cluster",
    "train",
    "make_blobs",
    "load_digits1k",
    "load_csv_dataset",
    "load_dataset",
]


def relu(x):
    return np.maximum(x, 0.0)


def relu_prime(x):
    return (x > 0).astype(float)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("need one bias vector per weight matrix")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {l + 1}: bias shape {b.shape} vs weight {W.shape}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(
                    f"layer {l + 1}: weight {W.shape} does not follow {self.weights[l - 1].shape}"
                )

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def copy(self) -> "NetworkParams":
        return NetworkParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])


def init_params(layer_sizes: Sequence[int], rng_seed=None) -> NetworkParams:
    """He-scaled Gaussian weights, zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output layer")
    rng = np.random.default_rng(rng_seed)
    weights = [
        rng.normal(0.0, np.sqrt(2.0 / m_in), size=(m_out, m_in))
        for m_in, m_out in zip(layer_sizes[:-1], layer_sizes[1:])
    ]
    biases = [np.zeros(m) for m in layer_sizes[1:]]
    return NetworkParams(weights, biases)


def _columns(x, size: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != size:
        raise ValueError(f"input has {x.shape[0]} features, network expects {size}")
    return x


def forward(params: NetworkParams, x, hidden=relu, output=sigmoid):
    """Activations ``a^1..a^L`` and pre-activations ``tau^1..tau^L``."""
    a = _columns(x, params.layer_sizes[0])
    acts, pres = [], []
    L = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases), start=1):
        tau = W @ a + b[:, None]
        a = output(tau) if l == L else hidden(tau)
        pres.append(tau)
        acts.append(a)
    return acts, pres


def loss(params: NetworkParams, X, Y) -> float:
    acts, _ = forward(params, X)
    Y = _columns(Y, params.layer_sizes[-1])
    return float(0.5 * np.sum((acts[-1] - Y) ** 2) / Y.shape[1])


def accuracy(params: NetworkParams, X, labels) -> float:
    acts, _ = forward(params, X)
    return float(np.mean(np.argmax(acts[-1], axis=0) == np.asarray(labels)))


def backprop_delta_serial(W, delta_next, tau) -> np.ndarray:
    return (W.T @ delta_next) * relu_prime(tau)


def serial_gradients(params: NetworkParams, X, Y):
    """Gradient of ``J`` for every weight and bias, computed locally."""
    acts, pres = forward(params, X)
    Y = _columns(Y, params.layer_sizes[-1])
    m = Y.shape[1]
    delta = (acts[-1] - Y) * sigmoid_prime(pres[-1])
    deltas = [delta]
    for l in range(len(params.weights) - 1, 0, -1):
        delta = backprop_delta_serial(params.weights[l], delta, pres[l - 1])
        deltas.insert(0, delta)
    inputs = [_columns(X, params.layer_sizes[0])] + acts[:-1]
    gW = [d @ a.T / m for d, a in zip(deltas, inputs)]
    gb = [d.sum(axis=1) / m for d in deltas]
    return gW, gb


def backprop_delta_coded(W, delta_next, tau, cluster: Cluster, cfg: CodecConfig,
                         wait_policy: WaitPolicy | None = None, rng_seed=None
                         ) -> tuple[np.ndarray, ClusterReport]:
    """``W^T delta_next * relu'(tau)`` with the product computed by the coded cluster."""
    W = np.asarray(W, dtype=float)
    if W.shape[0] != delta_next.shape[0] or W.shape[1] != tau.shape[0]:
        raise ValueError(f"shape mismatch: W {W.shape}, delta {delta_next.shape}, tau {tau.shape}")
    spec = TaskSpec("backprop_delta", W.T, cfg, wait_policy or WaitPolicy(), operand=delta_next)
    blocks, report = cluster.run(spec, rng_seed)
    product = stack_rows(blocks, rows=W.shape[1])
    return product * relu_prime(tau), report


def backprop_delta_uncoded(W, delta_next, tau, cluster: Cluster, rng_seed=None
                           ) -> tuple[np.ndarray, ClusterReport]:
    W = np.asarray(W, dtype=float)
    if W.shape[0] != delta_next.shape[0] or W.shape[1] != tau.shape[0]:
        raise ValueError(f"shape mismatch: W {W.shape}, delta {delta_next.shape}, tau {tau.shape}")
    product, report = cluster.run_uncoded("backprop_delta", W.T, delta_next, rng_seed)
    return product * relu_prime(tau), report


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch: int = 32
    layers: tuple[int, ...] = (2, 16, 2)
    algo: str = "spacdc"
    N: int = 12
    K: int = 2
    T: int = 1
    stragglers: int = 0
    colluders: int = 0
    mask_scale: float = 1.0
    base_delay_ms: float = 1.0
    straggler_delay_ms: float = 10.0
    jitter_ms: float = 0.0
    encrypt: bool = True
    scale_bits: int = 24
    curve: CurveParams = P256
    seed: int = 0
    # optional explicit code; default Chebyshev anchors otherwise
    codec: CodecConfig | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.algo not in ("spacdc", "conv"):
            raise ValueError(f"algo must be 'spacdc' or 'conv', got {self.algo!r}")
        if not 0 <= self.stragglers < self.N:
            raise ValueError(f"need 0 <= stragglers < N, got {self.stragglers} of {self.N}")

    def code(self) -> CodecConfig:
        return self.codec or default_anchors(self.N, self.K, self.T, self.mask_scale)

    def wait_policy(self) -> WaitPolicy:
        if self.algo == "conv":
            return WaitPolicy("all")
        return WaitPolicy("first_r", self.N - self.stragglers)


@dataclass
class TrainTrace:
    loss: list[float] = field(default_factory=list)
    epoch_ms: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")

    def write_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "accuracy", "epoch_ms"])
            for e, (l, ms) in enumerate(zip(self.loss, self.epoch_ms), start=1):
                acc = self.accuracy[e - 1] if e - 1 < len(self.accuracy) else float("nan")
                w.writerow([e, repr(l), repr(acc), repr(ms)])


@dataclass
class Dataset:
    X_train: np.ndarray  # (d, m) columns are samples
    y_train: np.ndarray
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    n_classes: int = 2

    def targets(self, labels) -> np.ndarray:
        Y = np.zeros((self.n_classes, len(labels)))
        Y[np.asarray(labels), np.arange(len(labels))] = 1.0
        return Y


def build_cluster(config: TrainConfig, tap=None) -> Cluster:
    """Cluster with randomly chosen stragglers and colluders, seeded by ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0xC1])
    stragglers = rng.choice(config.N, size=config.stragglers, replace=False)
    colluders = rng.choice(config.N, size=config.colluders, replace=False)
    profiles = make_profiles(
        config.N, config.curve,
        stragglers=[int(i) for i in stragglers], colluders=[int(i) for i in colluders],
        base_delay=config.base_delay_ms, straggler_delay=config.straggler_delay_ms,
        rng_seed=config.seed,
    )
    return Cluster(profiles, config.curve, master_seed=config.seed, encrypt=config.encrypt,
                   scale_bits=config.scale_bits, jitter_max=config.jitter_ms, tap=tap)


def sgd_step(params: NetworkParams, X, Y, cluster: Cluster, config: TrainConfig,
             step_seed=None) -> tuple[NetworkParams, float]:
    """One gradient step on a mini-batch; returns new params and simulated ms.

    Output-layer deltas and the weight/bias updates are computed by the
    master; each hidden-layer delta goes through the cluster.
    """
    acts, pres = forward(params, X)
    Y = _columns(Y, params.layer_sizes[-1])
    X = _columns(X, params.layer_sizes[0])
    delta = (acts[-1] - Y) * sigmoid_prime(pres[-1])
    deltas = [delta]
    elapsed = 0.0
    code = config.code() if config.algo == "spacdc" else None
    policy = config.wait_policy()
    for l in range(len(params.weights) - 1, 0, -1):
        seed = None if step_seed is None else [*np.atleast_1d(step_seed), l]
        if config.algo == "spacdc":
            delta, report = backprop_delta_coded(params.weights[l], delta, pres[l - 1],
                                                 cluster, code, policy, seed)
        else:
            delta, report = backprop_delta_uncoded(params.weights[l], delta, pres[l - 1],
                                                   cluster, seed)
        elapsed += report.wall_clock
        deltas.insert(0, delta)
    inputs = [X] + acts[:-1]
    new = params.copy()
    for l, (d, a) in enumerate(zip(deltas, inputs)):
        new.weights[l] -= config.lr * (d @ a.T)
        new.biases[l] -= config.lr * d.sum(axis=1)
    return new, elapsed


def train(data: Dataset, config: TrainConfig, params: NetworkParams | None = None,
          cluster: Cluster | None = None) -> tuple[NetworkParams, TrainTrace]:
    m = data.X_train.shape[1]
    if m == 0:
        raise ValueError("empty training set")
    if config.layers[0] != data.X_train.shape[0] or config.layers[-1] != data.n_classes:
        raise ValueError(
            f"layers {config.layers} do not fit {data.X_train.shape[0]} features / {data.n_classes} classes"
        )
    params = params or init_params(config.layers, config.seed)
    cluster = cluster or build_cluster(config)
    Y_all = data.targets(data.y_train)
    rng = np.random.default_rng([config.seed, 0x5D])
    trace = TrainTrace(initial_loss=loss(params, data.X_train, Y_all))
    for epoch in range(config.epochs):
        order = rng.permutation(m)
        epoch_ms = 0.0
        for step, start in enumerate(range(0, m, config.batch)):
            idx = order[start:start + config.batch]
            params, ms = sgd_step(params, data.X_train[:, idx], Y_all[:, idx], cluster, config,
                                  step_seed=[config.seed, epoch, step])
            epoch_ms += ms
        trace.loss.append(loss(params, data.X_train, Y_all))
        trace.epoch_ms.append(epoch_ms)
        if data.X_test is not None:
            trace.accuracy.append(accuracy(params, data.X_test, data.y_test))
        log.debug("epoch %d loss %.5f ms %.1f", epoch + 1, trace.loss[-1], epoch_ms)
    return params, trace


def make_blobs(n: int = 400, centers: int = 2, dim: int = 2, spread: float = 1.0,
               separation: float = 4.0, test_fraction: float = 0.25, rng_seed=0) -> Dataset:
    """Isotropic Gaussian clusters with centres on a scaled simplex-like grid."""
    rng = np.random.default_rng(rng_seed)
    means = rng.normal(size=(centers, dim))
    means = separation * means / np.linalg.norm(means, axis=1, keepdims=True)
    if centers == 2:
        means[1] = -means[0]
    labels = np.arange(n) % centers
    X = means[labels] + spread * rng.normal(size=(n, dim))
    perm = rng.permutation(n)
    X, labels = X[perm], labels[perm]
    n_test = int(round(test_fraction * n))
    return Dataset(X[n_test:].T.copy(), labels[n_test:], X[:n_test].T.copy(), labels[:n_test], centers)


def load_digits1k(test_fraction: float = 0.2, rng_seed=0) -> Dataset:
    """First 1,000 samples of scikit-learn's bundled 8x8 digits, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    X = digits.data[:1000] / 16.0
    y = digits.target[:1000]
    perm = np.random.default_rng(rng_seed).permutation(len(y))
    X, y = X[perm], y[perm]
    n_test = int(round(test_fraction * len(y)))
    return Dataset(X[n_test:].T.copy(), y[n_test:], X[:n_test].T.copy(), y[:n_test], 10)


def load_csv_dataset(path, test_fraction: float = 0.2, rng_seed=0) -> Dataset:
    """Numeric CSV, one sample per row, integer class label in the last column."""
    raw = np.loadtxt(Path(path), delimiter=",", comments="#", ndmin=2)
    if raw.size == 0:
        raise ValueError(f"{path}: empty dataset")
    X, y = raw[:, :-1], raw[:, -1].astype(int)
    perm = np.random.default_rng(rng_seed).permutation(len(y))
    X, y = X[perm], y[perm]
    n_test = int(round(test_fraction * len(y)))
    return Dataset(X[n_test:].T.copy(), y[n_test:], X[:n_test].T.copy(), y[:n_test], int(y.max()) + 1)


def load_dataset(name: str, rng_seed=0) -> Dataset:
    if name == "blobs":
        return make_blobs(rng_seed=rng_seed)
    if name == "digits1k":
        return load_digits1k(rng_seed=rng_seed)
    return load_csv_dataset(name, rng_seed=rng_seed)
