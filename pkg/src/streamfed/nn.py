"""Feed-forward affect classifier written directly on numpy.

Parameters live in one flat float64 vector so they can be hashed, shipped
through the contract and averaged without knowing the layer structure. The
layout is, for each dense layer in order, the weight matrix (row-major,
``fan_in x fan_out``) followed by its bias vector.

Hidden layers use ReLU and the output layer softmax; the loss is sparse
categorical cross-entropy averaged over the batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import N_CLASSES

PROB_FLOOR = 1e-12
_MAGIC = "streamfed-params"


@dataclass(frozen=True)
class NetShape:
    input_dim: int
    hidden: tuple[int, ...] = (64, 32)
    output_dim: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be >= 1")
        if self.output_dim < 2:
            raise ValueError("need at least two output classes")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(a * b + b for a, b in zip(d[:-1], d[1:]))


@dataclass(eq=False)
class ModelParams:
    shape: NetShape
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        if self.theta.size != self.shape.n_params:
            raise ValueError(
                f"theta has {self.theta.size} entries, shape needs {self.shape.n_params}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("parameters must be finite")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into theta, one pair per dense layer."""
        out, pos = [], 0
        d = self.shape.dims
        for a, b in zip(d[:-1], d[1:]):
            W = self.theta[pos : pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, self.theta[pos : pos + b]))
            pos += b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.shape, self.theta.copy())

    def equals(self, other: "ModelParams") -> bool:
        return self.shape == other.shape and np.array_equal(self.theta, other.theta)


def init_params(shape: NetShape, seed: int) -> ModelParams:
    """He-uniform weights, W ~ U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    d = shape.dims
    for a, b in zip(d[:-1], d[1:]):
        lim = np.sqrt(6.0 / a)
        parts.append(rng.uniform(-lim, lim, size=a * b))
        parts.append(np.zeros(b))
    return ModelParams(shape, np.concatenate(parts))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(params: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.shape.input_dim:
        raise ValueError(
            f"expected {params.shape.input_dim} features, got shape {X.shape}"
        )
    return X


def predict_proba(params: ModelParams, X) -> np.ndarray:
    """Class probabilities for a batch, shape (n, output_dim)."""
    h = _as_batch(params, X)
    layers = params.layers()
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
    W, b = layers[-1]
    return _softmax(h @ W + b)


def forward(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes a single feature vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    return predict_proba(params, x)[0]


def predict(params: ModelParams, X) -> np.ndarray:
    return predict_proba(params, X).argmax(axis=1)


def accuracy(params: ModelParams, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    return float(np.mean(predict(params, X) == y))


def loss(params: ModelParams, X, y) -> float:
    P = predict_proba(params, X)
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty batch")
    p = np.maximum(P[np.arange(len(y)), y], PROB_FLOOR)
    return float(-np.mean(np.log(p)))


def loss_and_grad(params: ModelParams, X, y) -> tuple[float, np.ndarray]:
    X = _as_batch(params, X)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    layers = params.layers()

    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
        acts.append(h)
    W, b = layers[-1]
    P = _softmax(h @ W + b)
    rows = np.arange(n)
    value = float(-np.mean(np.log(np.maximum(P[rows, y], PROB_FLOOR))))

    delta = P
    delta[rows, y] -= 1.0
    delta /= n

    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a = acts[li]
        grads.append((a.T @ delta, delta.sum(axis=0)))
        if li:
            delta = (delta @ W.T) * (a > 0)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        flat.append(gb)
    return value, np.concatenate(flat)


def grad(params: ModelParams, X, y) -> np.ndarray:
    return loss_and_grad(params, X, y)[1]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 107
    batch_size: int = 32
    learning_rate: float = 0.05
    early_stop_patience: int = 10
    lr_reduce_patience: int = 5
    lr_reduce_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("max_epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_reduce_factor < 1:
            raise ValueError("lr_reduce_factor must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.lr_reduce_patience < 1:
            raise ValueError("patience counts must be >= 1")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    best_accuracy: float
    learning_rate: float


@dataclass
class History:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)


def train(
    X,
    y,
    cfg: TrainConfig,
    shape: NetShape | None = None,
    init: ModelParams | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[ModelParams, History]:
    """Mini-batch SGD with plateau LR reduction and early stopping.

    The monitored metric is accuracy on `val` when given, otherwise training
    accuracy. Returns the parameters of the best monitored epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(y):
        raise ValueError("training data must be a non-empty (n, d) matrix with n labels")
    if init is None:
        init = init_params(shape or NetShape(X.shape[1]), cfg.seed)
    params = init.copy()
    _as_batch(params, X[:1])

    hist = History()
    if len(np.unique(y)) < 2:
        hist.warnings.append(
            f"degenerate data: every label is {int(y[0])}; the model can only learn a constant"
        )
    if cfg.max_epochs == 0:
        return params, hist

    Xm, ym = val if val is not None else (X, y)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    best = params.copy()
    best_acc = -1.0
    since_best = since_lr = 0
    n = len(y)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            value, g = loss_and_grad(params, X[idx], y[idx])
            params.theta -= lr * g
            total += value * len(idx)
        if not np.all(np.isfinite(params.theta)):
            hist.warnings.append(f"epoch {epoch}: non-finite parameters, training stopped")
            break
        acc = accuracy(params, Xm, ym)
        if acc > best_acc:
            best_acc, best = acc, params.copy()
            hist.best_epoch = epoch
            since_best = since_lr = 0
        else:
            since_best += 1
            since_lr += 1
        hist.epochs.append(EpochStats(epoch, total / n, acc, best_acc, lr))
        if since_best >= cfg.early_stop_patience:
            hist.stopped_early = True
            break
        if since_lr >= cfg.lr_reduce_patience:
            lr *= cfg.lr_reduce_factor
            since_lr = 0
    return best, hist


# ---------------------------------------------------------------------------
# file format: one ASCII header line, then theta as little-endian float64


def dumps_params(params: ModelParams, key: str | None = None) -> bytes:
    dims = ",".join(str(d) for d in params.shape.dims)
    header = f"{_MAGIC} 1 key={key or '-'} shape={dims}\n".encode("ascii")
    body = struct.pack(f"<{params.theta.size}d", *params.theta.tolist())
    return header + body


def loads_params(blob: bytes) -> tuple[ModelParams, str | None]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError("missing params header")
    parts = blob[:nl].decode("ascii").split()
    if len(parts) != 4 or parts[0] != _MAGIC or parts[1] != "1":
        raise ValueError(f"not a params file: {blob[:nl]!r}")
    fields = dict(p.split("=", 1) for p in parts[2:])
    dims = [int(d) for d in fields["shape"].split(",")]
    shape = NetShape(dims[0], tuple(dims[1:-1]), dims[-1])
    body = blob[nl + 1 :]
    if len(body) != 8 * shape.n_params:
        raise ValueError("params body length does not match the header shape")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    key = None if fields["key"] == "-" else fields["key"]
    return ModelParams(shape, theta), key
