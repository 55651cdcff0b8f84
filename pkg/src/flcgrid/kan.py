"""Chebyshev Kolmogorov-Arnold network written directly on numpy.

Each edge ``(i -> o)`` of a layer carries a univariate polynomial
``sum_n C[i, o, n] T_n(tanh(x_i))``; node outputs are sums over incoming
edges.  Gradients are derived by hand (no autodiff dependency).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatch, DivergedLoss, EmptyBatch

SCHEMA_VERSION = 1
EDGE_GRID_POINTS = 129


def _stack_basis(x, degree: int) -> np.ndarray:
    # degree-major layout (degree + 1, *x.shape) keeps every T_n contiguous
    out = np.empty((degree + 1,) + x.shape)
    out[0] = 1.0
    if degree >= 1:
        out[1] = x
    for n in range(2, degree + 1):
        np.multiply(x, out[n - 1], out=out[n])
        out[n] *= 2.0
        out[n] -= out[n - 2]
    return out


def _stack_derivative(x, degree: int) -> np.ndarray:
    # T_n' = n U_{n-1}, with U the second-kind polynomials
    out = np.zeros((degree + 1,) + x.shape)
    if degree == 0:
        return out
    u_prev, u = np.ones_like(x), 2.0 * x
    out[1] = 1.0
    for n in range(2, degree + 1):
        out[n] = n * u
        u_prev, u = u, 2.0 * x * u - u_prev
    return out


def chebyshev_basis(x, degree: int) -> np.ndarray:
    """``[T_0(x), ..., T_degree(x)]`` along a new trailing axis."""
    x = np.asarray(x, dtype=float)
    return np.moveaxis(_stack_basis(x.reshape(-1), degree), 0, -1).reshape(x.shape + (degree + 1,))


def chebyshev_derivative(x, degree: int) -> np.ndarray:
    """``[T_0'(x), ..., T_degree'(x)]`` along a new trailing axis."""
    x = np.asarray(x, dtype=float)
    return np.moveaxis(_stack_derivative(x.reshape(-1), degree), 0, -1).reshape(x.shape + (degree + 1,))


@dataclass
class ChebyKanLayer:
    coeffs: np.ndarray  # (in_dim, out_dim, degree + 1)

    def __post_init__(self):
        self.coeffs = np.array(self.coeffs, dtype=float)
        if self.coeffs.ndim != 3:
            raise DimensionMismatch(f"coefficients must be 3-D, got shape {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite coefficient")

    @property
    def in_dim(self) -> int:
        return self.coeffs.shape[0]

    @property
    def out_dim(self) -> int:
        return self.coeffs.shape[1]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[2] - 1

    def _apply(self, basis):
        # basis: (degree + 1, batch, in_dim)
        y = basis[0] @ self.coeffs[:, :, 0]
        for n in range(1, self.degree + 1):
            y += basis[n] @ self.coeffs[:, :, n]
        return y

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.in_dim:
            raise DimensionMismatch(f"layer expects {self.in_dim} inputs, got {x.shape[1]}")
        y = self._apply(_stack_basis(np.tanh(x), self.degree))
        return y[0] if single else y


def layer_forward(layer: ChebyKanLayer, x):
    return layer.forward(x)


@dataclass
class ChebyKanModel:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.layers = list(self.layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionMismatch(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def dims(self) -> list:
        if not self.layers:
            return []
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    @property
    def degrees(self) -> list:
        return [l.degree for l in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def copy(self) -> "ChebyKanModel":
        return ChebyKanModel([ChebyKanLayer(l.coeffs.copy()) for l in self.layers])

    def same_architecture(self, other: "ChebyKanModel") -> bool:
        return [l.coeffs.shape for l in self.layers] == [l.coeffs.shape for l in other.layers]

    @classmethod
    def zeros(cls, dims, degree) -> "ChebyKanModel":
        degrees = _degrees(dims, degree)
        return cls([ChebyKanLayer(np.zeros((i, o, d + 1))) for i, o, d in zip(dims, dims[1:], degrees)])

    @classmethod
    def init(cls, dims, degree, seed) -> "ChebyKanModel":
        """Zero-mean uniform coefficients with half-width ``1 / (in_dim * (degree + 1))``."""
        rng = np.random.default_rng(seed)
        layers = []
        for i, o, d in zip(dims, dims[1:], _degrees(dims, degree)):
            width = 1.0 / (i * (d + 1))
            layers.append(ChebyKanLayer(rng.uniform(-width, width, size=(i, o, d + 1))))
        return cls(layers)


def _degrees(dims, degree):
    if isinstance(degree, (int, np.integer)):
        return [int(degree)] * (len(dims) - 1)
    degree = [int(d) for d in degree]
    if len(degree) != len(dims) - 1:
        raise DimensionMismatch("need one degree per layer")
    return degree


def model_forward(model: ChebyKanModel, x):
    return model.forward(x)


class TrainingSample(NamedTuple):
    omega: float
    delta_err: float
    t_feature: float
    target: float


@dataclass
class Dataset:
    """Column-stored training samples: ``inputs`` (n, in_dim) and ``targets`` (n,) or (n, out_dim)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.targets.ndim == 0:
            self.targets = self.targets.reshape(1)
        if self.inputs.ndim < 2:
            self.inputs = self.inputs.reshape(len(self.targets), -1) if self.inputs.size else np.zeros((0, 3))
        if self.inputs.ndim != 2 or self.targets.ndim > 2:
            raise DimensionMismatch("inputs must be 2-D and targets 1-D or 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionMismatch("inputs and targets differ in length")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training samples must be finite")

    def __len__(self):
        return self.targets.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "Dataset":
        arr = np.array([tuple(s) for s in samples], dtype=float).reshape(-1, 4)
        return cls(arr[:, :3], arr[:, 3])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx])

    @classmethod
    def concat(cls, parts) -> "Dataset":
        parts = list(parts)
        return cls(np.vstack([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]))


def _targets_2d(batch: Dataset, model):
    return batch.targets.reshape(len(batch), model.out_dim)


def loss_mse(model: ChebyKanModel, batch: Dataset) -> float:
    """Mean over samples of the squared prediction error (summed over outputs)."""
    if len(batch) == 0:
        raise EmptyBatch("loss of an empty batch")
    resid = model.forward(batch.inputs) - _targets_2d(batch, model)
    return float(np.mean(np.sum(resid**2, axis=1)))


def backward(model: ChebyKanModel, batch: Dataset):
    """Exact gradient of :func:`loss_mse`; returns ``(loss, [dL/dC per layer])``."""
    n = len(batch)
    if n == 0:
        raise EmptyBatch("gradient of an empty batch")
    caches = []
    x = batch.inputs
    for layer in model.layers:
        z = np.tanh(x)
        basis = _stack_basis(z, layer.degree)
        caches.append((z, basis))
        x = layer._apply(basis)
    resid = x - _targets_2d(batch, model)
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    g = (2.0 / n) * resid
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        z, basis = caches[k]
        grad = np.empty_like(layer.coeffs)
        for d in range(layer.degree + 1):
            grad[:, :, d] = basis[d].T @ g
        grads[k] = grad
        if k == 0:
            break
        dbasis = _stack_derivative(z, layer.degree)
        g_z = np.zeros_like(z)
        for d in range(1, layer.degree + 1):
            g_z += (g @ layer.coeffs[:, :, d].T) * dbasis[d]
        g = g_z * (1.0 - z * z)
    return loss, grads


@dataclass
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class _Adam:
    def __init__(self, shapes, hyper):
        self.h = hyper
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        h = self.h
        self.t += 1
        c1 = 1.0 - h.beta1**self.t
        c2 = 1.0 - h.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * g * g
            p -= h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)


class _SGD:
    def __init__(self, shapes, hyper):
        self.lr = hyper.lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


OPTIMIZERS = {"adam": _Adam, "sgd": _SGD}


def train_local(model: ChebyKanModel, shard: Dataset, hyper: TrainHyper):
    """Mini-batch training on a private copy; returns ``(trained_model, final_epoch_loss)``.

    The epoch loss is the sample-weighted mean of the per-batch losses seen
    during that epoch (each measured before its update).
    """
    n = len(shard)
    if n == 0:
        raise EmptyBatch("cannot train on an empty shard")
    if hyper.optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {hyper.optimizer!r}")
    model = model.copy()
    params = [l.coeffs for l in model.layers]
    opt = OPTIMIZERS[hyper.optimizer]([p.shape for p in params], hyper)
    rng = np.random.default_rng(hyper.seed)
    epoch_loss = loss_mse(model, shard) if hyper.epochs <= 0 else float("nan")
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            loss, grads = backward(model, shard.subset(idx))
            if not math.isfinite(loss):
                raise DivergedLoss(f"loss became {loss}")
            total += loss * len(idx)
            opt.step(params, grads)
        epoch_loss = total / n
        if not all(np.all(np.isfinite(p)) for p in params):
            raise DivergedLoss("coefficients became non-finite")
    return model, epoch_loss


def param_count(model: ChebyKanModel) -> int:
    return sum(l.coeffs.size for l in model.layers)


def flop_breakdown(model: ChebyKanModel) -> dict:
    """Per-pass operation counts, one multiply or add each.

    Basis recurrence: ``T_n = 2 z T_{n-1} - T_{n-2}`` costs 3 for every
    ``n >= 2`` and input feature.  Edge sums: one multiply and one add per
    coefficient.  ``tanh`` squashing is a transcendental call and is not counted.
    """
    recurrence = sum(l.in_dim * 3 * max(l.degree - 1, 0) for l in model.layers)
    edge_sums = sum(2 * l.coeffs.size for l in model.layers)
    return {"recurrence": recurrence, "edge_sums": edge_sums, "total": recurrence + edge_sums}


def flop_count(model: ChebyKanModel) -> int:
    return flop_breakdown(model)["total"]


@dataclass
class EdgeFunction:
    layer: int
    input: int
    output: int
    coefficients: list
    z: list
    values: list


def export_edges(model: ChebyKanModel, points: int = EDGE_GRID_POINTS) -> list:
    """Tabulate every learned edge function on a uniform grid over ``z in [-1, 1]``."""
    z = np.linspace(-1.0, 1.0, points)
    edges = []
    for k, layer in enumerate(model.layers):
        basis = chebyshev_basis(z, layer.degree)  # (points, degree + 1)
        for i in range(layer.in_dim):
            for o in range(layer.out_dim):
                c = layer.coeffs[i, o]
                edges.append(EdgeFunction(k, i, o, c.tolist(), z.tolist(), (basis @ c).tolist()))
    return edges


def to_checkpoint(model: ChebyKanModel, training: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "dims": model.dims,
        "degrees": model.degrees,
        "coefficients": [l.coeffs.tolist() for l in model.layers],
        "training": dict(training or {}),
    }


def from_checkpoint(doc: dict) -> ChebyKanModel:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    model = ChebyKanModel([ChebyKanLayer(np.array(c, dtype=float)) for c in doc["coefficients"]])
    if model.dims != list(doc["dims"]) or model.degrees != list(doc["degrees"]):
        raise DimensionMismatch("checkpoint header disagrees with coefficient shapes")
    return model


def save_checkpoint(path, model: ChebyKanModel, training: dict | None = None):
    with open(path, "w") as fh:
        json.dump(to_checkpoint(model, training), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple:
    """Returns ``(model, training_metadata)``."""
    with open(path) as fh:
        doc = json.load(fh)
    return from_checkpoint(doc), doc.get("training", {})
