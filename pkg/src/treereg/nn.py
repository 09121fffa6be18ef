"""Small feedforward networks with hand-written gradients.

Parameters live in one flat vector (row-major, layer by layer: ``W0, b0, W1,
b1, ...`` with ``W`` of shape ``(fan_in, fan_out)``).  The same vector is the
"theta" that surrogate estimators take as input, so flattening is free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidArchitectureError, ShapeError

EPS = 1e-7
HEADS = ("sigmoid", "identity")


@dataclass(frozen=True)
class MlpModel:
    layer_sizes: tuple[int, ...]
    params: np.ndarray
    head: str = "sigmoid"

    def __post_init__(self):
        if len(self.params) != param_count(self.layer_sizes):
            raise ShapeError(
                f"expected {param_count(self.layer_sizes)} parameters, got {len(self.params)}"
            )
        if self.head not in HEADS:
            raise InvalidArchitectureError(f"unknown head {self.head!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the flat parameter vector."""
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = self.params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = self.params[pos : pos + fan_out]
            pos += fan_out
            out.append((W, b))
        return out

    def with_params(self, params: np.ndarray) -> "MlpModel":
        return MlpModel(self.layer_sizes, np.asarray(params, dtype=float), self.head)


def _check_sizes(layer_sizes) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise InvalidArchitectureError("need at least an input and an output size")
    if any(s < 1 for s in sizes):
        raise InvalidArchitectureError(f"layer sizes must be >= 1, got {sizes}")
    return sizes


def param_count(layer_sizes) -> int:
    sizes = _check_sizes(layer_sizes)
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def init_mlp(layer_sizes, seed: int, head: str = "sigmoid") -> MlpModel:
    """He-style init: weights ~ N(0, 2/fan_in), zero biases."""
    sizes = _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return MlpModel(sizes, np.concatenate(chunks), head)


def flatten(model: MlpModel) -> np.ndarray:
    return model.params.copy()


def unflatten(layer_sizes, values, head: str = "sigmoid") -> MlpModel:
    return MlpModel(_check_sizes(layer_sizes), np.array(values, dtype=float), head)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.n_inputs:
        raise ShapeError(f"input has shape {x.shape}, model expects {model.n_inputs} features")
    return X, single


def _forward_cache(model: MlpModel, X: np.ndarray):
    """Returns the list of layer inputs and the final pre-activation."""
    acts = [X]
    layers = model.layers
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return acts, z
    raise AssertionError("unreachable")


def forward(model: MlpModel, x) -> np.ndarray:
    """Predict for one input vector or a batch of rows."""
    X, single = _as_batch(model, x)
    _, z = _forward_cache(model, X)
    out = sigmoid(z) if model.head == "sigmoid" else z
    return out[0] if single else out


def loss_bce(pred, y) -> float:
    """Mean binary cross-entropy over all entries, predictions clamped to [EPS, 1-EPS]."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {y.shape}")
    p = np.clip(pred, EPS, 1.0 - EPS)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def _backprop(model: MlpModel, acts, dz_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flat parameters given d(loss)/d(final pre-activation)."""
    layers = model.layers
    grads = []
    dz = dz_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h = acts[i]
        grads.append(dz.sum(axis=0))
        grads.append((h.T @ dz).ravel())
        if i > 0:
            dz = (dz @ W.T) * (h > 0)
    grads.reverse()
    return np.concatenate(grads)


def backward(model: MlpModel, X, Y, extra_param_grad=None) -> np.ndarray:
    """Gradient of the mean batch loss, plus an optional external penalty gradient.

    Sigmoid heads use mean BCE over outputs; identity heads use mean squared error.
    """
    X, _ = _as_batch(model, X)
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    if len(X) == 0:
        raise ShapeError("empty batch")
    if Y.shape[1] != model.n_outputs:
        raise ShapeError(f"label width {Y.shape[1]} != model outputs {model.n_outputs}")
    acts, z = _forward_cache(model, X)
    scale = 1.0 / Y.size
    if model.head == "sigmoid":
        p = sigmoid(z)
        live = (p > EPS) & (p < 1.0 - EPS)
        dz = (p - Y) * live * scale
    else:
        dz = 2.0 * (z - Y) * scale
    g = _backprop(model, acts, dz)
    if extra_param_grad is not None:
        extra = np.asarray(extra_param_grad, dtype=float)
        if extra.shape != g.shape:
            raise ShapeError(f"extra gradient has shape {extra.shape}, expected {g.shape}")
        g = g + extra
    return g


def grad_wrt_input(model: MlpModel, x) -> np.ndarray:
    """d(output)/d(x) for a scalar-output model (pre-head value for identity heads)."""
    if model.n_outputs != 1:
        raise ContractError("input gradient is only defined for scalar-output models")
    X, _ = _as_batch(model, x)
    if len(X) != 1:
        raise ShapeError("grad_wrt_input takes a single input vector")
    acts, z = _forward_cache(model, X)
    dz = np.ones_like(z)
    if model.head == "sigmoid":
        p = sigmoid(z)
        dz = p * (1.0 - p)
    layers = model.layers
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        dz = dz @ W.T
        if i > 0:
            dz = dz * (acts[i] > 0)
    return dz[0]


@dataclass(frozen=True)
class OptimizerState:
    """Adam moments and step counter."""

    lr: float = 1e-3
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_state(model: MlpModel, lr: float = 1e-3) -> OptimizerState:
    n = len(model.params)
    return OptimizerState(lr=lr, m=np.zeros(n), v=np.zeros(n))


def step(model: MlpModel, grad, opt: OptimizerState) -> tuple[MlpModel, OptimizerState]:
    grad = np.asarray(grad, dtype=float)
    if grad.shape != model.params.shape or opt.m.shape != model.params.shape:
        raise ShapeError("gradient / optimizer state shape does not match the model")
    t = opt.t + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
    m_hat = m / (1.0 - opt.beta1**t)
    v_hat = v / (1.0 - opt.beta2**t)
    params = model.params - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    new_opt = OptimizerState(opt.lr, m, v, t, opt.beta1, opt.beta2, opt.eps)
    return model.with_params(params), new_opt


def model_to_dict(model: MlpModel) -> dict:
    n = len(model.layer_sizes) - 1
    return {
        "layer_sizes": list(model.layer_sizes),
        "activations": ["relu"] * (n - 1) + [model.head],
        "params": model.params.tolist(),
    }


def model_from_dict(d: dict) -> MlpModel:
    return unflatten(d["layer_sizes"], d["params"], d["activations"][-1])


def save_model(model: MlpModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> MlpModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
