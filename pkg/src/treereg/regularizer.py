"""Tree-complexity penalties and the surrogate machinery that makes them differentiable.

Per-region APLs are not differentiable in the network parameters, so each
region gets a small regression network (a surrogate) mapping the flat
parameter vector to an APL estimate.  Penalties combine the per-region
estimates by sum (L1), max (L0) or sparsemax weighting (LSP); their gradient
is the weighted sum of surrogate input-gradients, with the weights held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from .errors import ContractError, InvalidInputError, ShapeError
from .regions import RegionSpec, partition
from .tree import TreeConfig, apl_of_labels

log = logging.getLogger(__name__)

KINDS = ("none", "l2", "global_tree", "regional_l1", "regional_l0", "regional_lsp")
TREE_KINDS = ("global_tree", "regional_l1", "regional_l0", "regional_lsp")
_COMBINE = {"l1": "l1", "l0": "l0", "lsp": "lsp", "global_tree": "l1",
            "regional_l1": "l1", "regional_l0": "l0", "regional_lsp": "lsp"}


@dataclass(frozen=True)
class RegularizerKind:
    kind: str = "none"
    strength: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown regularizer {self.kind!r}; pick one of {KINDS}")
        if self.strength < 0:
            raise InvalidInputError("regularization strength must be >= 0")
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be > 0")

    @property
    def uses_trees(self) -> bool:
        return self.kind in TREE_KINDS


def sparsemax(z) -> np.ndarray:
    """Euclidean projection of ``z`` onto the probability simplex."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or len(z) == 0:
        raise InvalidInputError("sparsemax needs a nonempty vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("sparsemax entries must be finite")
    # centering first makes exactly representable shifts give bit-identical output
    z = z - z.max()
    zs = np.sort(z)[::-1]
    cssv = np.cumsum(zs)
    r = np.arange(1, len(z) + 1)
    k = r[1.0 + r * zs > cssv][-1]
    if k == 1:
        # z_max - tau rounds off 1 in floating point; the support is a single vertex
        p = np.zeros_like(z)
        p[int(np.argmax(z))] = 1.0
        return p
    tau = (cssv[k - 1] - 1.0) / k
    return np.maximum(z - tau, 0.0)


def penalty(kind: str, apl_estimates, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Combine per-region APL estimates into ``(value, weights)``."""
    est = np.maximum(np.asarray(apl_estimates, dtype=float), 0.0)
    if est.ndim != 1 or len(est) == 0:
        raise InvalidInputError("penalty needs a nonempty estimate vector")
    mode = _COMBINE.get(kind)
    if mode is None:
        raise InvalidInputError(f"no tree penalty for kind {kind!r}")
    if mode == "l1":
        w = np.ones_like(est)
    elif mode == "l0":
        w = np.zeros_like(est)
        w[int(np.argmax(est))] = 1.0
    else:
        w = sparsemax(est / temperature)
    return float(w @ est), w


@dataclass(frozen=True, eq=False)
class ParamBuffer:
    """FIFO store of ``(theta, per-region APL)`` records."""

    thetas: np.ndarray
    apls: np.ndarray
    capacity: int = 50

    def __post_init__(self):
        if self.thetas.ndim != 2 or self.apls.ndim != 2 or len(self.thetas) != len(self.apls):
            raise ShapeError("buffer arrays must be J x D and J x R")
        if np.any(self.apls < 0):
            raise InvalidInputError("APL values must be nonnegative")

    def __len__(self) -> int:
        return len(self.thetas)

    @classmethod
    def empty(cls, dim: int, n_regions: int, capacity: int = 50) -> "ParamBuffer":
        return cls(np.zeros((0, dim)), np.zeros((0, n_regions)), capacity)

    def add(self, theta, apls) -> "ParamBuffer":
        theta = np.asarray(theta, dtype=float)[None, :]
        apls = np.asarray(apls, dtype=float)[None, :]
        if theta.shape[1] != self.thetas.shape[1] or apls.shape[1] != self.apls.shape[1]:
            raise ShapeError("record does not match buffer dimensions")
        thetas = np.vstack([self.thetas, theta])[-self.capacity :]
        vals = np.vstack([self.apls, apls])[-self.capacity :]
        return ParamBuffer(thetas, vals, self.capacity)

    def extend(self, thetas, apls) -> "ParamBuffer":
        """Append without eviction (capacity grows to fit)."""
        t = np.vstack([self.thetas, thetas])
        return ParamBuffer(t, np.vstack([self.apls, apls]), max(self.capacity, len(t)))


def augment_buffer(buffer: ParamBuffer, n_synthetic: int, seed: int,
                   apl_oracle: Callable[[np.ndarray], np.ndarray]) -> ParamBuffer:
    """Add ``n_synthetic`` Dirichlet(1,...,1) mixtures of stored parameter vectors,
    each labeled by ``apl_oracle``."""
    if len(buffer) == 0:
        raise InvalidInputError("cannot augment an empty buffer")
    if n_synthetic < 0:
        raise InvalidInputError("n_synthetic must be >= 0")
    if n_synthetic == 0:
        return buffer
    rng = np.random.default_rng(seed)
    J = len(buffer)
    weights = rng.dirichlet(np.ones(J), size=n_synthetic) if J > 1 else np.ones((n_synthetic, 1))
    synth = weights @ buffer.thetas
    apls = np.array([apl_oracle(t) for t in synth], dtype=float).reshape(n_synthetic, -1)
    return buffer.extend(synth, apls)


def regional_apls_from_predictions(X, pred, parts, cfg: TreeConfig) -> np.ndarray:
    """APL per region for fixed predictions; regions with fewer than 2 points give 0."""
    out = np.zeros(len(parts))
    for r, idx in enumerate(parts):
        if len(idx) >= 2:
            out[r] = apl_of_labels(X[idx], pred[idx], cfg)
    return out


def true_regional_apls(model: nn.MlpModel, X, spec: RegionSpec | None, cfg: TreeConfig,
                       parts=None) -> np.ndarray:
    """Per-region APL of the network's thresholded predictions on ``X``."""
    X = np.asarray(X, dtype=float)
    if parts is None:
        parts = [np.arange(len(X))] if spec is None else partition(X, spec)
    return regional_apls_from_predictions(X, nn.forward(model, X), parts, cfg)


@dataclass(frozen=True)
class SurrogateConfig:
    hidden: int = 25
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 64
    weight_decay: float = 1e-4
    retrain_period: int = 25
    n_synthetic: int = 500
    capacity: int = 50
    project: bool = True
    max_dim: int = 50
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SurrogateSet:
    """One scalar surrogate per region; ``None`` marks an excluded (empty) region."""

    models: tuple
    config: SurrogateConfig = field(default_factory=SurrogateConfig)
    train_mse: tuple = ()

    @property
    def n_regions(self) -> int:
        return len(self.models)

    @property
    def trained(self) -> bool:
        return any(m is not None for m in self.models)

    def predict(self, theta) -> np.ndarray:
        """Raw (unclamped) surrogate outputs; excluded regions read 0."""
        theta = np.asarray(theta, dtype=float)
        return np.array([0.0 if m is None else float(nn.forward(m, theta)[0]) for m in self.models])


def _fold_normalization(model: nn.MlpModel, mu, basis, y_mean, y_std) -> nn.MlpModel:
    """Rewrite a net trained on ``(theta - mu) @ basis -> (y - y_mean) / y_std``
    into one acting on raw theta and producing raw APL."""
    layers = [(W.copy(), b.copy()) for W, b in model.layers]
    W, b = layers[0]
    layers[0] = (basis @ W, b - (mu @ basis) @ W)
    W, b = layers[-1]
    layers[-1] = (W * y_std, b * y_std + y_mean)
    sizes = (len(mu),) + model.layer_sizes[1:]
    params = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])
    return nn.MlpModel(sizes, params, model.head)


def subspace_basis(thetas, max_dim: int) -> np.ndarray:
    """Scaled principal directions of the stored parameters (``D x k``).

    Columns span the affine hull of the records, divided by one shared scale
    so projected coordinates have unit mean square.
    """
    dev = thetas - thetas.mean(axis=0)
    # eigenvectors of the J x J Gram matrix are cheaper than an SVD when J << D
    evals, U = np.linalg.eigh(dev @ dev.T)
    evals, U = evals[::-1], U[:, ::-1]
    keep = evals > 1e-12 * max(evals[0], 1e-300)
    k = int(min(keep.sum(), max_dim))
    if k == 0:
        V = np.zeros((thetas.shape[1], 1))
        V[0, 0] = 1.0
        return V
    V = dev.T @ U[:, :k] / np.sqrt(evals[:k])
    coords = dev @ V
    scale = float(np.sqrt(np.mean(coords**2)))
    return V / (scale if scale > 1e-12 else 1.0)


def _input_basis(thetas, cfg: SurrogateConfig) -> np.ndarray:
    if cfg.project:
        return subspace_basis(thetas, cfg.max_dim)
    rms = float(np.sqrt(np.mean((thetas - thetas.mean(axis=0)) ** 2)))
    return np.eye(thetas.shape[1]) / max(rms, 1e-12)


def fit_surrogate(thetas, targets, cfg: SurrogateConfig, seed: int,
                  basis: np.ndarray | None = None) -> tuple[nn.MlpModel, float]:
    """Minibatch Adam on squared error; returns the model (on raw inputs) and train MSE.

    Fitting happens in the principal subspace of ``thetas``; the projection is
    folded into the first layer, so the input-gradient never leaves the span
    of the training records.
    """
    thetas = np.asarray(thetas, dtype=float)
    targets = np.asarray(targets, dtype=float)
    J, D = thetas.shape
    mu = thetas.mean(axis=0)
    if basis is None:
        basis = _input_basis(thetas, cfg)
    y_mean = float(targets.mean())
    y_std = float(targets.std())
    if y_std < 1e-8:
        y_std = 1.0
    Xn = (thetas - mu) @ basis
    yn = ((targets - y_mean) / y_std)[:, None]

    k = Xn.shape[1]
    sizes = [k, cfg.hidden, 1] if cfg.hidden > 0 else [k, 1]
    model = nn.init_mlp(sizes, seed, head="identity")
    opt = nn.adam_state(model, cfg.lr)
    rng = np.random.default_rng(seed)
    bs = min(cfg.batch_size, J)
    for _ in range(cfg.epochs):
        order = rng.permutation(J)
        for s in range(0, J, bs):
            idx = order[s : s + bs]
            g = nn.backward(model, Xn[idx], yn[idx])
            g = g + cfg.weight_decay * model.params
            model, opt = nn.step(model, g, opt)
    folded = _fold_normalization(model, mu, basis, y_mean, y_std)
    mse = float(np.mean((nn.forward(folded, thetas)[:, 0] - targets) ** 2))
    return folded, mse


def init_surrogates(n_regions: int, cfg: SurrogateConfig = SurrogateConfig()) -> SurrogateSet:
    return SurrogateSet(tuple([None] * n_regions), cfg)


def train_surrogates(buffer: ParamBuffer, surrogates: SurrogateSet, active=None) -> SurrogateSet:
    """Independent refit of every active region's surrogate on the buffer."""
    if len(buffer) == 0:
        raise InvalidInputError("cannot train surrogates on an empty buffer")
    R = surrogates.n_regions
    if buffer.apls.shape[1] != R:
        raise ShapeError("buffer APL width does not match the number of regions")
    active = np.ones(R, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    cfg = surrogates.config
    basis = _input_basis(buffer.thetas, cfg)
    models, mses = [], []
    for r in range(R):
        if not active[r]:
            models.append(None)
            mses.append(float("nan"))
            continue
        m, mse = fit_surrogate(buffer.thetas, buffer.apls[:, r], cfg, seed=cfg.seed + 7919 * r,
                               basis=basis)
        models.append(m)
        mses.append(mse)
    return replace(surrogates, models=tuple(models), train_mse=tuple(mses))


def penalty_grad(kind: RegularizerKind | str, surrogates: SurrogateSet | None, theta,
                 temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Surrogate penalty value and its gradient in theta (weights held fixed).

    ``l2`` ignores the surrogates and returns ``(|theta|^2, 2 theta)``.
    """
    if isinstance(kind, RegularizerKind):
        temperature = kind.temperature
        kind = kind.kind
    theta = np.asarray(theta, dtype=float)
    if kind == "none":
        return 0.0, np.zeros_like(theta)
    if kind == "l2":
        return float(theta @ theta), 2.0 * theta
    if surrogates is None or not surrogates.trained:
        raise ContractError("surrogates must be trained before computing a tree penalty")
    raw = surrogates.predict(theta)
    value, weights = penalty(kind, raw, temperature)
    grad = np.zeros_like(theta)
    for r, m in enumerate(surrogates.models):
        # clamped (negative) estimates contribute no gradient
        if m is None or weights[r] == 0.0 or raw[r] < 0.0:
            continue
        grad += weights[r] * nn.grad_wrt_input(m, theta)
    return value, grad
