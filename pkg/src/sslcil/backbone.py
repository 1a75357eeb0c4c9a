"""Three-hidden-layer MLP backbone (affine -> batchnorm -> ReLU, three times).

The backbone is trained once by Adam on base-phase data through a temporary
linear head and MSE loss, then frozen and used purely as an embedding.
Backpropagation, including the batchnorm backward pass, is hand-written.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import FrozenError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
N_LAYERS = 3


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if not (self.learning_rate > 0 and self.weight_decay >= 0):
            raise ParameterError("learning_rate must be > 0 and weight_decay >= 0")


@dataclass
class BackboneWeights:
    """Named parameter tensors: for layer l, ``W{l}``, ``b{l}`` (affine),
    ``gamma{l}``, ``beta{l}`` (batchnorm affine) and ``mean{l}``, ``var{l}``
    (running statistics)."""

    dims: tuple  # (d_in, h1, h2, d_mlp)
    params: dict
    frozen: bool = False
    loss_history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        for l in range(N_LAYERS):
            w = self.params[f"W{l}"]
            if w.shape != (self.dims[l], self.dims[l + 1]):
                raise ShapeError(f"W{l} has shape {w.shape}, expected {self.dims[l:l + 2]}")
            if np.any(self.params[f"var{l}"] <= 0):
                raise ParameterError(f"running variance of layer {l} must be positive")
        if self.frozen:
            for arr in self.params.values():
                arr.setflags(write=False)

    @property
    def d_in(self):
        return self.dims[0]

    @property
    def d_out(self):
        return self.dims[-1]

    def freeze(self) -> "BackboneWeights":
        """Return a read-only copy."""
        params = {k: np.array(v, copy=True) for k, v in self.params.items()}
        return BackboneWeights(self.dims, params, frozen=True, loss_history=list(self.loss_history))


def learnable_names():
    return [f"{p}{l}" for l in range(N_LAYERS) for p in ("W", "b", "gamma", "beta")]


def count_parameters(weights: BackboneWeights) -> int:
    return sum(weights.params[k].size for k in learnable_names())


def _uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(d_in, h1=512, h2=512, d_mlp=512, seed=0) -> BackboneWeights:
    dims = (d_in, h1, h2, d_mlp)
    if min(dims) < 1:
        raise ParameterError(f"all layer sizes must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    params = {}
    for l in range(N_LAYERS):
        fan_in, fan_out = dims[l], dims[l + 1]
        params[f"W{l}"] = _uniform_fan_in(rng, fan_in, (fan_in, fan_out))
        params[f"b{l}"] = _uniform_fan_in(rng, fan_in, (fan_out,))
        params[f"gamma{l}"] = np.ones(fan_out)
        params[f"beta{l}"] = np.zeros(fan_out)
        params[f"mean{l}"] = np.zeros(fan_out)
        params[f"var{l}"] = np.ones(fan_out)
    return BackboneWeights(dims, params)


def _forward(X, params, batch_stats):
    """Returns (output, cache). With ``batch_stats`` the cache also carries
    the per-layer batch mean/variance used for normalisation."""
    a = X
    cache = []
    for l in range(N_LAYERS):
        z = a @ params[f"W{l}"] + params[f"b{l}"]
        if batch_stats:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mu, var = params[f"mean{l}"], params[f"var{l}"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (z - mu) * inv_std
        y = params[f"gamma{l}"] * zhat + params[f"beta{l}"]
        cache.append((a, zhat, inv_std, y, mu, var))
        a = np.maximum(y, 0.0)
    return a, cache


def _check_input(X, weights):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != weights.d_in:
        raise ShapeError(f"input has shape {X.shape}, expected (N, {weights.d_in})")
    return X


def forward(X, weights: BackboneWeights, mode="eval") -> np.ndarray:
    """Backbone activations (N, d_mlp).

    ``train`` normalises with batch statistics and folds them into the running
    averages, so it refuses frozen weights.  ``eval`` uses running statistics.
    """
    X = _check_input(X, weights)
    if mode == "eval":
        return _forward(X, weights.params, batch_stats=False)[0]
    if mode != "train":
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if weights.frozen:
        raise FrozenError("train-mode forward would update running statistics of frozen weights")
    out, cache = _forward(X, weights.params, batch_stats=True)
    _update_running_stats(weights.params, cache, X.shape[0])
    return out


def _update_running_stats(params, cache, n):
    for l, (_, _, _, _, mu, var) in enumerate(cache):
        unbiased = var * n / (n - 1) if n > 1 else var
        params[f"mean{l}"] = (1 - BN_MOMENTUM) * params[f"mean{l}"] + BN_MOMENTUM * mu
        params[f"var{l}"] = (1 - BN_MOMENTUM) * params[f"var{l}"] + BN_MOMENTUM * unbiased


def embed(X, weights: BackboneWeights) -> np.ndarray:
    """Frozen eval-mode embedding."""
    if not weights.frozen:
        raise FrozenError("embed requires frozen backbone weights")
    return forward(X, weights, mode="eval")


def loss_and_grads(params, head, X, Y):
    """MSE of the linear head on train-mode backbone output, and gradients.

    ``head`` holds ``W`` (d_mlp, C) and ``b`` (C,).  The loss is the mean over
    all N*C entries.  Returns (loss, grads, cache) where grads is keyed like
    ``params`` (learnable entries only) plus ``head_W``/``head_b``.
    """
    n = X.shape[0]
    h, cache = _forward(X, params, batch_stats=True)
    out = h @ head["W"] + head["b"]
    diff = out - Y
    loss = float(np.mean(diff**2))
    dout = 2.0 * diff / diff.size
    grads = {"head_W": h.T @ dout, "head_b": dout.sum(axis=0)}
    da = dout @ head["W"].T
    for l in reversed(range(N_LAYERS)):
        a_prev, zhat, inv_std, y, _, _ = cache[l]
        dy = da * (y > 0)
        grads[f"gamma{l}"] = np.sum(dy * zhat, axis=0)
        grads[f"beta{l}"] = dy.sum(axis=0)
        dzhat = dy * params[f"gamma{l}"]
        dz = inv_std / n * (
            n * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0)
        )
        grads[f"W{l}"] = a_prev.T @ dz
        grads[f"b{l}"] = dz.sum(axis=0)
        da = dz @ params[f"W{l}"].T
    return loss, grads, cache


class Adam:
    """Adam with L2 weight decay added to the gradient."""

    def __init__(self, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, tensors, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            p = tensors[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def init_head(d_in, n_out, rng):
    return {"W": _uniform_fan_in(rng, d_in, (d_in, n_out)), "b": _uniform_fan_in(rng, d_in, (n_out,))}


def train_base(X, Y, config: TrainConfig = None, dims=(512, 512, 512), seed=None) -> BackboneWeights:
    """Fit the backbone plus a throwaway linear head to (X, Y) by MSE and Adam.

    Returns frozen weights; the per-epoch training loss is kept in
    ``loss_history`` (entry 0 is the loss before any update).
    """
    config = config or TrainConfig()
    X = np.asarray(getattr(X, "values", X), dtype=np.float64)
    Y = np.asarray(getattr(Y, "values", Y), dtype=np.float64)
    if X.shape[0] == 0:
        raise ParameterError("empty training set")
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"{X.shape[0]} inputs vs {Y.shape[0]} labels")
    seed = config.seed if seed is None else seed
    weights = init_backbone(X.shape[1], *dims, seed=seed)
    rng = np.random.default_rng([seed, 1])
    head = init_head(weights.d_out, Y.shape[1], rng)
    tensors = dict(weights.params)
    tensors.update(head_W=head["W"], head_b=head["b"])
    opt = Adam(config.learning_rate, config.weight_decay)
    n = X.shape[0]
    history = [loss_and_grads(weights.params, head, X, Y)[0]]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads, cache = loss_and_grads(weights.params, head, X[idx], Y[idx])
            opt.step(tensors, grads)
            _update_running_stats(weights.params, cache, idx.size)
            total += loss * idx.size
        history.append(total / n)
        logger.debug("base epoch %d loss %.6f", epoch + 1, history[-1])
    weights.loss_history = history
    return weights.freeze()
