"""Multilayer perceptron producing the two embeddings used by the heads.

The target head reads ``g = g_theta(x)``; the client head reads
``h = h_tau(g_theta(x))`` (or ``h_tau(x)`` when nothing is shared).  Forward
and backward passes are written out by hand so gradients can be checked
against finite differences in 64-bit arithmetic.

Layer conventions:

* every g-path layer is affine followed by the activation;
* h-branch hidden layers are affine + activation, the last h layer is a plain
  affine projection;
* ``sharing`` picks where the h-branch forks off the g-path: ``none`` (raw
  input), ``shallow`` (after g layer 1), ``mid`` (after g layer
  ``ceil(depth / 2)``) or ``deep`` (after the last g layer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericInputError

SHARING_MODES = ("none", "shallow", "mid", "deep")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    g_layers: tuple[int, ...] = (16,)
    h_layers: tuple[int, ...] = (8,)
    sharing: str = "deep"
    activation: str = "relu"
    fixed_embedding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "g_layers", tuple(int(w) for w in self.g_layers))
        object.__setattr__(self, "h_layers", tuple(int(w) for w in self.h_layers))
        if int(self.input_dim) < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.g_layers or not self.h_layers:
            raise ConfigError("g_layers and h_layers need at least one layer each")
        if min(self.g_layers) < 1 or min(self.h_layers) < 1:
            raise ConfigError("all layer widths must be >= 1")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"sharing must be one of {SHARING_MODES}, got {self.sharing!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def d_g(self) -> int:
        return self.g_layers[-1]

    @property
    def d_h(self) -> int:
        return self.h_layers[-1]

    @property
    def fork(self) -> int:
        """Number of g layers feeding the h-branch (0 means raw input)."""
        depth = len(self.g_layers)
        return {"none": 0, "shallow": 1, "mid": math.ceil(depth / 2), "deep": depth}[self.sharing]

    def g_dims(self) -> list[int]:
        return [self.input_dim, *self.g_layers]

    def h_dims(self) -> list[int]:
        fork_dim = self.input_dim if self.fork == 0 else self.g_layers[self.fork - 1]
        return [fork_dim, *self.h_layers]


@dataclass
class EmbeddingParams:
    """Weights ``(W, b)`` per layer; ``W`` has shape (out, in)."""

    theta: list[tuple[np.ndarray, np.ndarray]]
    tau: list[tuple[np.ndarray, np.ndarray]]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in [*self.theta, *self.tau]:
            out.extend((W, b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def unflatten(cls, cfg: NetConfig, vec: np.ndarray) -> "EmbeddingParams":
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            if pos + size > vec.size:
                raise ContractError("parameter vector too short for this NetConfig")
            chunk = vec[pos:pos + size].reshape(shape).copy()
            pos += size
            return chunk

        theta = [(take((o, i)), take((o,))) for i, o in zip(cfg.g_dims()[:-1], cfg.g_dims()[1:])]
        tau = [(take((o, i)), take((o,))) for i, o in zip(cfg.h_dims()[:-1], cfg.h_dims()[1:])]
        if pos != vec.size:
            raise ContractError("parameter vector too long for this NetConfig")
        return cls(theta, tau)

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layers in (("theta", self.theta), ("tau", self.tau)):
            for k, (W, b) in enumerate(layers):
                out[f"{prefix}.{k}.W"] = W
                out[f"{prefix}.{k}.b"] = b
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], cfg: NetConfig) -> "EmbeddingParams":
        theta = [(named[f"theta.{k}.W"], named[f"theta.{k}.b"]) for k in range(len(cfg.g_layers))]
        tau = [(named[f"tau.{k}.W"], named[f"tau.{k}.b"]) for k in range(len(cfg.h_layers))]
        return cls(theta, tau)

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams([(W.copy(), b.copy()) for W, b in self.theta],
                               [(W.copy(), b.copy()) for W, b in self.tau])

    def zeros_like(self) -> "EmbeddingParams":
        return EmbeddingParams([(np.zeros_like(W), np.zeros_like(b)) for W, b in self.theta],
                               [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.tau])


def init_params(cfg: NetConfig, seed: int) -> EmbeddingParams:
    """Uniform fan-in/fan-out (Glorot) weights, zero biases."""
    rng = np.random.default_rng(seed)

    def layers(dims):
        out = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            out.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
        return out

    return EmbeddingParams(layers(cfg.g_dims()), layers(cfg.h_dims()))


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - a * a


@dataclass
class ForwardCache:
    cfg: NetConfig
    params: EmbeddingParams
    x: np.ndarray
    g_pre: list[np.ndarray] = field(default_factory=list)
    g_out: list[np.ndarray] = field(default_factory=list)
    h_in: np.ndarray | None = None
    h_pre: list[np.ndarray] = field(default_factory=list)
    h_out: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def forward(x, p: EmbeddingParams, cfg: NetConfig):
    """Return ``(g, h, cache)`` for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ContractError(f"expected input with {cfg.input_dim} features, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericInputError("forward received non-finite input")
    cache = ForwardCache(cfg, p, X, single=single)

    a = X
    for W, b in p.theta:
        z = a @ W.T + b
        a = _act(z, cfg.activation)
        cache.g_pre.append(z)
        cache.g_out.append(a)
    g = a

    a = X if cfg.fork == 0 else cache.g_out[cfg.fork - 1]
    cache.h_in = a
    last = len(p.tau) - 1
    for k, (W, b) in enumerate(p.tau):
        z = a @ W.T + b
        a = z if k == last else _act(z, cfg.activation)
        cache.h_pre.append(z)
        cache.h_out.append(a)
    h = a
    if single:
        return g[0], h[0], cache
    return g, h, cache


def backward(cache: ForwardCache, grad_g, grad_h) -> EmbeddingParams:
    """Gradient of ``sum(grad_g * g) + sum(grad_h * h)`` over all samples."""
    cfg, p = cache.cfg, cache.params
    n = cache.x.shape[0]
    grad_g = np.asarray(grad_g, dtype=np.float64)
    grad_h = np.asarray(grad_h, dtype=np.float64)
    if cache.single:
        grad_g, grad_h = grad_g[None, :], grad_h[None, :]
    if grad_g.shape != (n, cfg.d_g) or grad_h.shape != (n, cfg.d_h):
        raise ContractError(
            f"gradient shapes {grad_g.shape}, {grad_h.shape} do not match cache "
            f"({n}, {cfg.d_g}) / ({n}, {cfg.d_h})")
    if len(cache.g_pre) != len(p.theta) or len(cache.h_pre) != len(p.tau):
        raise ContractError("cache does not come from a forward pass with these parameters")
    grads = p.zeros_like()
    if cfg.fixed_embedding:
        return grads

    # h-branch
    da = grad_h
    last = len(p.tau) - 1
    for k in range(last, -1, -1):
        W, _ = p.tau[k]
        dz = da if k == last else da * _act_grad(cache.h_pre[k], cache.h_out[k], cfg.activation)
        a_in = cache.h_in if k == 0 else cache.h_out[k - 1]
        grads.tau[k] = (dz.T @ a_in, dz.sum(axis=0))
        da = dz @ W
    fork_grad = da

    # g-path
    da = grad_g
    for k in range(len(p.theta) - 1, -1, -1):
        if cfg.fork == k + 1:
            da = da + fork_grad
        W, _ = p.theta[k]
        dz = da * _act_grad(cache.g_pre[k], cache.g_out[k], cfg.activation)
        a_in = cache.x if k == 0 else cache.g_out[k - 1]
        grads.theta[k] = (dz.T @ a_in, dz.sum(axis=0))
        da = dz @ W
    return grads
