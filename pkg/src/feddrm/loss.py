"""Softmax heads and the reweighted two-task loss.

Per sample, the loss is ``(1 - lam) * CE(client id | h) + lam * CE(label | g)``;
batch values are means and ``(wd / 2) * ||params||^2`` is added on top.
Gradients are exact and flow back into the embedding through
:func:`feddrm.net.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .errors import ContractError, DataError, NumericInputError


@dataclass
class HeadBank:
    """Per-client target heads ``(alpha_i, beta_i)`` and one shared client head.

    With ``len(alpha) == 1`` a single target head is shared by every client.
    """

    alpha: list[np.ndarray]  # each (K,)
    beta: list[np.ndarray]   # each (K, d_g)
    gamma: np.ndarray        # (m,)
    xi: np.ndarray           # (m, d_h)

    def __post_init__(self):
        if len(self.alpha) != len(self.beta) or not self.alpha:
            raise ContractError("alpha and beta lists must be non-empty and of equal length")
        if len(self.alpha) not in (1, self.m):
            raise ContractError(f"expected 1 or {self.m} target heads, got {len(self.alpha)}")

    @property
    def m(self) -> int:
        return self.gamma.shape[0]

    @property
    def shared_target(self) -> bool:
        return len(self.alpha) == 1

    def target_head(self, client: int) -> tuple[np.ndarray, np.ndarray]:
        k = 0 if self.shared_target else client
        return self.alpha[k], self.beta[k]

    def named(self) -> dict[str, np.ndarray]:
        out = {"client.gamma": self.gamma, "client.xi": self.xi}
        for i, (a, b) in enumerate(zip(self.alpha, self.beta)):
            out[f"target.{i}.alpha"] = a
            out[f"target.{i}.beta"] = b
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray]) -> "HeadBank":
        n_heads = sum(1 for k in named if k.startswith("target.") and k.endswith(".alpha"))
        return cls([named[f"target.{i}.alpha"] for i in range(n_heads)],
                   [named[f"target.{i}.beta"] for i in range(n_heads)],
                   named["client.gamma"], named["client.xi"])

    def copy(self) -> "HeadBank":
        return HeadBank([a.copy() for a in self.alpha], [b.copy() for b in self.beta],
                        self.gamma.copy(), self.xi.copy())

    def zeros_like(self) -> "HeadBank":
        return HeadBank([np.zeros_like(a) for a in self.alpha], [np.zeros_like(b) for b in self.beta],
                        np.zeros_like(self.gamma), np.zeros_like(self.xi))


def init_heads(m: int, K: int, d_g: int, d_h: int, shared_target: bool = False) -> HeadBank:
    n_heads = 1 if shared_target else m
    return HeadBank([np.zeros(K) for _ in range(n_heads)],
                    [np.zeros((K, d_g)) for _ in range(n_heads)],
                    np.zeros(m), np.zeros((m, d_h)))


@dataclass
class LossBreakdown:
    client_ce: float
    target_ce: float
    l2: float
    total: float


@dataclass
class ModelGrads:
    embedding: net.EmbeddingParams
    heads: HeadBank


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericInputError("non-finite input to a softmax head")


def target_probs(g, alpha, beta) -> np.ndarray:
    """Class probabilities ``softmax(alpha + beta @ g)``; accepts a vector or rows."""
    g = np.asarray(g, dtype=np.float64)
    _check_finite(g, alpha, beta)
    return softmax(g @ np.asarray(beta).T + alpha)


def client_probs(h, gamma, xi) -> np.ndarray:
    """Client-membership probabilities ``softmax(gamma + xi @ h)``."""
    h = np.asarray(h, dtype=np.float64)
    _check_finite(h, gamma, xi)
    return softmax(h @ np.asarray(xi).T + gamma)


def _as_ids(client_ids, n: int, m: int) -> np.ndarray:
    ids = np.broadcast_to(np.asarray(client_ids, dtype=np.int64), (n,))
    if ids.size and (ids.min() < 0 or ids.max() >= m):
        raise DataError(f"client id out of range [0, {m})")
    return ids


def _check_labels(y: np.ndarray, K: int):
    if y.size and (y.min() < 0 or y.max() >= K):
        raise DataError(f"label out of range [0, {K})")


def _ce_and_grad(logits: np.ndarray, labels: np.ndarray, n_total: int):
    """Summed CE / n_total and d(CE)/d(logits)."""
    logp = _log_softmax(logits)
    rows = np.arange(labels.shape[0])
    ce = -logp[rows, labels].sum() / n_total
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return ce, d / n_total


def head_loss(g, h, y, client_ids, heads: HeadBank, lam: float, *,
              use_client_head: bool = True):
    """Loss parts and gradients for fixed embeddings ``g`` (n, d_g), ``h`` (n, d_h).

    Returns ``(client_ce, target_ce, head_grads, grad_g, grad_h)``; the head
    gradients exclude weight decay and are already scaled by ``1 - lam`` / ``lam``.
    """
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = g.shape[0]
    if n == 0:
        raise DataError("empty batch")
    K = heads.alpha[0].shape[0]
    _check_labels(y, K)
    ids = _as_ids(client_ids, n, heads.m)
    grads = heads.zeros_like()

    # target head(s)
    grad_g = np.empty_like(g)
    target_ce = 0.0
    if heads.shared_target:
        groups = [(0, slice(None))]
    else:
        groups = [(int(c), ids == c) for c in np.unique(ids)]
    for k, sel in groups:
        a, b = heads.alpha[k], heads.beta[k]
        gs = g[sel]
        ce, d = _ce_and_grad(gs @ b.T + a, y[sel], n)
        target_ce += ce
        grads.alpha[k] = lam * d.sum(axis=0)
        grads.beta[k] = lam * (d.T @ gs)
        grad_g[sel] = lam * (d @ b)

    client_ce = 0.0
    grad_h = np.zeros_like(h)
    if use_client_head:
        client_ce, d = _ce_and_grad(h @ heads.xi.T + heads.gamma, ids, n)
        w = 1.0 - lam
        grads.gamma = w * d.sum(axis=0)
        grads.xi = w * (d.T @ h)
        grad_h = w * (d @ heads.xi)
    return float(client_ce), float(target_ce), grads, grad_g, grad_h


def _sq_norm(arrays) -> float:
    return float(sum(np.dot(a.ravel(), a.ravel()) for a in arrays))


def _add_decay(grads: list[np.ndarray], params: list[np.ndarray], wd: float) -> list[np.ndarray]:
    return [gr + wd * p for gr, p in zip(grads, params)]


def reweighted_loss(X, y, client_ids, emb: net.EmbeddingParams, heads: HeadBank,
                    cfg: net.NetConfig, lam: float, wd: float = 0.0):
    """Mean reweighted loss on a batch plus weight decay, with all gradients.

    ``client_ids`` is one id for the whole batch or one per row.  Weight decay
    covers every head parameter and, unless ``cfg.fixed_embedding``, the
    embedding weights.
    """
    if not 0.0 < lam <= 1.0:
        raise ContractError(f"lam must lie in (0, 1], got {lam}")
    if wd < 0:
        raise ContractError("weight decay must be non-negative")
    g, h, cache = net.forward(np.atleast_2d(X), emb, cfg)
    client_ce, target_ce, hg, grad_g, grad_h = head_loss(g, h, y, client_ids, heads, lam)
    eg = net.backward(cache, grad_g, grad_h)

    head_arrays = list(heads.named().values())
    emb_arrays = [] if cfg.fixed_embedding else emb.arrays()
    l2 = 0.5 * wd * _sq_norm(head_arrays + emb_arrays)
    total = (1.0 - lam) * client_ce + lam * target_ce + l2

    if wd:
        hg = HeadBank.from_named(dict(zip(
            heads.named().keys(), _add_decay(list(hg.named().values()), head_arrays, wd))))
        if not cfg.fixed_embedding:
            eg = net.EmbeddingParams.from_named(dict(zip(
                emb.named().keys(), _add_decay(list(eg.named().values()), emb.arrays(), wd))), cfg)
    return LossBreakdown(client_ce, target_ce, l2, total), ModelGrads(eg, hg)


def target_loss(X, y, emb: net.EmbeddingParams, heads: HeadBank, cfg: net.NetConfig,
                wd: float = 0.0):
    """Plain cross-entropy with a single shared target head (FedAvg reference path).

    The client head and the h-branch take no part; their gradients are zero
    and they are excluded from the weight-decay term.
    """
    if not heads.shared_target:
        raise ContractError("the reference path needs a single shared target head")
    g, h, cache = net.forward(np.atleast_2d(X), emb, cfg)
    y = np.asarray(y, dtype=np.int64)
    n = g.shape[0]
    if n == 0:
        raise DataError("empty batch")
    a, b = heads.alpha[0], heads.beta[0]
    _check_labels(y, a.shape[0])
    ce, d = _ce_and_grad(g @ b.T + a, y, n)
    hg = heads.zeros_like()
    hg.alpha[0] = d.sum(axis=0) + wd * a
    hg.beta[0] = d.T @ g + wd * b
    eg = net.backward(cache, d @ b, np.zeros_like(h))
    theta_arrays = [] if cfg.fixed_embedding else [arr for W, bb in emb.theta for arr in (W, bb)]
    l2 = 0.5 * wd * _sq_norm([a, b] + theta_arrays)
    if wd and not cfg.fixed_embedding:
        eg.theta = [(gW + wd * W, gb + wd * bb) for (gW, gb), (W, bb) in zip(eg.theta, emb.theta)]
    return LossBreakdown(0.0, float(ce), l2, float(ce) + l2), ModelGrads(eg, hg)


def client_head_grad_gamma(h, client_ids, gamma, xi, per_sample: bool = False) -> np.ndarray:
    """Gradient of the mean client cross-entropy with respect to the intercepts.

    Row j is ``p(h_j) - onehot(client_j)``; the mean over rows is returned
    unless ``per_sample``.  This is the loss gradient, i.e. the negative of the
    log-likelihood score ``1(i = k) - p_k``.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    ids = _as_ids(client_ids, h.shape[0], np.asarray(gamma).shape[0])
    rows = client_probs(h, gamma, xi)
    rows[np.arange(h.shape[0]), ids] -= 1.0
    return rows if per_sample else rows.mean(axis=0)


def client_head_grad_xi(h, client_ids, gamma, xi) -> np.ndarray:
    """Gradient of the mean client cross-entropy with respect to ``xi`` (m, d_h)."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    rows = client_head_grad_gamma(h, client_ids, gamma, xi, per_sample=True)
    return rows.T @ h / h.shape[0]


def head_only_loss(g, h, y, client_ids, heads: HeadBank, lam: float, wd: float = 0.0, *,
                   use_client_head: bool = True):
    """Loss and head gradients for precomputed (frozen) embeddings.

    Matches :func:`reweighted_loss` with ``fixed_embedding`` set.  With
    ``use_client_head=False`` only the target heads are scored and decayed,
    which is the reference path for ``lam = 1``.
    """
    client_ce, target_ce, hg, _, _ = head_loss(g, h, y, client_ids, heads, lam,
                                               use_client_head=use_client_head)
    names = [k for k in heads.named() if use_client_head or k.startswith("target.")]
    params = heads.named()
    l2 = 0.5 * wd * _sq_norm([params[k] for k in names])
    if use_client_head:
        total = (1.0 - lam) * client_ce + lam * target_ce + l2
    else:
        total = target_ce + l2
    if wd:
        gn = hg.named()
        for k in names:
            gn[k] = gn[k] + wd * params[k]
        hg = HeadBank.from_named(gn)
    return LossBreakdown(client_ce, target_ce, l2, total), hg
