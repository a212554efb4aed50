"""Routing and evaluation: system/average/majority-vote accuracy, gradient drift, Fisher information.

Ties are always broken toward the lowest index (``np.argmax`` semantics).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import loss, net
from .partition import ClientDataset


@dataclass
class RoutingDecision:
    index: int
    client: int
    probs: np.ndarray


def embed(X, emb: net.EmbeddingParams, cfg: net.NetConfig):
    g, h, _ = net.forward(np.atleast_2d(X), emb, cfg)
    return g, h


def route(X, emb, heads: loss.HeadBank, cfg: net.NetConfig) -> list[RoutingDecision]:
    """Send every query to the client with the highest client-head probability."""
    _, h = embed(X, emb, cfg)
    probs = loss.client_probs(h, heads.gamma, heads.xi)
    chosen = np.argmax(probs, axis=1)
    return [RoutingDecision(i, int(c), probs[i]) for i, c in enumerate(chosen)]


def route_clients(X, emb, heads, cfg) -> np.ndarray:
    _, h = embed(X, emb, cfg)
    return np.argmax(h @ heads.xi.T + heads.gamma, axis=1)


def predict_with(g, heads: loss.HeadBank, client: int) -> np.ndarray:
    a, b = heads.target_head(client)
    return np.argmax(g @ b.T + a, axis=1)


def system_accuracy(X, y, emb, heads, cfg, *, true_client=None) -> float:
    """Route, then predict with the chosen client's target head.

    Passing ``true_client`` replaces the learned router by the ground truth.
    """
    y = np.asarray(y)
    g, h = embed(X, emb, cfg)
    chosen = (np.argmax(h @ heads.xi.T + heads.gamma, axis=1)
              if true_client is None else np.asarray(true_client))
    pred = np.empty_like(y)
    for c in np.unique(chosen):
        sel = chosen == c
        pred[sel] = predict_with(g[sel], heads, int(c))
    return float(np.mean(pred == y))


def route_accuracy(X, true_client, emb, heads, cfg) -> float:
    return float(np.mean(route_clients(X, emb, heads, cfg) == np.asarray(true_client)))


def average_accuracy(tests: list[ClientDataset], train_sizes, emb, heads, cfg) -> float:
    """Own-test accuracy per client, averaged with training-set-size weights."""
    w = np.asarray(train_sizes, dtype=np.float64)
    accs = []
    for d in tests:
        g, _ = embed(d.X, emb, cfg)
        accs.append(float(np.mean(predict_with(g, heads, d.client_id) == d.y)) if d.n else 0.0)
    return float(np.dot(w, accs) / w.sum())


def majority_vote_accuracy(X, y, emb, heads, cfg) -> float:
    """Every client head votes on every query; the plurality label wins (lowest on ties)."""
    g, _ = embed(X, emb, cfg)
    K = heads.alpha[0].shape[0]
    votes = np.zeros((g.shape[0], K), dtype=np.int64)
    rows = np.arange(g.shape[0])
    for c in range(len(heads.alpha)):
        np.add.at(votes, (rows, predict_with(g, heads, c)), 1)
    return float(np.mean(np.argmax(votes, axis=1) == np.asarray(y)))


# ---------------------------------------------------------------------------
# gradient drift

@dataclass
class DriftReport:
    G_client2: float
    G_class2: float
    G2: float          # computed directly on the concatenated gradient
    lam: float

    @property
    def decomposed(self) -> float:
        return (1.0 - self.lam) ** 2 * self.G_client2 + self.lam ** 2 * self.G_class2


def _weighted_spread(grads: np.ndarray, w: np.ndarray) -> float:
    mean = w @ grads
    return float(w @ np.sum((grads - mean) ** 2, axis=1))


def client_gradients(datasets: list[ClientDataset], emb, heads, cfg):
    """Full-batch gradients per client of the mean client CE over (gamma, xi)
    and of the mean class CE over that client's target head (alpha, beta)."""
    gc, gt = [], []
    for d in datasets:
        g, h = embed(d.X, emb, cfg)
        _, _, hg, _, _ = loss.head_loss(g, h, d.y, d.ids, heads, 0.5)
        k = 0 if heads.shared_target else d.client_id
        # head_loss scales each block by its weight; undo the 1/2
        gc.append(2.0 * np.concatenate([hg.gamma, hg.xi.ravel()]))
        gt.append(2.0 * np.concatenate([hg.alpha[k], hg.beta[k].ravel()]))
    return np.array(gc), np.array(gt)


def drift_report(datasets: list[ClientDataset], emb, heads, cfg, lam: float) -> DriftReport:
    n = np.array([d.n for d in datasets], dtype=np.float64)
    w = n / n.sum()
    gc, gt = client_gradients(datasets, emb, heads, cfg)
    full = np.hstack([(1.0 - lam) * gc, lam * gt])
    return DriftReport(_weighted_spread(gc, w), _weighted_spread(gt, w), _weighted_spread(full, w), lam)


# ---------------------------------------------------------------------------
# Fisher information

def pack(intercept, weights) -> np.ndarray:
    """Row ``k`` of a softmax head laid out as ``[intercept_k, weights_k]``."""
    return np.column_stack([np.asarray(intercept), np.asarray(weights)]).ravel()


def unpack(vec, rows: int):
    mat = np.asarray(vec).reshape(rows, -1)
    return mat[:, 0].copy(), mat[:, 1:].copy()


def softmax_information(z, intercept, weights) -> np.ndarray:
    """Mean over rows of ``(diag(p) - p p^T) kron (z~ z~^T)`` with ``z~ = [1, z]``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    zt = np.hstack([np.ones((z.shape[0], 1)), z])
    p = loss.softmax(zt[:, 1:] @ np.asarray(weights).T + intercept)
    K, q = p.shape[1], zt.shape[1]
    # sum_s (diag p_s - p_s p_s^T)[k, l] * zt_s zt_s^T
    a = np.einsum("sk,sa,sb->kab", p, zt, zt)
    b = np.einsum("sk,sl,sa,sb->kalb", p, p, zt, zt)
    info = -b
    for k in range(K):
        info[k, :, k, :] += a[k]
    return info.reshape(K * q, K * q) / z.shape[0]


@dataclass
class FisherInfo:
    I_client: np.ndarray
    I_class: np.ndarray
    full: np.ndarray
    min_eig_client: float
    min_eig_class: float
    min_eig_full: float


def fisher_info(g, h, heads: loss.HeadBank, wd: float = 0.0, lam: float | None = None) -> FisherInfo:
    """Empirical information of both heads at the current parameters (shared target head).

    With ``lam`` the blocks are weighted ``(1 - lam)`` and ``lam`` in ``full``,
    which is then the Hessian of the penalised reweighted loss.
    """
    a, b = heads.target_head(0)
    Ic = softmax_information(h, heads.gamma, heads.xi)
    It = softmax_information(g, a, b)
    wc, wt = (1.0, 1.0) if lam is None else (1.0 - lam, lam)
    nc, nt = Ic.shape[0], It.shape[0]
    full = np.zeros((nc + nt, nc + nt))
    full[:nc, :nc] = wc * Ic
    full[nc:, nc:] = wt * It
    full += wd * np.eye(nc + nt)
    return FisherInfo(Ic, It, full, float(np.linalg.eigvalsh(Ic)[0]),
                      float(np.linalg.eigvalsh(It)[0]), float(np.linalg.eigvalsh(full)[0]))
