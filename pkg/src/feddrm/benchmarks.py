"""End-to-end routing benchmark on well-separated Gaussian clients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import federation, metrics, net
from .partition import SynthSpec, separated_gaussian_spec, synth_drm_generate


def bayes_router(X, spec: SynthSpec) -> np.ndarray:
    """Closed-form posterior argmax: ``log n_i + gamma_i + xi_i . x``."""
    X = np.atleast_2d(X)
    score = X @ spec.xi.T + spec.gamma + np.log(np.asarray(spec.sizes, dtype=np.float64))
    return np.argmax(score, axis=1)


@dataclass
class RoutingResult:
    bayes_agreement: float
    system_acc: float
    oracle_system_acc: float
    majority_acc: float
    average_acc: float
    route_acc: float


def routing_experiment(seed: int = 0, n: int = 2000, n_test: int = 1000, *, T: int = 40, E: int = 5,
                       lr: float = 0.3, lam: float = 0.8, wd: float = 1e-4, batch_size: int = 128,
                       hidden: int = 16) -> RoutingResult:
    spec = separated_gaussian_spec(n=n, seed=seed)
    train, _ = synth_drm_generate(spec)
    test_spec = SynthSpec(spec.xi, spec.alpha, spec.beta, [n_test] * spec.m, seed + 7919)
    test, _ = synth_drm_generate(test_spec)
    p = spec.xi.shape[1]
    K = spec.alpha[0].shape[0]
    cfg = net.NetConfig(p, g_layers=(hidden,), h_layers=(hidden,), sharing="deep")
    fcfg = federation.FederationConfig(m=spec.m, T=T, E=E, lr=lr, lam=lam, wd=wd,
                                       batch_size=batch_size, seed=seed)
    state, _ = federation.run(fcfg, cfg, train, K=K, workers=1)
    emb, heads = state.embedding, state.heads
    X = np.vstack([d.X for d in test])
    y = np.concatenate([d.y for d in test])
    who = np.concatenate([np.full(d.n, d.client_id) for d in test])
    learned = metrics.route_clients(X, emb, heads, cfg)
    return RoutingResult(
        bayes_agreement=float(np.mean(learned == bayes_router(X, spec))),
        system_acc=metrics.system_accuracy(X, y, emb, heads, cfg),
        oracle_system_acc=metrics.system_accuracy(X, y, emb, heads, cfg, true_client=who),
        majority_acc=metrics.majority_vote_accuracy(X, y, emb, heads, cfg),
        average_acc=metrics.average_accuracy(test, [d.n for d in train], emb, heads, cfg),
        route_acc=float(np.mean(learned == who)),
    )
