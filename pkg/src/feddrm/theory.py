"""Fixed-embedding benchmark: optimisation error, statistical error and the lam trade-off.

With the embedding frozen, the penalised reweighted loss

    l(zeta) = (1 - lam) * CE(client | h) + lam * CE(class | g) + (wd / 2) ||zeta||^2

is a smooth, strongly convex function of ``zeta = (gamma, xi, alpha, beta)``.
Parameters are packed per softmax row as ``[intercept, weights]``, client head
first, so the Hessian is exactly ``metrics.fisher_info(..., lam=lam).full``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import federation, loss, metrics, net
from .errors import SolverError
from .partition import ClientDataset, TheorySpec, synth_theory_generate

GRAD_TOL = 1e-9
MAX_GD_ITER = 1_000_000


@dataclass
class Problem:
    """Frozen embeddings of a pooled sample with client and class labels."""

    g: np.ndarray
    h: np.ndarray
    y: np.ndarray
    client: np.ndarray
    m: int
    K: int

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def n_client(self) -> int:
        return self.m * (self.h.shape[1] + 1)

    @property
    def dim(self) -> int:
        return self.n_client + self.K * (self.g.shape[1] + 1)

    @classmethod
    def from_spec(cls, spec: TheorySpec, seed: int | None = None):
        X, y, client, _ = synth_theory_generate(spec, seed)
        g, h, _ = net.forward(X, spec.embedding, spec.net_cfg)
        return cls(g, h, y, client, spec.m, spec.K)

    def split(self, zeta):
        gamma, xi = metrics.unpack(zeta[:self.n_client], self.m)
        alpha, beta = metrics.unpack(zeta[self.n_client:], self.K)
        return gamma, xi, alpha, beta

    def heads(self, zeta) -> loss.HeadBank:
        gamma, xi, alpha, beta = self.split(zeta)
        return loss.HeadBank([alpha], [beta], gamma, xi)


def true_zeta(spec: TheorySpec) -> np.ndarray:
    return np.concatenate([metrics.pack(spec.gamma, spec.xi), metrics.pack(spec.alpha, spec.beta)])


def zeta_from_params(params: dict) -> np.ndarray:
    return np.concatenate([metrics.pack(params["client.gamma"], params["client.xi"]),
                           metrics.pack(params["target.0.alpha"], params["target.0.beta"])])


def objective(prob: Problem, zeta, lam: float, wd: float):
    """``(value, gradient)`` of the penalised loss in packed coordinates."""
    lb, hg = loss.head_only_loss(prob.g, prob.h, prob.y, prob.client, prob.heads(zeta), lam, wd)
    grad = np.concatenate([metrics.pack(hg.gamma, hg.xi), metrics.pack(hg.alpha[0], hg.beta[0])])
    return lb.total, grad


def hessian(prob: Problem, zeta, lam: float, wd: float) -> np.ndarray:
    return metrics.fisher_info(prob.g, prob.h, prob.heads(zeta), wd, lam).full


def smoothness_bound(prob: Problem, lam: float, wd: float) -> float:
    """Global bound on the Hessian: softmax curvature is at most 1/2 times the second moment."""
    def top(z):
        zt = np.hstack([np.ones((z.shape[0], 1)), z])
        return float(np.linalg.eigvalsh(zt.T @ zt / z.shape[0])[-1])
    return 0.5 * max((1.0 - lam) * top(prob.h), lam * top(prob.g)) + wd


def centralized_mle(prob: Problem, lam: float, wd: float, *, method: str = "gd",
                    zeta0=None, tol: float = GRAD_TOL, max_iter: int = MAX_GD_ITER) -> np.ndarray:
    """Minimiser of the penalised loss on the pooled sample.

    ``gd`` runs gradient descent with step ``1 / L`` from :func:`smoothness_bound`;
    ``newton`` takes damped Newton steps.  Both stop at gradient norm ``tol``.
    """
    zeta = np.zeros(prob.dim) if zeta0 is None else np.array(zeta0, dtype=np.float64)
    if method == "gd":
        step = 1.0 / smoothness_bound(prob, lam, wd)
        for _ in range(max_iter):
            _, grad = objective(prob, zeta, lam, wd)
            if np.linalg.norm(grad) < tol:
                return zeta
            zeta = zeta - step * grad
        raise SolverError(f"gradient descent hit {max_iter} iterations", float(np.linalg.norm(grad)))
    if method == "newton":
        for _ in range(200):
            f0, grad = objective(prob, zeta, lam, wd)
            if np.linalg.norm(grad) < tol:
                return zeta
            d = np.linalg.lstsq(hessian(prob, zeta, lam, wd), grad, rcond=None)[0]
            t = 1.0
            while t > 1e-10 and objective(prob, zeta - t * d, lam, wd)[0] > f0:
                t *= 0.5
            zeta = zeta - t * d
        raise SolverError("Newton solve did not converge", float(np.linalg.norm(grad)))
    raise ValueError(f"unknown method {method!r}")


def _shift_projector(prob: Problem) -> np.ndarray:
    """Projector removing the common shift of each softmax head (directions the loss ignores)."""
    def block(rows, q):
        c = np.eye(rows) - np.full((rows, rows), 1.0 / rows)
        return np.kron(c, np.eye(q))
    nc = prob.n_client
    P = np.zeros((prob.dim, prob.dim))
    P[:nc, :nc] = block(prob.m, prob.h.shape[1] + 1)
    P[nc:, nc:] = block(prob.K, prob.g.shape[1] + 1)
    return P


def power_iteration(matvec, dim: int, iters: int = 2000, seed: int = 0, tol: float = 1e-12) -> float:
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    val = 0.0
    for _ in range(iters):
        w = matvec(v)
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        if abs(new - val) <= tol * max(1.0, abs(new)):
            return new
        val = new
    return val


def curvature(prob: Problem, zeta, lam: float, wd: float) -> tuple[float, float]:
    """``(mu_hat, L_hat)`` by power iteration, restricted to shift-free directions.

    Gradient steps started at zero never leave that subspace, so its extreme
    eigenvalues are the ones that govern convergence.
    """
    H = hessian(prob, zeta, lam, wd)
    P = _shift_projector(prob)
    Hp = P @ H @ P
    L = power_iteration(lambda v: Hp @ v, prob.dim)
    top = power_iteration(lambda v: P @ (L * v - Hp @ v), prob.dim, seed=1)
    return L - top, L


# ---------------------------------------------------------------------------
# federated runs on the benchmark

def client_datasets(prob: Problem, X=None, zero_heterogeneity: bool = False) -> list[ClientDataset]:
    """Split the pooled sample by client label, or give everyone a full copy.

    Datasets carry raw features only through ``X``; for fixed embeddings the
    federation recomputes ``(g, h)`` once per client.
    """
    if zero_heterogeneity:
        return [ClientDataset(i, X, prob.y, client_labels=prob.client) for i in range(prob.m)]
    return [ClientDataset(i, X[prob.client == i], prob.y[prob.client == i]) for i in range(prob.m)]


@dataclass
class RunTrace:
    E: int
    lr: float
    distances: np.ndarray          # ||zeta_t - zeta_hat||^2 after each round
    truth_distances: np.ndarray    # ||zeta_t - zeta_true||^2
    losses: np.ndarray             # penalised global loss after each round
    plateau: float
    contraction: float             # fitted per-round factor of ||zeta_t - zeta_T||^2
    final: np.ndarray              # zeta after the last round


def federated_trace(spec: TheorySpec, X, prob: Problem, zeta_hat, *, lam: float, wd: float,
                    lr: float, E: int, T: int, zero_heterogeneity: bool = False,
                    zeta_true=None) -> RunTrace:
    datasets = client_datasets(prob, X, zero_heterogeneity)
    cfg = federation.FederationConfig(m=spec.m, T=T, E=E, lr=lr, lam=lam, wd=wd,
                                      shared_target=True, seed=spec.seed)
    dist, tdist, losses, path = [], [], [], []

    def record(state, row):
        z = zeta_from_params(state.params)
        path.append(z)
        dist.append(float(np.sum((z - zeta_hat) ** 2)))
        tdist.append(float(np.sum((z - zeta_true) ** 2)) if zeta_true is not None else np.nan)
        losses.append(objective(prob, z, lam, wd)[0])

    state = federation.init_state(cfg, spec.net_cfg, spec.K, embedding=spec.embedding)
    federation.run(cfg, spec.net_cfg, datasets, K=spec.K, state=state, callback=record, workers=1)
    dist = np.array(dist)
    final = zeta_from_params(state.params)
    to_limit = np.sum((np.array(path[:-1]) - final) ** 2, axis=1)
    return RunTrace(E, lr, dist, np.array(tdist), np.array(losses),
                    plateau_level(dist), contraction_factor(to_limit), final)


def plateau_level(dist) -> float:
    """Mean of the last 20% of rounds."""
    dist = np.asarray(dist)
    return float(dist[-max(1, len(dist) // 5):].mean())


def contraction_factor(dist, floor: float = 1e-20) -> float:
    """Per-round factor from a least-squares fit of log distance to the limit point.

    Only rounds before the distance first drops below ``floor`` are used.
    """
    dist = np.asarray(dist)
    below = np.flatnonzero(dist <= floor)
    idx = np.arange(below[0] if below.size else dist.size)
    if idx.size < 3:
        return float("nan")
    slope = np.polyfit(idx, np.log(dist[idx]), 1)[0]
    return float(np.exp(slope))


@dataclass
class TheoryReport:
    mu_hat: float
    L_hat: float
    traces: list[RunTrace] = field(default_factory=list)
    stat_N: list[int] = field(default_factory=list)
    stat_err: list[float] = field(default_factory=list)
    stat_slope: float = float("nan")
    lam_rows: list[dict] = field(default_factory=list)


def convergence_experiment(spec: TheorySpec, *, lam: float = 0.8, wd: float = 1e-3,
                           E_grid=(1, 2, 4, 8), lr: float | None = None, T: int = 400,
                           zero_heterogeneity: bool = False) -> TheoryReport:
    """Federated full-batch runs per ``E`` at a fixed step size, measured against the pooled minimiser."""
    X, y, client, _ = synth_theory_generate(spec)
    g, h, _ = net.forward(X, spec.embedding, spec.net_cfg)
    prob = Problem(g, h, y, client, spec.m, spec.K)
    zeta_hat = centralized_mle(prob, lam, wd, method="newton", tol=1e-12)
    mu, L = curvature(prob, zeta_hat, lam, wd)
    lr = 1.0 / smoothness_bound(prob, lam, wd) if lr is None else lr
    report = TheoryReport(mu, L)
    for E in E_grid:
        report.traces.append(federated_trace(spec, X, prob, zeta_hat, lam=lam, wd=wd, lr=lr, E=E,
                                             T=T, zero_heterogeneity=zero_heterogeneity,
                                             zeta_true=true_zeta(spec)))
    return report


def statistical_errors(spec: TheorySpec, N: int, seeds, *, lam: float, wd: float):
    """Per-seed ``(total, client-block)`` squared errors of the pooled minimiser."""
    truth = true_zeta(spec)
    nc = spec.m * (spec.xi.shape[1] + 1)
    tot, cli = [], []
    for s in seeds:
        sp = TheorySpec(**{**spec.__dict__, "N": N})
        prob = Problem.from_spec(sp, seed=s)
        z = centralized_mle(prob, lam, wd, method="newton", tol=1e-10)
        tot.append(float(np.sum((z - truth) ** 2)))
        cli.append(float(np.sum((z[:nc] - truth[:nc]) ** 2)))
    return np.array(tot), np.array(cli)


def statistical_experiment(spec: TheorySpec, N_grid=(500, 1000, 2000, 4000, 8000), *,
                           lam: float = 0.8, wd: float = 1e-5, n_seeds: int = 20):
    """Slope of log mean squared error against log N; returns ``(slope, errors)``."""
    means = []
    for N in N_grid:
        tot, _ = statistical_errors(spec, N, range(1000, 1000 + n_seeds), lam=lam, wd=wd)
        means.append(float(tot.mean()))
    slope = np.polyfit(np.log(N_grid), np.log(means), 1)[0]
    return float(slope), means


def lambda_tradeoff(spec: TheorySpec, lam_grid, *, seeds=range(10), wd: float = 1e-3,
                    lr: float = 0.5, E: int = 2, T: int = 30, n_test: int = 4000) -> list[dict]:
    """Federated training per lam and seed; client/class accuracy on a fresh pooled test draw.

    Rows hold mean and standard deviation over seeds plus the mean plateau.
    """
    rows = []
    for lam in lam_grid:
        cacc, tacc, plat = [], [], []
        for s in seeds:
            sp = TheorySpec(**{**spec.__dict__, "seed": int(s)})
            X, y, client, _ = synth_theory_generate(sp)
            g, h, _ = net.forward(X, sp.embedding, sp.net_cfg)
            prob = Problem(g, h, y, client, sp.m, sp.K)
            zeta_hat = centralized_mle(prob, lam, wd, method="newton")
            tr = federated_trace(sp, X, prob, zeta_hat, lam=lam, wd=wd, lr=lr, E=E, T=T)
            test = Problem.from_spec(TheorySpec(**{**sp.__dict__, "N": n_test}), seed=10_000 + int(s))
            gamma, xi, alpha, beta = prob.split(tr.final)
            cacc.append(float(np.mean(np.argmax(test.h @ xi.T + gamma, axis=1) == test.client)))
            tacc.append(float(np.mean(np.argmax(test.g @ beta.T + alpha, axis=1) == test.y)))
            plat.append(tr.plateau)
        rows.append({"lam": lam, "client_acc": float(np.mean(cacc)), "client_acc_std": float(np.std(cacc)),
                     "class_acc": float(np.mean(tacc)), "class_acc_std": float(np.std(tacc)),
                     "plateau": float(np.mean(plat))})
    return rows



def drift_benchmark(m: int = 3, K: int = 10, input_dim: int = 10, d: int = 16, n: int = 3000,
                    alpha_conc: float = 0.3, seed: int = 0):
    """Label-skewed clients over a frozen random embedding.

    Class ``k`` has features N(mu_k, I) with random means; samples are split
    across clients by a Dirichlet partition.  Returns ``(datasets, net_cfg, embedding)``.
    """
    from .partition import dirichlet_partition

    rng = np.random.default_rng(seed)
    mu = 2.0 * rng.standard_normal((K, input_dim))
    y = rng.integers(K, size=n)
    X = mu[y] + rng.standard_normal((n, input_dim))
    assign = dirichlet_partition(y, m, alpha_conc, seed)
    cfg = net.NetConfig(input_dim, g_layers=(d,), h_layers=(d,), sharing="deep",
                        activation="tanh", fixed_embedding=True)
    emb = net.init_params(cfg, seed)
    datasets = [ClientDataset(i, X[assign == i], y[assign == i]) for i in range(m)]
    return datasets, cfg, emb


def drift_experiment(rounds: int = 50, *, lam: float = 0.5, lr: float = 0.5, E: int = 5,
                     seed: int = 0, **bench) -> list[metrics.DriftReport]:
    """Drift at the initial point and after each FedAvg round (shared target head)."""
    datasets, cfg, emb = drift_benchmark(seed=seed, **bench)
    m = len(datasets)
    K = bench.get("K", 10)
    fcfg = federation.FederationConfig(m=m, T=rounds, E=E, lr=lr, lam=lam,
                                       shared_target=True, seed=seed)
    state = federation.init_state(fcfg, cfg, K, embedding=emb)
    reports = [metrics.drift_report(datasets, emb, state.heads, cfg, lam)]

    def record(st, row):
        rep = metrics.drift_report(datasets, emb, st.heads, cfg, lam)
        row["G_client2"], row["G_class2"] = rep.G_client2, rep.G_class2
        reports.append(rep)

    federation.run(fcfg, cfg, datasets, K=K, state=state, callback=record, workers=1)
    return reports
