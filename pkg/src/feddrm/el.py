"""Empirical-likelihood machinery behind the dual loss.

All samples from all clients form the atoms of an unknown baseline measure.
Given tilts ``t[s, l] = exp(gamma_l + xi_l . h_s)`` the atom weights that
maximise ``sum(log p)`` subject to ``sum(p) = 1`` and ``sum(p * t[:, l]) = 1``
for every client ``l`` are

    p_s = 1 / (N * (1 + sum_l rho_l * (t[s, l] - 1)))

with multipliers ``rho`` solving ``sum_s u_s / (1 + rho . u_s) = 0`` where
``u_s = t[s] - 1``.  These routines are a verification oracle for small N, not
a training path.

Value conventions (all in nats, natural log):

* :func:`profile_logel_primal` is the profiled log-EL itself, including the
  ``-N log N`` hidden in the atom weights;
* :func:`profile_logel_dual` is the sum of the two log-softmax terms, i.e. the
  negated unscaled loss (``N`` times the mean cross-entropies, ``lam = 1/2``
  up to the factor 2, no weight decay).

At a maximiser over the intercepts the two differ by exactly
:func:`duality_constant` ``= -sum_i n_i log n_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError, SolverError

MAX_ITER = 500
RESIDUAL_TOL = 1e-10
MIN_DENOM = 1e-12


@dataclass
class TiltMatrix:
    t: np.ndarray        # (N, m), strictly positive
    client: np.ndarray   # (N,) client index of each atom
    counts: np.ndarray   # (m,) samples per client

    @classmethod
    def from_embeddings(cls, h: np.ndarray, client: np.ndarray, gamma, xi) -> "TiltMatrix":
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        client = np.asarray(client, dtype=np.int64)
        gamma = np.asarray(gamma, dtype=np.float64)
        t = np.exp(h @ np.asarray(xi, dtype=np.float64).T + gamma)
        counts = np.bincount(client, minlength=gamma.shape[0])
        return cls(t, client, counts)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.ndim != 2:
            raise DomainError("tilt matrix must be 2-D")
        if not np.all(np.isfinite(self.t)) or np.any(self.t <= 0):
            raise DomainError("tilts must be strictly positive and finite")
        if int(np.sum(self.counts)) != self.t.shape[0]:
            raise DomainError("client counts do not add up to the number of atoms")

    @property
    def N(self) -> int:
        return self.t.shape[0]

    @property
    def m(self) -> int:
        return self.t.shape[1]


@dataclass
class ELSolution:
    rho: np.ndarray
    p: np.ndarray
    primal: float
    degenerate: bool
    residual: float
    iterations: int


def _residual(u: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return (u / (1.0 + u @ rho)[:, None]).sum(axis=0)


def _objective(u, rho):
    d = 1.0 + u @ rho
    if np.any(d <= MIN_DENOM):
        return -np.inf
    return float(np.log(d).sum())


def _bisect_coordinate(u, rho, l):
    """Solve d/d rho_l of the concave objective = 0 along one coordinate."""
    base = 1.0 + u @ rho - u[:, l] * rho[l]
    ul = u[:, l]
    pos, neg = ul > 0, ul < 0
    # feasible interval for rho_l keeping every denominator above MIN_DENOM
    lo = np.max((MIN_DENOM - base[pos]) / ul[pos]) if pos.any() else -np.inf
    hi = np.min((MIN_DENOM - base[neg]) / ul[neg]) if neg.any() else np.inf
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        return rho[l]

    def f(r):
        return float((ul / (base + ul * r)).sum())

    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        if f(mid) > 0:
            a = mid
        else:
            b = mid
        if b - a <= 1e-16 * max(1.0, abs(mid)):
            break
    return 0.5 * (a + b)


def _check_feasible(u, rho, N, rn):
    # Infeasible systems drive rho to infinity where the residual also vanishes;
    # only a genuine root gives weights summing to one.
    total = float(np.sum(1.0 / (N * (1.0 + u @ rho))))
    if abs(total - 1.0) > 1e-8:
        raise SolverError("EL constraints are infeasible for these tilts "
                          f"(weights sum to {total:.6g})", rn)


def solve_multipliers(tm: TiltMatrix, rho0=None) -> tuple[np.ndarray, bool, float, int]:
    """Lagrange multipliers for the EL constraint system.

    Damped Newton ascent on ``sum(log(1 + rho . u))`` with a cyclic
    coordinate-bisection fallback.  Returns ``(rho, degenerate, residual, iters)``.
    """
    u = tm.t - 1.0
    share = tm.counts / tm.N
    if np.max(np.abs(u)) < 1e-14:
        return share.astype(np.float64), True, 0.0, 0

    rho = share.astype(np.float64) if rho0 is None else np.asarray(rho0, dtype=np.float64).copy()
    if _objective(u, rho) == -np.inf:
        rho = np.zeros(tm.m)
    res = _residual(u, rho)
    it = 0
    while it < MAX_ITER:
        rn = np.max(np.abs(res))
        if rn < RESIDUAL_TOL:
            _check_feasible(u, rho, tm.N, rn)
            return rho, False, float(rn), it
        it += 1
        d = 1.0 + u @ rho
        w = u / d[:, None]
        H = w.T @ w  # negative Hessian
        step = np.linalg.lstsq(H, res, rcond=None)[0]
        f0 = _objective(u, rho)
        t = 1.0
        accepted = False
        while t > 1e-12:
            cand = rho + t * step
            if _objective(u, cand) >= f0 - 1e-14 * abs(f0):
                cres = _residual(u, cand)
                if np.max(np.abs(cres)) < rn or t == 1.0:
                    accepted = True
                    break
            t *= 0.5
        if accepted:
            rho, res = cand, cres
        else:
            for l in range(tm.m):
                rho[l] = _bisect_coordinate(u, rho, l)
            res = _residual(u, rho)
        if np.max(np.abs(rho)) > 1e10:
            raise SolverError("multipliers diverged; the constraint system looks infeasible",
                              float(np.max(np.abs(res))))
    rn = float(np.max(np.abs(res)))
    if rn < RESIDUAL_TOL:
        _check_feasible(u, rho, tm.N, rn)
        return rho, False, rn, it
    raise SolverError(f"multiplier solve did not converge in {MAX_ITER} iterations "
                      f"(residual {rn:.3e})", rn)


def atom_weights(tm: TiltMatrix, rho) -> np.ndarray:
    d = 1.0 + (tm.t - 1.0) @ np.asarray(rho, dtype=np.float64)
    if np.any(d <= 0):
        raise DomainError("non-positive denominator in the atom weights")
    return 1.0 / (tm.N * d)


def solve(tm: TiltMatrix) -> ELSolution:
    rho, degenerate, res, iters = solve_multipliers(tm)
    p = atom_weights(tm, rho)
    value = float(np.sum(np.log(tm.t[np.arange(tm.N), tm.client])) + np.sum(np.log(p)))
    return ELSolution(rho, p, value, degenerate, res, iters)


def constraint_residuals(tm: TiltMatrix, p) -> tuple[float, float]:
    """``(|sum p - 1|, max_l |sum p t_l - 1|)``."""
    p = np.asarray(p)
    return abs(float(p.sum()) - 1.0), float(np.max(np.abs(p @ tm.t - 1.0)))


def target_loglik(g, y, alpha, beta, client=None) -> float:
    """Summed log-probability of the labels; per-client heads when lists are given."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if isinstance(alpha, (list, tuple)):
        heads = [(np.asarray(a), np.asarray(b)) for a, b in zip(alpha, beta)]
        client = np.asarray(client, dtype=np.int64)
        total = 0.0
        for i, (a, b) in enumerate(heads):
            sel = client == i
            if sel.any():
                total += target_loglik(g[sel], y[sel], a, b)
        return total
    logits = g @ np.asarray(beta).T + alpha
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(logp[np.arange(len(y)), y].sum())


def profile_logel_primal(h, client, gamma_dag, xi, target_ll: float = 0.0) -> ELSolution:
    """Profile log-EL at ``(gamma_dag, xi)``; ``.primal`` carries the value.

    ``target_ll`` is the (already evaluated) target-class log-likelihood.
    Raises :class:`SolverError` when the constraints are infeasible.
    """
    tm = TiltMatrix.from_embeddings(h, client, gamma_dag, xi)
    sol = solve(tm)
    sol.primal += target_ll
    return sol


def profile_logel_primal_grad(h, client, tm: TiltMatrix, sol: ELSolution):
    """Gradient of the primal value in ``(gamma_dag, xi)`` (envelope theorem).

    ``d/d gamma_l = n_l - N rho_l sum_s p_s t_sl`` and
    ``d/d xi_l = sum_{s in l} h_s - N rho_l sum_s p_s t_sl h_s``.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    client = np.asarray(client, dtype=np.int64)
    m = tm.m
    wt = sol.p[:, None] * tm.t  # (N, m)
    dgamma = tm.counts - tm.N * sol.rho * wt.sum(axis=0)
    own = np.zeros((m, h.shape[1]))
    np.add.at(own, client, h)
    dxi = own - tm.N * sol.rho[:, None] * (wt.T @ h)
    return dgamma, dxi


def profile_logel_dual(h, client, gamma_ddag, xi, target_ll: float = 0.0) -> float:
    """Sum over atoms of ``log softmax(gamma_ddag + xi h)[own client]`` plus ``target_ll``."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    client = np.asarray(client, dtype=np.int64)
    logits = h @ np.asarray(xi).T + np.asarray(gamma_ddag)
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(logp[np.arange(h.shape[0]), client].sum()) + target_ll


def duality_constant(counts) -> float:
    """``primal - dual`` at an intercept maximiser: ``-sum_i n_i log n_i``."""
    n = np.asarray(counts, dtype=np.float64)
    n = n[n > 0]
    return float(-np.sum(n * np.log(n)))


def dual_intercepts(gamma_dag, counts) -> np.ndarray:
    """Map primal intercepts to dual ones: ``gamma_ddag_i = gamma_dag_i + log(n_i / n_1)``."""
    n = np.asarray(counts, dtype=np.float64)
    return np.asarray(gamma_dag, dtype=np.float64) + np.log(n / n[0])


def tilt_basis_check(distribution: str, params1, params2) -> np.ndarray:
    """Coefficients of ``log f1(x) / f2(x)`` on the family's tilt basis.

    ``normal``: params are ``(mu, sigma)``, basis ``(1, x, x^2)``.
    ``gamma``: params are ``(shape, rate)``, basis ``(1, x, log x)``.
    """
    if distribution == "normal":
        (mu1, s1), (mu2, s2) = params1, params2
        if s1 <= 0 or s2 <= 0:
            raise DomainError("normal scale must be positive")
        return np.array([
            np.log(s2 / s1) - (mu1 ** 2 / s1 ** 2 - mu2 ** 2 / s2 ** 2) / 2.0,
            mu1 / s1 ** 2 - mu2 / s2 ** 2,
            (s2 ** -2 - s1 ** -2) / 2.0,
        ])
    if distribution == "gamma":
        (a1, b1), (a2, b2) = params1, params2
        if min(a1, b1, a2, b2) <= 0:
            raise DomainError("gamma shape and rate must be positive")
        return np.array([
            gammaln(a2) - gammaln(a1) + a1 * np.log(b1) - a2 * np.log(b2),
            b2 - b1,
            a1 - a2,
        ])
    raise DomainError(f"unknown distribution {distribution!r}")


@dataclass
class DualityCheck:
    """Outcome of maximising the primal and the dual separately on one instance."""

    counts: np.ndarray
    gamma_dag: np.ndarray
    xi_primal: np.ndarray
    xi_dual: np.ndarray
    rho: np.ndarray
    primal: float
    dual: float
    degenerate: bool

    @property
    def gap(self) -> float:
        """``primal - dual`` at the primal maximiser."""
        return self.primal - self.dual

    @property
    def rho_error(self) -> float:
        return float(np.max(np.abs(self.rho - self.counts / self.counts.sum())))

    @property
    def xi_error(self) -> float:
        return float(np.max(np.abs(self.xi_primal - self.xi_dual)))


def maximize_primal(h, client, m: int, ridge: float = 0.5, seed: int = 0, restarts: int = 6,
                    starts: int = 10):
    """Maximise ``primal - ridge/2 ||xi||^2`` over ``(gamma_dag, xi)`` with BFGS.

    The ridge pins the common shift of ``xi`` and guarantees a maximiser exists
    when the clients are separable.  Infeasible points are reported to the
    optimiser as a huge finite value so its line search backs off.  BFGS can
    stall at its very first step, so up to ``starts`` random starting points
    are tried.  Returns ``(gamma_dag, xi)``.
    """
    from scipy.optimize import minimize

    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    client = np.asarray(client, dtype=np.int64)
    N, d = h.shape
    scale = 100.0 * N

    def neg(v):
        gam, xi = v[:m], v[m:].reshape(m, d)
        try:
            tm = TiltMatrix.from_embeddings(h, client, gam, xi)
            sol = solve(tm)
        except (SolverError, DomainError):
            return 1e10, np.zeros_like(v)
        dg, dx = profile_logel_primal_grad(h, client, tm, sol)
        val = sol.primal - 0.5 * ridge * np.sum(xi ** 2)
        return -val / scale, -np.concatenate([dg, (dx - ridge * xi).ravel()]) / scale

    rng = np.random.default_rng(seed)
    best, best_gn = None, np.inf
    for _ in range(starts):
        xi0 = 0.1 * rng.standard_normal((m, d))
        # this intercept makes every tilt column average to one, so rho = 0 is a root
        g0 = -logsumexp(h @ xi0.T, axis=0) + np.log(N)
        x = np.concatenate([g0, xi0.ravel()])
        for _ in range(restarts):
            x = minimize(neg, x, jac=True, method="BFGS", options={"gtol": 1e-12}).x
            gn = np.max(np.abs(neg(x)[1])) * scale
            if gn < 1e-8:
                return x[:m], x[m:].reshape(m, d)
        if gn < best_gn:
            best, best_gn = x, gn
    x = best
    return x[:m], x[m:].reshape(m, d)


def maximize_dual(h, client, m: int, ridge: float = 0.5):
    """Maximise ``dual - ridge/2 ||xi||^2`` over ``(gamma_ddag, xi)``; returns both."""
    from scipy.optimize import minimize

    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    client = np.asarray(client, dtype=np.int64)
    N, d = h.shape
    onehot = np.eye(m)[client]

    def neg(v):
        gam, xi = v[:m], v[m:].reshape(m, d)
        logits = h @ xi.T + gam
        logp = logits - logsumexp(logits, axis=1, keepdims=True)
        r = np.exp(logp) - onehot
        val = logp[np.arange(N), client].sum() - 0.5 * ridge * np.sum(xi ** 2)
        return -val, np.concatenate([r.sum(axis=0), (r.T @ h + ridge * xi).ravel()])

    x = minimize(neg, np.zeros(m + m * d), jac=True, method="BFGS", options={"gtol": 1e-10}).x
    return x[:m], x[m:].reshape(m, d)


def duality_check(h, client, m: int, ridge: float = 0.5, seed: int = 0) -> DualityCheck:
    """Maximise primal and dual independently and compare them at the primal optimum.

    The dual is evaluated at the mapped intercepts of the primal maximiser, so
    ``gap`` should equal :func:`duality_constant`; ``xi_error`` compares the two
    maximisers directly.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    client = np.asarray(client, dtype=np.int64)
    counts = np.bincount(client, minlength=m)
    gam, xi_p = maximize_primal(h, client, m, ridge, seed)
    _, xi_d = maximize_dual(h, client, m, ridge)
    sol = solve(TiltMatrix.from_embeddings(h, client, gam, xi_p))
    dual = profile_logel_dual(h, client, dual_intercepts(gam, counts), xi_p)
    return DualityCheck(counts, gam, xi_p, xi_d, sol.rho, sol.primal, dual, sol.degenerate)
