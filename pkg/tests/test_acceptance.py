"""Acceptance gate: one PASS/FAIL line per criterion (shown in the terminal summary)."""

import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from feddrm import benchmarks, cli, el, federation, loss, metrics, net, partition as P, theory
from feddrm.errors import SolverError
from conftest import fd_grad, random_setup, report


def el_instances(count=25, seed=2024):
    r = np.random.default_rng(seed)
    for _ in range(count):
        m = int(r.choice([2, 3, 4]))
        n = r.integers(2, 11, size=m)
        client = np.repeat(np.arange(m), n)
        yield r.standard_normal((n.sum(), 2)), client, m, n


@pytest.fixture(scope="module")
def el_checks():
    t0 = time.perf_counter()
    out = [(h, c, m, el.duality_check(h, c, m, seed=k))
           for k, (h, c, m, _) in enumerate(el_instances())]
    return out, time.perf_counter() - t0


@pytest.mark.xfail(strict=True, reason="the stated constant sum n_i log(n_i/N) differs from the "
                   "exact gap -sum n_i log n_i; see README, 'Duality constant'")
def test_criterion_1_duality(el_checks):
    checks, elapsed = el_checks
    lit = max(abs(c.gap - np.sum(c.counts * np.log(c.counts / c.counts.sum()))) for *_, c in checks)
    exact = max(abs(c.gap - el.duality_constant(c.counts)) for *_, c in checks)
    rho = max(c.rho_error for *_, c in checks)
    ok = lit < 1e-6 and rho < 1e-6 and elapsed < 60
    report(1, "EL duality gap and multipliers", ok,
           f"stated-constant residual {lit:.3g}; exact-constant residual {exact:.1e}; "
           f"rho error {rho:.1e}; {elapsed:.1f}s")
    assert lit < 1e-6
    assert rho < 1e-6 and elapsed < 60


def test_criterion_1_multipliers_and_exact_gap(el_checks):
    checks, elapsed = el_checks
    assert max(c.rho_error for *_, c in checks) < 1e-6
    assert max(abs(c.gap - el.duality_constant(c.counts)) for *_, c in checks) < 1e-6
    assert elapsed < 60


def test_criterion_2_constraints(el_checks):
    checks, _ = el_checks
    worst_sum, worst_tilt = 0.0, 0.0
    r = np.random.default_rng(7)
    cases = [(h, c, ch.gamma_dag, ch.xi_primal) for h, c, _, ch in checks]
    # plus random tilts away from any maximiser
    for h, c, m, _ in el_instances(25, seed=99):
        gam, xi = r.normal(scale=0.5, size=m), r.normal(scale=0.5, size=(m, 2))
        gam[0], xi[0] = 0.0, 0.0    # client 0 is the reference distribution
        cases.append((h, c, gam, xi))
    solved = infeasible = 0
    for h, c, gam, xi in cases:
        tm = el.TiltMatrix.from_embeddings(h, c, gam, xi)
        try:
            sol = el.solve(tm)
        except SolverError:
            infeasible += 1       # no EL solution exists for these tilts
            continue
        solved += 1
        s, t = el.constraint_residuals(tm, sol.p)
        worst_sum, worst_tilt = max(worst_sum, s), max(worst_tilt, t)
    ok = worst_sum < 1e-10 and worst_tilt < 1e-8 and solved >= len(checks)
    report(2, "EL constraints on every solved instance", ok,
           f"|sum p - 1| {worst_sum:.1e}; max |sum p t - 1| {worst_tilt:.1e}; "
           f"{solved} solved, {infeasible} random tilts infeasible")
    assert ok


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        sharing = ["none", "shallow", "mid", "deep"][seed % 4]
        cfg, emb, heads, X, y, ids = random_setup(seed, sharing=sharing, shared=seed % 3 == 0)
        lam, wd = 0.3 + 0.06 * seed, 0.01 * seed

        def f():
            return loss.reweighted_loss(X, y, ids, emb, heads, cfg, lam, wd)[0].total

        _, g = loss.reweighted_loss(X, y, ids, emb, heads, cfg, lam, wd)
        pairs = list(zip(emb.arrays(), g.embedding.arrays()))
        gh = g.heads.named()
        pairs += [(arr, gh[k]) for k, arr in heads.named().items()]
        for arr, an in pairs:
            fd = fd_grad(f, arr)
            err = np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12)
            if np.linalg.norm(fd) > 1e-12:
                worst = max(worst, err)
            else:
                worst = max(worst, float(np.linalg.norm(an)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 60
    report(3, "reweighted-loss gradients vs central differences", ok,
           f"worst relative error {worst:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_4_drift():
    r = np.random.default_rng(4)
    worst = 0.0
    for seed in range(10):
        cfg, emb, heads, *_ = random_setup(seed, m=3, K=4)
        ds = [P.ClientDataset(i, r.normal(size=(n, 5)), r.integers(4, size=n))
              for i, n in enumerate(r.integers(5, 40, size=3))]
        rep = metrics.drift_report(ds, emb, heads, cfg, float(r.uniform(0.05, 0.95)))
        worst = max(worst, abs(rep.G2 - rep.decomposed) / rep.G2)
    reps = theory.drift_experiment(rounds=50)
    worst = max([worst] + [abs(x.G2 - x.decomposed) / x.G2 for x in reps])
    start = reps[0].G_client2 > reps[0].G_class2
    every = all(x.G_client2 > x.G_class2 for x in reps)
    ok = worst < 1e-12 and start and every
    report(4, "drift decomposition and client-drift dominance", ok,
           f"decomposition rel err {worst:.1e}; round-0 ratio "
           f"{reps[0].G_client2 / reps[0].G_class2:.2f}; dominant in all {len(reps)} logged points: {every}")
    assert ok


def _named_heads(p):
    return loss.HeadBank.from_named({k: v for k, v in p.items() if k.startswith(("client", "target"))})


def test_criterion_5_fedavg_reduction():
    spec = P.separated_gaussian_spec(m=3, K=3, n=50, seed=1)
    ds, _ = P.synth_drm_generate(spec)
    cfg = net.NetConfig(2, (6,), (4,), activation="tanh")
    fc = federation.FederationConfig(m=3, T=1, E=1, lr=0.4, lam=0.7, wd=0.02, shared_target=True)
    st = federation.init_state(fc, cfg, 3)
    r = np.random.default_rng(0)
    for v in st.params.values():
        v[...] = r.normal(scale=0.3, size=v.shape)
    start = {k: v.copy() for k, v in st.params.items()}
    federation.run(fc, cfg, ds, K=3, state=st)
    w = np.array([d.n for d in ds], float)
    w /= w.sum()
    emb = net.EmbeddingParams.from_named(start, cfg)
    step = {k: np.zeros_like(v) for k, v in start.items()}
    for d, wi in zip(ds, w):
        _, g = loss.reweighted_loss(d.X, d.y, d.client_id, emb, _named_heads(start), cfg, 0.7, 0.02)
        for k, v in {**g.embedding.named(), **g.heads.named()}.items():
            step[k] += wi * v
    gd_err = max(float(np.max(np.abs(st.params[k] - (start[k] - 0.4 * step[k])))) for k in start)

    ds1, _ = P.synth_drm_generate(P.separated_gaussian_spec(m=1, K=3, n=40, seed=2))
    fc1 = federation.FederationConfig(m=1, T=5, E=4, lr=0.2, lam=0.8, wd=0.01, batch_size=8,
                                      momentum=0.5, seed=3)
    st1, _ = federation.run(fc1, cfg, ds1, K=3)
    rng = np.random.default_rng(np.random.SeedSequence(3).spawn(1)[0])
    p = {**net.init_params(cfg, 3).named(), **loss.init_heads(1, 3, cfg.d_g, cfg.d_h).named()}
    buf = {}
    for _ in range(20):
        rows = np.sort(rng.choice(40, size=8, replace=False))
        _, g = loss.reweighted_loss(ds1[0].X[rows], ds1[0].y[rows], 0,
                                    net.EmbeddingParams.from_named(p, cfg), _named_heads(p), cfg, 0.8, 0.01)
        grads = {**g.embedding.named(), **g.heads.named()}
        for k in p:
            buf[k] = grads[k].copy() if k not in buf else 0.5 * buf[k] + grads[k]
            p[k] = p[k] - 0.2 * buf[k]
    bitwise = all(np.array_equal(p[k], st1.params[k]) for k in p)
    ok = gd_err < 1e-12 and bitwise
    report(5, "FedAvg reduction", ok, f"one round vs global GD max diff {gd_err:.1e}; m=1 bitwise: {bitwise}")
    assert ok


def test_criterion_6_theory_trends():
    t0 = time.perf_counter()
    spec = P.theory_spec(m=3, N=2000, seed=0)
    slope, _ = theory.statistical_experiment(spec, (500, 1000, 2000, 4000, 8000), lam=0.8,
                                             wd=1e-5, n_seeds=20)
    zero = theory.convergence_experiment(spec, lam=0.8, wd=1e-2, E_grid=(1, 2, 4, 8), lr=2.0, T=800,
                                         zero_heterogeneity=True)
    het = theory.convergence_experiment(spec, lam=0.8, wd=1e-2, E_grid=(1, 2, 4, 8), lr=2.0, T=800)
    zero_plateau = max(tr.plateau for tr in zero.traces)
    plats = [tr.plateau for tr in het.traces]
    spec4 = P.theory_spec(m=3, N=4000, seed=0)
    _, c06 = theory.statistical_errors(spec4, 4000, range(1000, 1020), lam=0.6, wd=1e-3)
    _, c099 = theory.statistical_errors(spec4, 4000, range(1000, 1020), lam=0.99, wd=1e-3)
    elapsed = time.perf_counter() - t0
    a = -1.3 <= slope <= -0.7
    b = zero_plateau < 1e-10
    c = all(y >= x for x, y in zip(plats, plats[1:]))
    d = c099.mean() > c06.mean()
    ok = a and b and c and d and elapsed < 600
    report(6, "optimisation and statistical trends", ok,
           f"(a) slope {slope:.2f}; (b) zero-heterogeneity plateau {zero_plateau:.1e}; "
           f"(c) plateaus {', '.join(f'{x:.2g}' for x in plats)}; "
           f"(d) client error {c06.mean():.3f} -> {c099.mean():.3f}; {elapsed:.0f}s")
    assert ok


def test_criterion_7_routing():
    t0 = time.perf_counter()
    res = benchmarks.routing_experiment(seed=0, n=2000, n_test=1000)
    elapsed = time.perf_counter() - t0
    ok = res.bayes_agreement >= 0.95 and res.system_acc >= res.majority_acc and elapsed < 300
    report(7, "routing on separated Gaussian clients", ok,
           f"Bayes agreement {res.bayes_agreement:.3f}; system {res.system_acc:.3f} vs "
           f"majority vote {res.majority_acc:.3f}; {elapsed:.1f}s")
    assert ok


def test_criterion_8_lambda_tradeoff():
    spec = P.theory_spec(m=3, N=2000, seed=0)
    grid = [0.5, 0.6, 0.9, 0.99]
    rows = {r["lam"]: r for r in theory.lambda_tradeoff(spec, grid, seeds=range(10))}
    a = rows[0.99]["client_acc"] < rows[0.6]["client_acc"]
    b = rows[0.9]["class_acc"] >= rows[0.5]["class_acc"] - rows[0.5]["class_acc_std"]
    ok = a and b
    report(8, "lambda trade-off", ok,
           f"client acc {rows[0.6]['client_acc']:.3f} (0.6) vs {rows[0.99]['client_acc']:.3f} (0.99); "
           f"class acc {rows[0.5]['class_acc']:.3f}+-{rows[0.5]['class_acc_std']:.3f} (0.5) vs "
           f"{rows[0.9]['class_acc']:.3f} (0.9)")
    assert ok


def test_criterion_9_partitioners(tmp_path):
    r = np.random.default_rng(9)
    labels = r.integers(10, size=3000)
    support = True
    for m, S in [(5, 2), (10, 1), (7, 3), (20, 2)]:
        a = P.shard_partition(labels, m, S, seed=m)
        support &= all(len(np.unique(labels[a == i])) <= S for i in range(m))
    _, props = P.dirichlet_partition(labels, 6, 0.3, seed=1, return_proportions=True)
    sums = float(np.max(np.abs(np.array(list(props.values())).sum(axis=1) - 1.0)))
    split_ok = True
    for n in range(1, 400):
        tr, te = P.train_test_split(n, seed=n)
        split_ok &= abs(len(tr) - 0.7 * n) <= 1 and len(tr) + len(te) == n
    files = []
    for k in range(2):
        a = P.dirichlet_partition(labels, 6, 0.3, seed=5)
        _, _, tags = P.split_clients(np.zeros((labels.size, 1)), labels, a, 6, seed=5)
        P.write_partition_csv(tmp_path / f"p{k}.csv", a, tags)
        files.append((tmp_path / f"p{k}.csv").read_bytes())
    rerun = files[0] == files[1]
    ok = support and sums < 1e-12 and split_ok and rerun
    report(9, "partitioner contracts", ok,
           f"shard support <= S: {support}; Dirichlet row-sum error {sums:.1e}; "
           f"70/30 within 1: {split_ok}; reruns identical: {rerun}")
    assert ok


def test_criterion_10_determinism(tmp_path, monkeypatch):
    base = yaml.safe_load((Path(__file__).parents[1] / "configs" / "run_synthetic.yaml").read_text())
    outs = []
    for w in ("1", "4"):
        monkeypatch.setenv(federation.WORKERS_ENV, w)
        cfg = dict(base, output_dir=str(tmp_path / "run"), rounds=10)
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert cli.main(["run", str(path)]) == 0
        outs.append({f.name: f.read_bytes() for f in sorted((tmp_path / "run").rglob("*")) if f.is_file()})
    same = outs[0] == outs[1]
    report(10, "byte-identical reruns across worker counts", same, f"{len(outs[0])} files compared")
    assert same
