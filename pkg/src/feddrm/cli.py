"""Command-line entry point: ``feddrm {run,partition,eval,elcheck,drift,theory}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 divergence,
4 a verification check failed.  Every output file starts with a ``#`` line
carrying the config hash, master seed and package version.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, config, el, federation, metrics, net, partition, theory
from .errors import ConfigError, DataError, DivergenceError, FedDRMError, SolverError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4

METRIC_COLUMNS = ["round", "train_loss", "client_ce", "target_ce", "avg_acc", "sys_acc",
                  "route_acc", "G_client2", "G_class2"]


def header(cfg_hash: str, seed) -> str:
    return f"# config_hash={cfg_hash} seed={seed} version={__version__}\n"


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, head: str, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(head)
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(fmt(r.get(c, "")) for c in columns) + "\n")


# ---------------------------------------------------------------------------
# data preparation

def _load_pool(cfg):
    """Pooled ``(X, y)`` from CSV or image input, with the shift applied per client for images."""
    if cfg["data_source"] == "csv":
        if not cfg["data_path"]:
            raise ConfigError("missing required key: data_path")
        return partition.read_csv_dataset(cfg["data_path"])
    if cfg["data_source"] == "images":
        if not cfg["data_path"] or not cfg["label_path"]:
            raise ConfigError("missing required key: data_path/label_path")
        images = partition.read_images(cfg["data_path"])
        try:
            y = np.loadtxt(cfg["label_path"], dtype=np.int64, ndmin=1, comments="#")
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read labels: {exc}") from exc
        if y.size != images.shape[0]:
            raise DataError("label count does not match image count")
        return images, y
    raise ConfigError(f"unknown data_source {cfg['data_source']!r}")


def _assign(cfg, y):
    if cfg["partition"] == "dirichlet":
        return partition.dirichlet_partition(y, cfg["m"], cfg["alpha_conc"], cfg["seed"])
    if cfg["partition"] == "shard":
        return partition.shard_partition(y, cfg["m"], cfg["shards_per_client"], cfg["seed"])
    raise ConfigError(f"unknown partition {cfg['partition']!r}")


def _shift_images(cfg, images, assign):
    if not cfg["shift_preset"]:
        return images
    out = images.copy()
    for i, spec in enumerate(partition.ShiftSpec.for_clients(cfg["shift_preset"], cfg["m"])):
        sel = assign == i
        if sel.any():
            out[sel] = partition.apply_covariate_shift(images[sel], spec)
    return out


def prepare_data(cfg):
    """Returns ``(train, test, K)`` client datasets."""
    m, seed = cfg["m"], cfg["seed"]
    if cfg["data_source"] == "synthetic":
        spec = partition.separated_gaussian_spec(m, cfg["n_classes"], cfg["n_features"],
                                                 cfg["n_per_client"], cfg["separation"], seed)
        pooled, _ = partition.synth_drm_generate(spec)
        X = np.vstack([d.X for d in pooled])
        y = np.concatenate([d.y for d in pooled])
        assign = np.concatenate([np.full(d.n, d.client_id) for d in pooled])
        K = cfg["n_classes"]
    else:
        X, y = _load_pool(cfg)
        assign = _assign(cfg, y)
        if cfg["data_source"] == "images":
            X = _shift_images(cfg, X, assign).reshape(X.shape[0], -1) / 255.0
        K = int(y.max()) + 1
    train, test, _ = partition.split_clients(X, y, assign, m, seed)
    return train, test, K


def build_configs(cfg, input_dim):
    ncfg = net.NetConfig(input_dim, tuple(cfg["g_layers"]), tuple(cfg["h_layers"]), cfg["sharing"],
                         cfg["activation"], cfg["fixed_embedding"])
    fcfg = federation.FederationConfig(
        m=cfg["m"], T=cfg["rounds"], E=cfg["local_steps"], lr=cfg["lr"], lam=cfg["lam"],
        wd=cfg["weight_decay"], momentum=cfg["momentum"], schedule=cfg["schedule"],
        batch_size=cfg["batch_size"] or None, shared_target=cfg["shared_target"], mode=cfg["mode"],
        seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"])
    return ncfg, fcfg


def evaluate(state, train, test, ncfg, lam, with_drift=True) -> dict:
    emb, heads = state.embedding, state.heads
    X = np.vstack([d.X for d in test])
    y = np.concatenate([d.y for d in test])
    who = np.concatenate([np.full(d.n, d.client_id) for d in test])
    row = {"avg_acc": metrics.average_accuracy(test, [d.n for d in train], emb, heads, ncfg),
           "sys_acc": metrics.system_accuracy(X, y, emb, heads, ncfg),
           "route_acc": metrics.route_accuracy(X, who, emb, heads, ncfg)}
    if with_drift:
        rep = metrics.drift_report(train, emb, heads, ncfg, lam)
        row["G_client2"], row["G_class2"] = rep.G_client2, rep.G_class2
    return row


# ---------------------------------------------------------------------------
# subcommands

def cmd_run(args) -> int:
    cfg, h = config.load(args.config, "run")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test, K = prepare_data(cfg)
    ncfg, fcfg = build_configs(cfg, train[0].X.shape[1])

    def on_round(state, row):
        row.update(evaluate(state, train, test, ncfg, fcfg.lam, cfg["track_drift"]))

    ckpt = None
    if fcfg.checkpoint_every:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
    _, rows = federation.run(fcfg, ncfg, train, K=K, callback=on_round, checkpoint_dir=ckpt,
                             checkpoint_meta=h)
    head = header(h, cfg["seed"])
    write_csv(out / "metrics.csv", head, METRIC_COLUMNS, rows)
    (out / "summary.json").write_text(summary(rows, cfg["window"], h, cfg["seed"]))
    return EXIT_OK


def summary(rows, window: int, cfg_hash: str, seed) -> str:
    """Mean and population standard deviation of each metric over the last ``window`` rounds."""
    tail = rows[-window:] if window > 0 else rows
    stats = {}
    for c in METRIC_COLUMNS[1:]:
        vals = np.array([r[c] for r in tail if c in r], dtype=np.float64)
        if vals.size:
            stats[c] = {"mean": float(vals.mean()), "std": float(vals.std())}
    doc = {"config_hash": cfg_hash, "seed": seed, "version": __version__,
           "window": len(tail), "metrics": stats}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_partition(args) -> int:
    cfg, h = config.load(args.config, "partition")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    m, seed = cfg["m"], cfg["seed"]
    if cfg["data_source"] == "synthetic":
        train, test, K = prepare_data(cfg)
        assign = np.concatenate([np.full(d.n + t.n, d.client_id) for d, t in zip(train, test)])
        tags = np.concatenate([["train"] * d.n + ["test"] * t.n for d, t in zip(train, test)])
    else:
        X, y = _load_pool(cfg)
        assign = _assign(cfg, y)
        _, _, tags = partition.split_clients(np.zeros((y.size, 1)), y, assign, m, seed)
        if cfg["data_source"] == "images" and cfg["shift_preset"]:
            partition.write_images(out / "shifted.fdrm", _shift_images(cfg, X, assign))
    partition.write_partition_csv(out / "partition.csv", assign, tags,
                                  [header(h, seed)[2:].strip()])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, h = config.load(args.config, "eval")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test, K = prepare_data(cfg)
    ncfg, fcfg = build_configs(cfg, train[0].X.shape[1])
    state = federation.init_state(fcfg, ncfg, K)
    _, blocks, rnd = federation.load_checkpoint(args.checkpoint)
    state.params = federation.restore_params(state.params, blocks)
    state.round = rnd
    row = {"round": rnd, **evaluate(state, train, test, ncfg, fcfg.lam)}
    write_csv(out / "eval.csv", header(h, cfg["seed"]), METRIC_COLUMNS, [row])
    return EXIT_OK


def elcheck_instance(rng, m, max_n, d_h, degenerate=False):
    n = rng.integers(2, max_n + 1, size=m)
    client = np.repeat(np.arange(m), n)
    h = np.zeros((n.sum(), d_h)) if degenerate else rng.standard_normal((n.sum(), d_h))
    return h, client, n


def cmd_elcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    tol = {"sum_p": 1e-10, "moment": 1e-8, "duality": 1e-6, "rho": 1e-6, "xi": 1e-4}
    lines, ok = [], True

    def check(name, value, limit):
        nonlocal ok
        passed = bool(value < limit)
        ok &= passed
        lines.append(f"{name:<28} {value:.3e}  tol {limit:.0e}  {'PASS' if passed else 'FAIL'}")

    for k in range(args.instances):
        h, client, n = elcheck_instance(rng, args.m, args.max_n, args.d_h, args.degenerate)
        lines.append(f"instance {k}: m={args.m} n={n.tolist()}")
        if args.degenerate:
            tm = el.TiltMatrix.from_embeddings(h, client, np.zeros(args.m), np.zeros((args.m, args.d_h)))
            sol = el.solve(tm)
            lines.append(f"  degenerate={sol.degenerate}")
            rho = sol.rho
        else:
            res = el.duality_check(h, client, args.m, seed=args.seed + k)
            tm = el.TiltMatrix.from_embeddings(h, client, res.gamma_dag, res.xi_primal)
            rho = res.rho
            check("  duality gap error", abs(res.gap - el.duality_constant(n)), tol["duality"])
            check("  xi maximiser mismatch", res.xi_error, tol["xi"])
        if args.corrupt:
            rho = rho + 1e-3
        p = el.atom_weights(tm, rho)
        s, mom = el.constraint_residuals(tm, p)
        check("  |sum p - 1|", s, tol["sum_p"])
        check("  max |sum p t - 1|", mom, tol["moment"])
        check("  |rho - n/N|", float(np.max(np.abs(rho - n / n.sum()))), tol["rho"])
    lines.append("RESULT " + ("PASS" if ok else "FAIL"))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_drift(args) -> int:
    cfg, h = config.load(args.config, "drift")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    reports = theory.drift_experiment(cfg["rounds"], lam=cfg["lam"], lr=cfg["lr"],
                                      E=cfg["local_steps"], seed=cfg["seed"], m=cfg.get("m", 3))
    rows = [{"round": t, "G_client2": r.G_client2, "G_class2": r.G_class2, "G2": r.G2}
            for t, r in enumerate(reports)]
    head = header(h, cfg["seed"])
    write_csv(out / "drift.csv", head, ["round", "G_client2", "G_class2", "G2"], rows)
    checks = {
        "client_drift_exceeds_class_at_start": reports[0].G_client2 > reports[0].G_class2,
        "client_drift_exceeds_class_all_rounds": all(r.G_client2 > r.G_class2 for r in reports),
        "decomposition_exact": all(abs(r.G2 - r.decomposed) <= 1e-12 * max(r.G2, 1e-300)
                                   for r in reports),
    }
    return _verdict(out / "verdict.txt", head, checks)


def _verdict(path, head, checks) -> int:
    text = head + "".join(f"{k} {'PASS' if v else 'FAIL'}\n" for k, v in checks.items())
    Path(path).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if all(checks.values()) else EXIT_CHECK


def cmd_theory(args) -> int:
    cfg, h = config.load(args.config, "theory")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    head = header(h, cfg["seed"])
    lam, wd = cfg["lam"], cfg["weight_decay"]
    if wd <= 0:
        raise ConfigError("theory needs weight_decay > 0 (strong convexity)")
    spec = partition.theory_spec(m=cfg.get("m", 3), N=cfg["theory_n"], seed=cfg["seed"])
    rep = theory.convergence_experiment(spec, lam=lam, wd=wd, E_grid=tuple(cfg["theory_E_grid"]),
                                        lr=cfg["lr"], T=cfg["rounds"],
                                        zero_heterogeneity=cfg["theory_zero_heterogeneity"])
    conv_rows = [{"E": tr.E, "lr": tr.lr, "plateau": tr.plateau, "contraction": tr.contraction,
                  "bound": (1 - tr.lr * rep.mu_hat) ** tr.E, "mu_hat": rep.mu_hat, "L_hat": rep.L_hat}
                 for tr in rep.traces]
    write_csv(out / "convergence.csv", head, list(conv_rows[0]), conv_rows)
    plateaus = [r["plateau"] for r in conv_rows]
    checks = {}
    if cfg["theory_zero_heterogeneity"]:
        checks["plateau_zero"] = max(plateaus) < 1e-10
    else:
        checks["plateau_nondecreasing_in_E"] = all(b >= a for a, b in zip(plateaus, plateaus[1:]))
    checks["contraction_within_bound"] = all(
        not np.isfinite(r["contraction"]) or r["contraction"] <= r["bound"] + 0.05 for r in conv_rows)
    if cfg["theory_seeds"] > 0 and cfg["theory_N_grid"]:
        slope, means = theory.statistical_experiment(spec, tuple(cfg["theory_N_grid"]), lam=lam,
                                                     wd=1e-5, n_seeds=cfg["theory_seeds"])
        write_csv(out / "statistical.csv", head, ["N", "mean_sq_error"],
                  [{"N": n, "mean_sq_error": e} for n, e in zip(cfg["theory_N_grid"], means)])
        checks["statistical_slope_in_range"] = -1.3 <= slope <= -0.7
    if cfg["theory_lam_grid"]:
        rows = theory.lambda_tradeoff(spec, cfg["theory_lam_grid"], seeds=range(10), wd=wd)
        write_csv(out / "lambda.csv", head, list(rows[0]), rows)
        checks["lambda_rows_match_grid"] = [r["lam"] for r in rows] == list(cfg["theory_lam_grid"])
    return _verdict(out / "verdict.txt", head, checks)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="feddrm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("partition", cmd_partition), ("drift", cmd_drift),
                     ("theory", cmd_theory)):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.set_defaults(func=fn)
    p = sub.add_parser("eval")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("elcheck")
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--max-n", type=int, default=8)
    p.add_argument("--d-h", type=int, default=2)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--degenerate", action="store_true", help="all tilts equal to one")
    p.add_argument("--corrupt", action="store_true", help="perturb the multipliers (negative control)")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_elcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except FedDRMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
