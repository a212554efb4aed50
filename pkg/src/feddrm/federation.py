"""Federated training loop: broadcast, local SGD on the reweighted loss, weighted averaging.

Parameters travel as flat ``{name: array}`` dictionaries using the names from
:meth:`EmbeddingParams.named` and :meth:`HeadBank.named`.  Everything except
per-client target heads is shared and averaged with weights ``n_i / N`` in
ascending client order, so results do not depend on how many worker threads
ran the local updates.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import loss, net
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .partition import ClientDataset

DIVERGENCE_LIMIT = 1e6
CHECKPOINT_MAGIC = b"FDCK"
CHECKPOINT_VERSION = 1
WORKERS_ENV = "FEDDRM_WORKERS"


@dataclass(frozen=True)
class FederationConfig:
    m: int
    T: int = 10
    E: int = 1
    lr: float = 0.1
    lam: float = 0.8
    wd: float = 0.0
    momentum: float = 0.0
    schedule: str = "constant"
    batch_size: int | None = None      # None means full batch
    shared_target: bool = False
    mode: str = "feddrm"               # or "fedavg_ref"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.T < 1 or self.E < 1:
            raise ConfigError("T and E must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError("lam must lie in (0, 1]")
        if self.wd < 0:
            raise ConfigError("weight decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in ("feddrm", "fedavg_ref"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "fedavg_ref" and not self.shared_target:
            raise ConfigError("fedavg_ref needs shared_target = true")

    def lr_at(self, t: int) -> float:
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * t / self.T))
        return self.lr


def config_hash(obj) -> int:
    """Stable 64-bit hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass
class FederationState:
    round: int
    net_cfg: net.NetConfig
    params: dict[str, np.ndarray]              # global shared + all per-client target heads
    momentum: list[dict[str, np.ndarray]]      # per client
    rngs: list[np.random.Generator]            # per client minibatch streams
    history: list[dict] = field(default_factory=list)

    @property
    def embedding(self) -> net.EmbeddingParams:
        return net.EmbeddingParams.from_named(self.params, self.net_cfg)

    @property
    def heads(self) -> loss.HeadBank:
        return loss.HeadBank.from_named({k: v for k, v in self.params.items()
                                         if k.startswith(("client.", "target."))})


def init_state(cfg: FederationConfig, net_cfg: net.NetConfig, K: int,
               embedding: net.EmbeddingParams | None = None,
               heads: loss.HeadBank | None = None) -> FederationState:
    emb = embedding if embedding is not None else net.init_params(net_cfg, cfg.seed)
    hb = heads if heads is not None else loss.init_heads(cfg.m, K, net_cfg.d_g, net_cfg.d_h,
                                                         cfg.shared_target)
    # with one client a personal head and a shared one are the same thing
    if hb.m != cfg.m or (cfg.m > 1 and hb.shared_target != cfg.shared_target):
        raise ContractError("head bank does not match the federation config")
    params = {k: np.array(v, dtype=np.float64) for k, v in {**emb.named(), **hb.named()}.items()}
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.m)
    return FederationState(0, net_cfg, params, [{} for _ in range(cfg.m)],
                           [np.random.default_rng(s) for s in streams])


def shared_names(params: dict, cfg: FederationConfig, net_cfg: net.NetConfig) -> list[str]:
    """Names averaged by the server, in a fixed order."""
    out = []
    for k in params:
        if k.startswith(("theta.", "tau.")):
            if not net_cfg.fixed_embedding:
                out.append(k)
        elif k.startswith("client.") or (k.startswith("target.") and cfg.shared_target):
            out.append(k)
    return out


def client_view(params: dict, i: int, cfg: FederationConfig) -> dict[str, np.ndarray]:
    """What client ``i`` trains on: shared copies plus its own target head as ``target.0``."""
    k = 0 if cfg.shared_target else i
    view = {n: v.copy() for n, v in params.items() if not n.startswith("target.")}
    view["target.0.alpha"] = params[f"target.{k}.alpha"].copy()
    view["target.0.beta"] = params[f"target.{k}.beta"].copy()
    return view


def _view_heads(view):
    return loss.HeadBank.from_named({k: v for k, v in view.items()
                                     if k.startswith(("client.", "target."))})


@dataclass
class LocalResult:
    params: dict[str, np.ndarray]
    first: loss.LossBreakdown   # loss at the broadcast parameters (first batch)


def local_update(view: dict[str, np.ndarray], data: ClientDataset, cfg: FederationConfig,
                 net_cfg: net.NetConfig, lr: float, rng: np.random.Generator,
                 momentum: dict[str, np.ndarray], *, round_index: int = -1,
                 cache: tuple[np.ndarray, np.ndarray] | None = None) -> LocalResult:
    """Run ``E`` SGD steps on one client.  ``momentum`` is updated in place.

    ``cache`` holds precomputed ``(g, h)`` for a frozen embedding.
    """
    params = {k: v.copy() for k, v in view.items()}
    ids = data.ids
    first = None
    for step in range(cfg.E):
        if cfg.batch_size is None or cfg.batch_size >= data.n:
            rows = slice(None)
        else:
            rows = np.sort(rng.choice(data.n, size=cfg.batch_size, replace=False))
        heads = _view_heads(params)
        if cache is not None:
            g, h = cache[0][rows], cache[1][rows]
            lb, hg = loss.head_only_loss(g, h, data.y[rows], ids[rows], heads,
                                         1.0 if cfg.mode == "fedavg_ref" else cfg.lam, cfg.wd,
                                         use_client_head=cfg.mode == "feddrm")
            grads = hg.named()
        else:
            emb = net.EmbeddingParams.from_named(params, net_cfg)
            if cfg.mode == "fedavg_ref":
                lb, mg = loss.target_loss(data.X[rows], data.y[rows], emb, heads, net_cfg, cfg.wd)
            else:
                lb, mg = loss.reweighted_loss(data.X[rows], data.y[rows], ids[rows], emb, heads,
                                              net_cfg, cfg.lam, cfg.wd)
            grads = {**mg.embedding.named(), **mg.heads.named()}
        if not np.isfinite(lb.total) or lb.total > DIVERGENCE_LIMIT:
            raise DivergenceError(f"client {data.client_id} diverged at round {round_index}, "
                                  f"step {step}: loss {lb.total}", round_index, step, data.client_id)
        if first is None:
            first = lb
        for k, gr in grads.items():
            if net_cfg.fixed_embedding and k.startswith(("theta.", "tau.")):
                continue
            if cfg.momentum:
                buf = momentum.get(k)
                buf = gr.copy() if buf is None else cfg.momentum * buf + gr
                momentum[k] = buf
                gr = buf
            params[k] = params[k] - lr * gr
    return LocalResult(params, first)


def aggregate(client_params: list[dict[str, np.ndarray]], sizes, names=None) -> dict[str, np.ndarray]:
    """``sum_i (n_i / N) * params_i`` accumulated in ascending client order.

    When every client holds the same array it is returned as is, so a block
    nobody changed (frozen, or ``lr = 0``) stays bit-exact.
    """
    if not client_params:
        raise ContractError("nothing to aggregate")
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) != len(client_params):
        raise ContractError("one size per client is required")
    w = sizes / sizes.sum()
    names = list(client_params[0]) if names is None else names
    out = {}
    for k in names:
        shapes = {p[k].shape for p in client_params}
        if len(shapes) != 1:
            raise ContractError(f"shape mismatch for {k}: {sorted(shapes)}")
        first = client_params[0][k]
        if all(np.array_equal(p[k], first) for p in client_params[1:]):
            out[k] = first.copy()
            continue
        acc = w[0] * first
        for i in range(1, len(client_params)):
            acc = acc + w[i] * client_params[i][k]
        out[k] = acc
    return out


def worker_count() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
        return max(1, n)
    return os.cpu_count() or 1


def _embedding_cache(datasets, state):
    emb = state.embedding
    out = []
    for d in datasets:
        g, h, _ = net.forward(d.X, emb, state.net_cfg)
        out.append((g, h))
    return out


def run_round(state: FederationState, cfg: FederationConfig, datasets: list[ClientDataset],
              workers: int = 1, caches=None) -> dict:
    t = state.round
    lr = cfg.lr_at(t)
    sizes = [d.n for d in datasets]

    def task(i):
        return local_update(client_view(state.params, i, cfg), datasets[i], cfg, state.net_cfg,
                            lr, state.rngs[i], state.momentum[i], round_index=t,
                            cache=None if caches is None else caches[i])

    if workers > 1 and cfg.m > 1:
        with ThreadPoolExecutor(max_workers=min(workers, cfg.m)) as pool:
            results = list(pool.map(task, range(cfg.m)))
    else:
        results = [task(i) for i in range(cfg.m)]

    names = shared_names(state.params, cfg, state.net_cfg)
    view_names = [("target.0." + k.split(".")[-1]) if k.startswith("target.") else k for k in names]
    merged = aggregate([r.params for r in results], sizes, view_names)
    for k, vk in zip(names, view_names):
        state.params[k] = merged[vk]
    if not cfg.shared_target:
        for i, r in enumerate(results):
            state.params[f"target.{i}.alpha"] = r.params["target.0.alpha"]
            state.params[f"target.{i}.beta"] = r.params["target.0.beta"]

    w = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    row = {"round": t,
           "train_loss": float(sum(wi * r.first.total for wi, r in zip(w, results))),
           "client_ce": float(sum(wi * r.first.client_ce for wi, r in zip(w, results))),
           "target_ce": float(sum(wi * r.first.target_ce for wi, r in zip(w, results)))}
    state.round += 1
    return row


def run(cfg: FederationConfig, net_cfg: net.NetConfig, datasets: list[ClientDataset], *,
        K: int | None = None, state: FederationState | None = None,
        callback: Callable[[FederationState, dict], None] | None = None,
        checkpoint_dir=None, checkpoint_meta=None, workers: int | None = None):
    """Train for ``cfg.T`` rounds; returns ``(state, rows)``.

    ``train_loss``/``client_ce``/``target_ce`` in each row are the size-weighted
    client losses at the parameters broadcast in that round.  ``callback`` runs
    after aggregation and may add keys to the row.
    """
    if len(datasets) != cfg.m:
        raise DataError(f"expected {cfg.m} client datasets, got {len(datasets)}")
    if K is None:
        K = int(max(int(d.y.max()) for d in datasets if d.n)) + 1
    if state is None:
        state = init_state(cfg, net_cfg, K)
    workers = worker_count() if workers is None else workers
    caches = _embedding_cache(datasets, state) if net_cfg.fixed_embedding else None
    rows = []
    while state.round < cfg.T:
        row = run_round(state, cfg, datasets, workers, caches)
        if callback is not None:
            callback(state, row)
        rows.append(row)
        state.history.append(row)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.round % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"round_{state.round:05d}.fdck", state,
                            config_hash(checkpoint_meta if checkpoint_meta is not None else asdict(cfg)))
    return state, rows


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, state: FederationState, cfg_hash: int):
    """``FDCK``, u32 version, u64 config hash, u32 block count, then blocks of
    (u32 name length, name, u64 count, f64 values).  Block ``meta.round`` holds the round."""
    blocks = [("meta.round", np.array([state.round], dtype=np.float64))]
    blocks += [(k, np.asarray(v, dtype="<f8").ravel()) for k, v in state.params.items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQI", CHECKPOINT_VERSION, cfg_hash, len(blocks)))
        for name, vals in blocks:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", vals.size))
            fh.write(vals.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[int, dict[str, np.ndarray], int]:
    """Returns ``(cfg_hash, flat blocks, round)``; reshape with :func:`restore_params`."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not an FDCK checkpoint")
    try:
        version, cfg_hash, count = struct.unpack_from("<IQI", raw, 4)
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint header") from exc
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<IQI")
    blocks = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + ln].decode()
            pos += ln
            (n,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if pos + 8 * n > len(raw):
                raise DataError(f"{path}: truncated block {name}")
            blocks[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    rnd = int(blocks.pop("meta.round", np.zeros(1))[0])
    return cfg_hash, blocks, rnd


def restore_params(template: dict[str, np.ndarray], blocks: dict[str, np.ndarray]):
    out = {}
    for k, v in template.items():
        if k not in blocks or blocks[k].size != v.size:
            raise DataError(f"checkpoint block {k} missing or of the wrong size")
        out[k] = blocks[k].reshape(v.shape).copy()
    return out
