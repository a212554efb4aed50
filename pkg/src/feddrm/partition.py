"""Non-IID client datasets: label-shift partitioners, colour shifts, synthetic generators.

Everything here is deterministic in the seed.  Per-client randomness comes
from ``np.random.SeedSequence(seed).spawn(m)`` so client ``i`` draws the same
stream whether clients are generated in order or in parallel.
"""

from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .errors import ConfigError, DataError, PartitionError

log = logging.getLogger(__name__)

MAX_REDRAWS = 100
TRAIN_FRACTION = 0.7
IMAGE_MAGIC = b"FDRM"


@dataclass
class ClientDataset:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    # Per-row client label for the client head; defaults to client_id everywhere.
    client_labels: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError("X and y disagree on the number of samples")
        if self.split == "train" and self.n == 0:
            raise DataError(f"client {self.client_id} has an empty training set")
        if self.client_labels is not None:
            self.client_labels = np.asarray(self.client_labels, dtype=np.int64)
            if self.client_labels.shape != self.y.shape:
                raise DataError("client_labels must have one entry per sample")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def ids(self) -> np.ndarray:
        if self.client_labels is not None:
            return self.client_labels
        return np.full(self.n, self.client_id, dtype=np.int64)


# ---------------------------------------------------------------------------
# label-shift partitioners

def _inverse_cdf(rng, probs, size):
    cdf = np.cumsum(probs)
    draws = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(draws, len(probs) - 1)


def dirichlet_partition(labels, m: int, alpha: float, seed: int, *, return_proportions=False):
    """Assign every sample to a client with per-class Dirichlet(alpha) proportions.

    Classes are visited in ascending order; for each one a proportion vector
    is drawn and its samples are assigned categorically by inverse CDF.  If a
    client ends up empty the whole draw is repeated (up to 100 times).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if m < 1:
        raise ConfigError("need at least one client")
    if alpha <= 0:
        raise ConfigError("Dirichlet concentration must be positive")
    if labels.size < m:
        raise PartitionError(f"{labels.size} samples cannot fill {m} clients")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(MAX_REDRAWS):
        assign = np.empty(labels.size, dtype=np.int64)
        props = {}
        for k in classes:
            idx = np.flatnonzero(labels == k)
            q = rng.dirichlet(np.full(m, float(alpha)))
            props[int(k)] = q
            assign[idx] = _inverse_cdf(rng, q, idx.size)
        if np.bincount(assign, minlength=m).min() > 0:
            return (assign, props) if return_proportions else assign
    raise PartitionError(f"some client stayed empty after {MAX_REDRAWS} Dirichlet draws")


def shard_partition(labels, m: int, S: int, seed: int) -> np.ndarray:
    """Cut every class into equal label-homogeneous shards and deal ``S`` to each client.

    The shard size is the largest ``L`` for which the classes yield at least
    ``m * S`` shards of ``L`` samples, which keeps the most data.  Shards are
    listed class by class in stable label order; a seeded permutation deals the
    first ``m * S`` of them and the rest are dropped.  Dropped samples get client -1.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_shards = m * S
    if m < 1 or S < 1:
        raise ConfigError("m and S must be >= 1")
    if n_shards > labels.size:
        raise PartitionError(f"{n_shards} shards need at least that many samples, got {labels.size}")
    order = np.argsort(labels, kind="stable")
    classes, counts = np.unique(labels, return_counts=True)
    size = labels.size // n_shards
    while np.sum(counts // size) < n_shards:
        size -= 1
    shards = []
    start = 0
    for c in counts:
        shards.extend(order[start + j * size:start + (j + 1) * size] for j in range(c // size))
        start += c
    perm = np.random.default_rng(seed).permutation(len(shards))
    assign = np.full(labels.size, -1, dtype=np.int64)
    for c in range(m):
        for s in perm[c * S:(c + 1) * S]:
            assign[shards[s]] = c
    dropped = int(np.sum(assign < 0))
    if dropped:
        log.info("shard_partition: %d shards of %d, dropping %d samples", n_shards, size, dropped)
    return assign


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def train_test_split(n: int, seed: int, train_fraction: float = TRAIN_FRACTION):
    """Shuffled ``(train_idx, test_idx)`` with ``round_half_up(frac * n)`` training rows."""
    n_train = int(round_half_up(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_clients(X, y, assignment, m: int, seed: int, train_fraction: float = TRAIN_FRACTION):
    """Group rows by client and split each client 70/30; returns ``(train, test, split_tags)``.

    ``split_tags`` has one entry per input row: ``train``, ``test`` or ``dropped``.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    assignment = np.asarray(assignment, dtype=np.int64)
    seeds = np.random.SeedSequence(seed).spawn(m)
    tags = np.full(y.size, "dropped", dtype=object)
    train, test = [], []
    for i in range(m):
        idx = np.flatnonzero(assignment == i)
        tr, te = train_test_split(idx.size, int(seeds[i].generate_state(1)[0]), train_fraction)
        tags[idx[tr]] = "train"
        tags[idx[te]] = "test"
        train.append(ClientDataset(i, X[idx[tr]], y[idx[tr]], "train"))
        test.append(ClientDataset(i, X[idx[te]], y[idx[te]], "test"))
    return train, test, tags


# ---------------------------------------------------------------------------
# covariate shift

PRESETS = {
    "low": ((0.9, 1.1), (-0.01, 0.01), (0.9, 1.1)),
    "mid": ((0.75, 1.25), (-0.05, 0.05), (0.7, 1.3)),
    "high": ((0.6, 1.4), (-0.1, 0.1), (0.5, 1.5)),
}


@dataclass
class ShiftSpec:
    gamma: float = 1.0
    hue: float = 0.0
    saturation: float = 1.0
    preset: str | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("gamma factor must be positive")
        if not -0.5 <= self.hue <= 0.5:
            raise ConfigError("hue delta must lie in [-0.5, 0.5]")
        if self.saturation < 0:
            raise ConfigError("saturation factor must be non-negative")

    @staticmethod
    def grid(preset: str) -> list["ShiftSpec"]:
        """The 8 combinations of a preset, gamma varying slowest."""
        if preset not in PRESETS:
            raise ConfigError(f"unknown shift preset {preset!r}")
        return [ShiftSpec(g, h, s, preset) for g, h, s in itertools.product(*PRESETS[preset])]

    @staticmethod
    def for_clients(preset: str, m: int) -> list["ShiftSpec"]:
        """Client ``i`` gets grid entry ``i mod 8``."""
        g = ShiftSpec.grid(preset)
        return [g[i % len(g)] for i in range(m)]


def rgb_to_hsv(rgb):
    """Channel-last RGB in [0,1] to HSV with hue in [0,1)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    v = mx
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0) % 1.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.empty(h.shape + (3,))
    for c in range(3):
        out[..., c] = np.choose(i, [ch[c] for ch in choices])
    return out


def apply_covariate_shift(images, spec: ShiftSpec) -> np.ndarray:
    """Gamma, then hue rotation, then saturation scaling on byte images (n, C, H, W)."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DataError("images must have shape (n, C, H, W)")
    v = images.astype(np.float64) / 255.0
    v = v ** spec.gamma
    if spec.hue != 0.0 or spec.saturation != 1.0:
        if images.shape[1] != 3:
            raise DataError(f"hue/saturation shifts need 3 channels, got {images.shape[1]}")
        hsv = rgb_to_hsv(np.moveaxis(v, 1, -1))
        hsv[..., 0] = (hsv[..., 0] + spec.hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * spec.saturation, 0.0, 1.0)
        v = np.moveaxis(hsv_to_rgb(hsv), -1, 1)
    return np.clip(round_half_up(v * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic generators

@dataclass
class SynthSpec:
    """Gaussian DRM benchmark: client ``i`` has features N(xi_i, I)."""

    xi: np.ndarray                  # (m, p)
    alpha: list[np.ndarray]         # one (K,) vector, or one per client
    beta: list[np.ndarray]          # one (K, p) matrix, or one per client
    sizes: list[int]
    seed: int = 0

    def __post_init__(self):
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=np.float64))
        if len(self.sizes) != self.m:
            raise ConfigError("one size per client is required")
        if len(self.alpha) not in (1, self.m) or len(self.alpha) != len(self.beta):
            raise ConfigError("need one shared target head or one per client")

    @property
    def m(self) -> int:
        return self.xi.shape[0]

    @property
    def gamma(self) -> np.ndarray:
        """Normalisers ``-||xi_i||^2 / 2``."""
        return -0.5 * np.sum(self.xi ** 2, axis=1)


def _sample_labels(rng, logits):
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(p.shape[0])
    return np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), p.shape[1] - 1)


def synth_drm_generate(spec: SynthSpec) -> tuple[list[ClientDataset], dict]:
    """Draw each client's features from its tilted Gaussian and labels from its head."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.m)
    out = []
    for i in range(spec.m):
        rng = np.random.default_rng(seeds[i])
        X = spec.xi[i] + rng.standard_normal((spec.sizes[i], spec.xi.shape[1]))
        k = 0 if len(spec.alpha) == 1 else i
        y = _sample_labels(rng, X @ np.asarray(spec.beta[k]).T + spec.alpha[k])
        out.append(ClientDataset(i, X, y))
    truth = {"gamma": spec.gamma, "xi": spec.xi.copy(),
             "alpha": [np.asarray(a).copy() for a in spec.alpha],
             "beta": [np.asarray(b).copy() for b in spec.beta]}
    return out, truth


def separated_gaussian_spec(m: int = 3, K: int = 4, p: int = 2, n: int = 2000,
                            separation: float = 6.0, seed: int = 0) -> SynthSpec:
    """Client means evenly spaced on a circle with pairwise distance >= ``separation``.

    Each client gets its own random target head so pooled prediction needs routing.
    """
    if p < 2:
        raise ConfigError("the separated benchmark needs p >= 2")
    rng = np.random.default_rng(seed)
    radius = separation / (2.0 * np.sin(np.pi / m)) if m > 1 else 0.0
    angles = 2.0 * np.pi * np.arange(m) / m
    xi = np.zeros((m, p))
    xi[:, 0] = radius * np.cos(angles)
    xi[:, 1] = radius * np.sin(angles)
    alpha = [rng.normal(size=K) for _ in range(m)]
    beta = [2.0 * rng.normal(size=(K, p)) for _ in range(m)]
    return SynthSpec(xi, alpha, beta, [n] * m, seed)


@dataclass
class TheorySpec:
    """Fixed-embedding multinomial-logistic benchmark.

    Features are standard normal, pushed through a frozen random network;
    client membership and class labels are then drawn from the true softmax
    heads over ``h`` and ``g``.
    """

    m: int
    K: int
    input_dim: int
    N: int
    net_cfg: net.NetConfig
    embedding: net.EmbeddingParams
    gamma: np.ndarray
    xi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    seed: int = 0
    true_params: dict = field(default_factory=dict)


def _centred_uniform(rng, shape, scale):
    a = rng.uniform(-scale, scale, size=shape)
    return a - a.mean(axis=0, keepdims=True)


def theory_spec(m: int = 3, K: int = 4, input_dim: int = 5, d: int = 3, N: int = 2000,
                seed: int = 0, scale: float = 1.0, zero_client_head: bool = False) -> TheorySpec:
    """Draw a frozen tanh embedding and true heads with entries U(-scale, scale).

    True heads are centred across rows; softmax parameters are only defined up
    to a common shift and a ridge-penalised fit recovers the centred version.
    """
    cfg = net.NetConfig(input_dim, g_layers=(d,), h_layers=(d,), sharing="deep",
                        activation="tanh", fixed_embedding=True)
    rng = np.random.default_rng(seed)
    emb = net.init_params(cfg, int(rng.integers(2 ** 32)))
    if zero_client_head:
        gamma, xi = np.zeros(m), np.zeros((m, d))
    else:
        gamma, xi = _centred_uniform(rng, (m,), scale), _centred_uniform(rng, (m, d), scale)
    alpha, beta = _centred_uniform(rng, (K,), scale), _centred_uniform(rng, (K, d), scale)
    return TheorySpec(m, K, input_dim, N, cfg, emb, gamma, xi, alpha, beta, seed)


def synth_theory_generate(spec: TheorySpec, seed: int | None = None):
    """Pooled draw ``(X, y, client)`` of size N plus per-client datasets."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    X = rng.standard_normal((spec.N, spec.input_dim))
    g, h, _ = net.forward(X, spec.embedding, spec.net_cfg)
    client = _sample_labels(rng, h @ spec.xi.T + spec.gamma)
    y = _sample_labels(rng, g @ spec.beta.T + spec.alpha)
    datasets = [ClientDataset(i, X[client == i], y[client == i], "train")
                for i in range(spec.m) if np.any(client == i)]
    if len(datasets) != spec.m:
        raise PartitionError("a client received no samples; increase N")
    return X, y, client, datasets


# ---------------------------------------------------------------------------
# file formats

def read_csv_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Feature columns then an integer label column; ``#`` lines are comments."""
    try:
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if data.shape[1] < 2:
        raise DataError(f"{path}: need at least one feature column and a label column")
    y = data[:, -1]
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise DataError(f"{path}: labels must be non-negative integers")
    return data[:, :-1], y.astype(np.int64)


def write_csv_dataset(path, X, y, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for row, label in zip(np.asarray(X), np.asarray(y)):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def write_images(path, images):
    """Magic ``FDRM``, u32 count, C, H, W (little-endian), then raw bytes."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 4:
        raise DataError("images must have shape (n, C, H, W)")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<4I", *images.shape))
        fh.write(images.tobytes())


def read_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != IMAGE_MAGIC:
        raise DataError(f"{path}: not an FDRM image file")
    n, c, h, w = struct.unpack("<4I", raw[4:20])
    body = raw[20:]
    if len(body) != n * c * h * w:
        raise DataError(f"{path}: expected {n * c * h * w} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, c, h, w).copy()


def write_partition_csv(path, assignment, tags, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("sample_index,client_id,split\n")
        for i, (c, t) in enumerate(zip(assignment, tags)):
            fh.write(f"{i},{int(c)},{t}\n")


def read_partition_csv(path):
    rows = [ln.strip().split(",") for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0] != ["sample_index", "client_id", "split"]:
        raise DataError(f"{path}: missing partition header")
    body = rows[1:]
    return (np.array([int(r[1]) for r in body], dtype=np.int64),
            np.array([r[2] for r in body], dtype=object))
