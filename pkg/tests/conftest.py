import numpy as np
import pytest

from feddrm import loss, net


def fd_grad(f, x, eps=1e-6):
    """Central differences of scalar f over every entry of array x (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_setup(seed, sharing="deep", m=3, K=4, n=7, shared=False, d_in=5):
    r = np.random.default_rng(seed)
    cfg = net.NetConfig(d_in, g_layers=(6, 5), h_layers=(4, 3), sharing=sharing, activation="tanh")
    emb = net.init_params(cfg, seed)
    heads = loss.init_heads(m, K, cfg.d_g, cfg.d_h, shared)
    for arr in heads.named().values():
        arr[...] = r.normal(size=arr.shape)
    X = r.normal(size=(n, d_in))
    y = r.integers(K, size=n)
    ids = r.integers(m, size=n)
    return cfg, emb, heads, X, y, ids


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def report(number, name, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
