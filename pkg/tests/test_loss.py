import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feddrm import loss, net
from feddrm.errors import DataError
from conftest import fd_grad, random_setup, rel_err

mpmath.mp.dps = 50


def mp_softmax(logits):
    e = [mpmath.exp(mpmath.mpf(float(v))) for v in logits]
    s = sum(e)
    return np.array([float(v / s) for v in e])


def test_target_probs_uniform_at_zero():
    p = loss.target_probs(np.ones(3), np.zeros(5), np.zeros((5, 3)))
    assert np.allclose(p, 0.2, atol=0, rtol=1e-15)


def test_target_probs_closed_form():
    p = loss.target_probs(np.zeros(1), np.array([0.0, np.log(3.0)]), np.zeros((2, 1)))
    assert np.allclose(p, [0.25, 0.75], rtol=1e-15)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_probs_match_high_precision(logits):
    logits = np.array(logits)
    p = loss.target_probs(np.zeros(1), logits, np.zeros((len(logits), 1)))
    assert np.max(np.abs(p - mp_softmax(logits))) < 1e-12
    assert abs(p.sum() - 1.0) < 1e-12
    q = loss.client_probs(np.zeros(1), logits, np.zeros((len(logits), 1)))
    assert np.max(np.abs(q - mp_softmax(logits))) < 1e-12


def test_client_probs_single_client():
    assert np.array_equal(loss.client_probs(np.ones(2), np.array([3.0]), np.ones((1, 2))), [1.0])


def test_client_probs_uniform():
    assert np.allclose(loss.client_probs(np.ones(2), np.zeros(4), np.zeros((4, 2))), 0.25)


def test_large_logits_stay_finite():
    p = loss.softmax(np.array([[700.0, -700.0, 0.0], [-700.0, -700.0, -699.0]]))
    assert np.all(np.isfinite(p)) and np.allclose(p.sum(axis=1), 1.0)


@pytest.mark.parametrize("shared", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_reweighted_loss_gradients(seed, shared):
    cfg, emb, heads, X, y, ids = random_setup(seed, shared=shared)
    lam, wd = 0.7, 0.03

    def f():
        return loss.reweighted_loss(X, y, ids, emb, heads, cfg, lam, wd)[0].total

    _, grads = loss.reweighted_loss(X, y, ids, emb, heads, cfg, lam, wd)
    for arr, gr in zip(emb.arrays(), grads.embedding.arrays()):
        assert rel_err(gr, fd_grad(f, arr)) < 1e-5
    gh = grads.heads.named()
    for k, arr in heads.named().items():
        assert rel_err(gh[k], fd_grad(f, arr)) < 1e-5, k


def test_breakdown_total_identity():
    cfg, emb, heads, X, y, ids = random_setup(0)
    lb, _ = loss.reweighted_loss(X, y, ids, emb, heads, cfg, 0.6, 0.1)
    assert lb.total == (1 - 0.6) * lb.client_ce + 0.6 * lb.target_ce + lb.l2
    assert lb.client_ce >= 0 and lb.target_ce >= 0 and lb.l2 >= 0


def test_lambda_one_leaves_only_decay_on_client_head():
    cfg, emb, heads, X, y, ids = random_setup(1)
    _, g = loss.reweighted_loss(X, y, ids, emb, heads, cfg, 1.0, 0.2)
    assert np.array_equal(g.heads.gamma, 0.2 * heads.gamma)
    assert np.array_equal(g.heads.xi, 0.2 * heads.xi)


def test_single_client_has_no_client_loss():
    cfg, emb, heads, X, y, _ = random_setup(2, m=1)
    lb, g = loss.reweighted_loss(X, y, 0, emb, heads, cfg, 0.5, 0.0)
    assert lb.client_ce == 0.0
    assert np.all(g.heads.gamma == 0) and np.all(g.heads.xi == 0)


def test_label_out_of_range():
    cfg, emb, heads, X, y, ids = random_setup(0)
    with pytest.raises(DataError):
        loss.reweighted_loss(X, y + 10, ids, emb, heads, cfg, 0.5)
    with pytest.raises(DataError):
        loss.reweighted_loss(X, y, ids + 10, emb, heads, cfg, 0.5)


def test_client_grad_gamma_uniform_example():
    rows = loss.client_head_grad_gamma(np.zeros((1, 2)), [1], np.zeros(2), np.zeros((2, 2)),
                                       per_sample=True)
    # loss sign: p - onehot
    assert np.allclose(rows[0], [0.5, -0.5])


def test_client_grad_rows_sum_to_zero(rng):
    h = rng.normal(size=(6, 3))
    rows = loss.client_head_grad_gamma(h, rng.integers(4, size=6), rng.normal(size=4),
                                       rng.normal(size=(4, 3)), per_sample=True)
    assert np.allclose(rows.sum(axis=1), 0.0, atol=1e-15)


def test_client_head_grads_match_fd(rng):
    h = rng.normal(size=(6, 3))
    ids = rng.integers(4, size=6)
    gamma, xi = rng.normal(size=4), rng.normal(size=(4, 3))

    def f():
        p = loss.client_probs(h, gamma, xi)
        return float(-np.mean(np.log(p[np.arange(6), ids])))

    assert rel_err(loss.client_head_grad_gamma(h, ids, gamma, xi), fd_grad(f, gamma)) < 1e-5
    assert rel_err(loss.client_head_grad_xi(h, ids, gamma, xi), fd_grad(f, xi)) < 1e-5


def test_loss_is_size_weighted_mean_of_client_losses():
    cfg, emb, heads, X, y, ids = random_setup(3, n=30)
    whole = loss.reweighted_loss(X, y, ids, emb, heads, cfg, 0.8)[0].total
    parts = 0.0
    for c in np.unique(ids):
        sel = ids == c
        parts += sel.mean() * loss.reweighted_loss(X[sel], y[sel], c, emb, heads, cfg, 0.8)[0].total
    assert abs(whole - parts) <= 1e-10 * abs(whole)


def test_label_permutation_equivariance():
    cfg, emb, heads, X, y, ids = random_setup(4, K=5)
    perm = np.array([3, 0, 4, 1, 2])
    inv = np.argsort(perm)
    ph = heads.copy()
    ph.alpha = [a[perm] for a in heads.alpha]
    ph.beta = [b[perm] for b in heads.beta]
    a = loss.reweighted_loss(X, y, ids, emb, heads, cfg, 0.8)[0]
    b = loss.reweighted_loss(X, inv[y], ids, emb, ph, cfg, 0.8)[0]
    assert abs(a.total - b.total) < 1e-14


def test_head_only_loss_matches_full_path():
    cfg, emb, heads, X, y, ids = random_setup(5)
    fcfg = net.NetConfig(cfg.input_dim, cfg.g_layers, cfg.h_layers, cfg.sharing, cfg.activation,
                         fixed_embedding=True)
    lb, mg = loss.reweighted_loss(X, y, ids, emb, heads, fcfg, 0.7, 0.1)
    g, h, _ = net.forward(X, emb, fcfg)
    lb2, hg = loss.head_only_loss(g, h, y, ids, heads, 0.7, 0.1)
    assert lb == lb2
    for k, v in mg.heads.named().items():
        assert np.array_equal(v, hg.named()[k])
