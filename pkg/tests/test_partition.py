import colorsys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feddrm import el, partition as P
from feddrm.errors import DataError, PartitionError


def labels_10x(n_per=100, K=10):
    return np.repeat(np.arange(K), n_per)


def test_dirichlet_single_client():
    assert np.all(P.dirichlet_partition(labels_10x(5), 1, 0.3, 0) == 0)


def test_dirichlet_proportions_sum_to_one():
    _, props = P.dirichlet_partition(labels_10x(), 8, 0.3, 0, return_proportions=True)
    assert len(props) == 10
    for q in props.values():
        assert abs(q.sum() - 1.0) < 1e-12


def test_dirichlet_matches_reference_stream():
    y = labels_10x()
    assign = P.dirichlet_partition(y, 8, 0.3, 0)
    # re-run the documented draw order by hand on a fresh stream
    rng = np.random.default_rng(0)
    while True:
        ref = np.empty(y.size, dtype=int)
        for k in range(10):
            idx = np.flatnonzero(y == k)
            q = rng.dirichlet(np.full(8, 0.3))
            u = rng.random(idx.size)
            ref[idx] = [min(int(np.sum(np.cumsum(q) <= v)), 7) for v in u]
        if np.bincount(ref, minlength=8).min() > 0:
            break
    assert np.array_equal(assign, ref)
    assert np.array_equal(np.bincount(assign, minlength=8), np.bincount(ref, minlength=8))


def test_dirichlet_retries_exhausted():
    with pytest.raises(PartitionError):
        P.dirichlet_partition(np.zeros(2, dtype=int), 2, 1e-4, 0)
    with pytest.raises(PartitionError):
        P.dirichlet_partition(np.zeros(1, dtype=int), 2, 1.0, 0)


def test_dirichlet_is_complete_partition():
    y = labels_10x(20)
    a = P.dirichlet_partition(y, 4, 0.5, 3)
    assert a.shape == y.shape and set(np.unique(a)) == set(range(4))


def test_shards_equal_and_label_bounded():
    y = labels_10x(10)
    a = P.shard_partition(y, 2, 5, 0)
    assert np.bincount(a).tolist() == [50, 50]
    for c in range(2):
        assert np.unique(y[a == c]).size <= 5


def test_shards_match_reference_permutation():
    y = np.array([2, 0, 1, 1, 0, 2, 2, 0, 1, 1])
    # counts (3, 4, 3): size 2 gives 1 + 2 + 1 = 4 shards, size 3 only 3
    a = P.shard_partition(y, 2, 2, 0)
    shards = [[1, 4], [2, 3], [8, 9], [0, 5]]
    perm = np.random.default_rng(0).permutation(4)
    ref = np.full(10, -1)
    for c in range(2):
        for s in perm[2 * c:2 * c + 2]:
            ref[shards[s]] = c
    assert np.array_equal(a, ref)


def test_shards_stay_label_homogeneous_with_uneven_classes():
    y = np.random.default_rng(3).integers(10, size=3000)
    for m, S in [(5, 2), (7, 3), (20, 2)]:
        a = P.shard_partition(y, m, S, m)
        sizes = np.bincount(a[a >= 0], minlength=m)
        assert np.all(sizes == sizes[0])
        for c in range(m):
            assert np.unique(y[a == c]).size <= S


def test_shards_trim_and_errors():
    y = labels_10x(10)[:97]
    a = P.shard_partition(y, 3, 2, 1)
    # classes 0..8 hold 10 samples, class 9 holds 7: six shards of 10
    assert np.sum(a == -1) == 97 - 60
    with pytest.raises(PartitionError):
        P.shard_partition(np.arange(5), 3, 2, 0)


@given(st.integers(1, 500), st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_split_sizes_within_one_sample(n, seed):
    tr, te = P.train_test_split(n, seed)
    assert abs(tr.size - 0.7 * n) < 1 and abs(te.size - 0.3 * n) < 1
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(n))


def test_split_is_seeded():
    a = P.train_test_split(50, 4)
    b = P.train_test_split(50, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_split_clients_union_is_input():
    r = np.random.default_rng(0)
    X, y = r.normal(size=(60, 2)), r.integers(3, size=60)
    assign = P.dirichlet_partition(y, 3, 1.0, 0)
    train, test, tags = P.split_clients(X, y, assign, 3, 0)
    assert sum(d.n for d in train + test) == 60
    rows = np.vstack([d.X for d in train + test])
    assert np.array_equal(np.sort(rows, axis=0), np.sort(X, axis=0))
    assert set(tags) == {"train", "test"}


def test_presets_expand_to_grids():
    g = P.ShiftSpec.grid("low")
    assert len(g) == 8
    assert {s.gamma for s in g} == {0.9, 1.1}
    assert {s.hue for s in g} == {-0.01, 0.01}
    assert {s.saturation for s in g} == {0.9, 1.1}
    assert {s.saturation for s in P.ShiftSpec.grid("high")} == {0.5, 1.5}
    assert [s.gamma for s in P.ShiftSpec.for_clients("mid", 10)][8:] == [0.75, 0.75]


def random_images(seed, n=4, c=3, hw=5):
    return np.random.default_rng(seed).integers(0, 256, size=(n, c, hw, hw), dtype=np.uint8)


def test_identity_shift():
    im = random_images(0)
    assert np.array_equal(P.apply_covariate_shift(im, P.ShiftSpec()), im)


def test_zero_saturation_is_gray():
    out = P.apply_covariate_shift(random_images(1), P.ShiftSpec(saturation=0.0, hue=0.2))
    assert np.array_equal(out[:, 0], out[:, 1]) and np.array_equal(out[:, 1], out[:, 2])


@pytest.mark.parametrize("gamma", [0.5, 1.4, 3.0])
def test_gamma_fixed_points(gamma):
    im = np.zeros((1, 3, 2, 2), dtype=np.uint8)
    im[..., 1] = 255
    assert np.array_equal(P.apply_covariate_shift(im, P.ShiftSpec(gamma=gamma)), im)


def test_hue_needs_three_channels():
    with pytest.raises(DataError):
        P.apply_covariate_shift(random_images(0, c=1), P.ShiftSpec(hue=0.1))
    P.apply_covariate_shift(random_images(0, c=1), P.ShiftSpec(gamma=2.0))


def test_hsv_matches_colorsys():
    rgb = np.random.default_rng(5).random((200, 3))
    rgb[:5] = [[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5], [1, 0, 0], [0, 1, 1]]
    ours = P.rgb_to_hsv(rgb)
    ref = np.array([colorsys.rgb_to_hsv(*px) for px in rgb])
    assert np.allclose(ours, ref, atol=1e-12)
    assert np.allclose(P.hsv_to_rgb(ours), rgb, atol=1e-12)


def test_shift_is_label_free_and_per_sample():
    im = random_images(2, n=6)
    spec = P.ShiftSpec(1.2, 0.05, 0.8)
    whole = P.apply_covariate_shift(im, spec)
    parts = np.concatenate([P.apply_covariate_shift(im[i:i + 1], spec) for i in range(6)])
    assert np.array_equal(whole, parts)


def test_iid_generator_when_tilts_vanish():
    spec = P.SynthSpec(np.zeros((3, 2)), [np.zeros(2)], [np.zeros((2, 2))], [4000] * 3, seed=0)
    ds, truth = P.synth_drm_generate(spec)
    assert np.all(truth["gamma"] == 0)
    for d in ds:
        assert np.all(np.abs(d.X.mean(axis=0)) < 4 * np.sqrt(2) / np.sqrt(4000))


def test_tilt_normaliser_integrates_to_one():
    xi = np.array([[0.7, -0.3]])
    spec = P.SynthSpec(xi, [np.zeros(2)], [np.zeros((2, 2))], [1])
    # Gaussian MGF: E exp(xi . Z) = exp(||xi||^2 / 2)
    assert abs(np.exp(spec.gamma[0] + 0.5 * np.sum(xi ** 2)) - 1.0) < 1e-15
    z = np.random.default_rng(0).standard_normal((400_000, 2))
    assert abs(np.mean(np.exp(spec.gamma[0] + z @ xi[0])) - 1.0) < 0.01


def test_client_means_concentrate():
    spec = P.separated_gaussian_spec(n=2000, seed=1)
    ds, _ = P.synth_drm_generate(spec)
    for d, xi in zip(ds, spec.xi):
        assert np.all(np.abs(d.X.mean(axis=0) - xi) < 4 * np.sqrt(2) / np.sqrt(2000))


def test_separated_spec_distance():
    xi = P.separated_gaussian_spec().xi
    d = np.linalg.norm(xi[:, None] - xi[None], axis=2)
    assert d[np.triu_indices(3, 1)].min() >= 6 - 1e-12


def test_generator_log_ratio_is_the_tilt():
    spec = P.SynthSpec(np.array([[1.3]]), [np.zeros(2)], [np.zeros((2, 1))], [50])
    x = P.synth_drm_generate(spec)[0][0].X[:, 0]
    th = el.tilt_basis_check("normal", (1.3, 1.0), (0.0, 1.0))
    assert np.allclose(th[0] + th[1] * x + th[2] * x ** 2, spec.gamma[0] + 1.3 * x, atol=1e-14)


def test_generator_per_client_streams_are_independent_of_order():
    spec = P.separated_gaussian_spec(n=50, seed=3)
    a, _ = P.synth_drm_generate(spec)
    b, _ = P.synth_drm_generate(spec)
    assert all(np.array_equal(x.X, y.X) and np.array_equal(x.y, y.y) for x, y in zip(a, b))


def test_theory_generator_uniform_clients():
    spec = P.theory_spec(m=4, N=8000, seed=2, zero_client_head=True)
    _, _, client, _ = P.synth_theory_generate(spec)
    share = np.bincount(client, minlength=4) / 8000
    assert np.all(np.abs(share - 0.25) < 3 * np.sqrt(0.25 * 0.75 / 8000))


def test_theory_generator_follows_intercepts():
    spec = P.theory_spec(m=2, N=20000, seed=1, zero_client_head=True)
    spec.gamma = np.array([2.0, -2.0])
    _, _, client, _ = P.synth_theory_generate(spec)
    target = 1 / (1 + np.exp(-4.0))
    assert abs(np.mean(client == 0) - target) < 4 * np.sqrt(target * (1 - target) / 20000)


def test_theory_generator_deterministic():
    spec = P.theory_spec(seed=5, N=300)
    a = P.synth_theory_generate(spec)
    b = P.synth_theory_generate(spec)
    assert all(np.array_equal(x, y) for x, y in zip(a[:3], b[:3]))


def test_csv_roundtrip(tmp_path):
    r = np.random.default_rng(0)
    X, y = r.normal(size=(5, 3)), r.integers(4, size=5)
    P.write_csv_dataset(tmp_path / "d.csv", X, y, ["hello"])
    X2, y2 = P.read_csv_dataset(tmp_path / "d.csv")
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
    (tmp_path / "bad.csv").write_text("1.0,0.5\n2.0,-1\n")
    with pytest.raises(DataError):
        P.read_csv_dataset(tmp_path / "bad.csv")


def test_image_roundtrip(tmp_path):
    im = random_images(3, n=2, c=3, hw=4)
    P.write_images(tmp_path / "x.fdrm", im)
    raw = (tmp_path / "x.fdrm").read_bytes()
    assert raw[:4] == b"FDRM" and len(raw) == 20 + im.size
    assert np.array_equal(P.read_images(tmp_path / "x.fdrm"), im)
    (tmp_path / "bad.fdrm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        P.read_images(tmp_path / "bad.fdrm")
    (tmp_path / "short.fdrm").write_bytes(raw[:-1])
    with pytest.raises(DataError):
        P.read_images(tmp_path / "short.fdrm")


def test_partition_csv_roundtrip(tmp_path):
    a = np.array([0, 2, 1, -1])
    tags = np.array(["train", "test", "train", "dropped"], dtype=object)
    P.write_partition_csv(tmp_path / "p.csv", a, tags, ["h"])
    a2, t2 = P.read_partition_csv(tmp_path / "p.csv")
    assert np.array_equal(a, a2) and list(t2) == list(tags)


def test_client_dataset_validation():
    with pytest.raises(DataError):
        P.ClientDataset(0, np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(DataError):
        P.ClientDataset(0, np.zeros((2, 2)), np.zeros(3))
    d = P.ClientDataset(1, np.zeros((2, 2)), np.zeros(2))
    assert d.ids.tolist() == [1, 1]
