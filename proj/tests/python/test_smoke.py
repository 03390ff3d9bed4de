"""Smoke tests for the Python bindings."""

import math

import numpy as np
import pytest

import rebiaslab as rl


def test_version():
    assert rl.__version__


def test_rbf_gram_diagonal_and_range():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    gram = rl.rbf_gram(x, 1.0)
    assert gram.shape == (6, 6)
    assert np.allclose(np.diag(gram), 1.0)
    assert np.allclose(gram, gram.T)
    assert (gram > 0).all() and (gram <= 1).all()


def numpy_unbiased_hsic(K, L):
    n = K.shape[0]
    Kt = K - np.diag(np.diag(K))
    Lt = L - np.diag(np.diag(L))
    t1 = (Kt * Lt).sum()
    t2 = Kt.sum() * Lt.sum() / ((n - 1) * (n - 2))
    t3 = (Kt @ Lt).sum() * 2.0 / (n - 2)
    return (t1 + t2 - t3) / (n * (n - 3))


def test_hsic_against_numpy_reference():
    rng = np.random.default_rng(1)
    u = rng.normal(size=(8, 3))
    v = rng.normal(size=(8, 2))
    K = rl.rbf_gram(u, 0.9)
    L = rl.rbf_gram(v, 1.3)
    assert rl.hsic_unbiased(K, L) == pytest.approx(numpy_unbiased_hsic(K, L), abs=1e-12)
    got = rl.hsic_from_features(u, v, 0.9, 1.3, estimator="unbiased")
    assert got == pytest.approx(numpy_unbiased_hsic(K, L), abs=1e-12)

    # biased estimator via explicit centering
    H = np.eye(8) - np.ones((8, 8)) / 8
    want = np.trace(K @ H @ L @ H) / 64.0
    assert rl.hsic_biased(K, L) == pytest.approx(want, abs=1e-12)


def test_hsic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    u = rng.normal(size=(6, 2))
    v = rng.normal(size=(6, 2))
    value, dU, _ = rl.hsic_grad(u, v, 1.0, 1.0)
    eps = 1e-6
    up = u.copy()
    up[2, 1] += eps
    um = u.copy()
    um[2, 1] -= eps
    num = (rl.hsic_from_features(up, v) - rl.hsic_from_features(um, v)) / (2 * eps)
    assert dU[2, 1] == pytest.approx(num, abs=1e-8)
    assert value == pytest.approx(rl.hsic_from_features(u, v), abs=1e-15)


def test_median_sigma():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert rl.median_sigma(x, 1.0, seed=0) == pytest.approx(5.0)
    same = np.ones((5, 2))
    assert rl.median_sigma(same, 1.0, seed=0) == 1e-6


def test_forward_shapes_and_zero_model():
    spec = rl.default_f_spec()
    model = rl.Model.zeros(spec)
    batch = np.random.default_rng(3).random((5, 3, 28, 28), dtype=np.float32)
    feats, logits = model.forward(batch)
    assert feats.shape == (5, spec.feature_dim)
    assert logits.shape == (5, 10)
    assert (logits == 0).all()
    assert rl.cross_entropy(logits, [1, 2, 3, 4, 5]) == pytest.approx(math.log(10.0))


def test_forward_determinism_and_checkpoint(tmp_path):
    spec = rl.default_g_spec()
    model = rl.Model(spec, seed=7)
    batch = np.random.default_rng(4).random((3, 3, 28, 28), dtype=np.float32)
    f1, l1 = model.forward(batch)
    f2, l2 = model.forward(batch)
    assert (f1 == f2).all() and (l1 == l2).all()

    path = str(tmp_path / "model.ckpt")
    model.save(path)
    back = rl.Model.load(path)
    f3, l3 = back.forward(batch)
    assert (f3 == f1).all() and (l3 == l1).all()


def test_dataset_properties():
    ds = rl.build_biased_dataset(rho=1.0, seed=5, count=200)
    assert ds["images"].shape == (200, 3, 28, 28)
    assert (ds["digit_labels"] == ds["color_labels"]).all()

    again = rl.build_biased_dataset(rho=1.0, seed=5, count=200)
    assert again["checksum"] == ds["checksum"]

    audit = rl.bias_audit(ds["digit_labels"], ds["color_labels"])
    assert audit["mutual_information_nats"] == pytest.approx(math.log(10.0), abs=1e-9)

    near = rl.build_biased_dataset(rho=0.1, seed=6, count=5000)
    audit = rl.bias_audit(near["digit_labels"], near["color_labels"])
    assert audit["mutual_information_nats"] < 0.05


def test_palette():
    pal = rl.default_palette()
    assert pal.shape == (10, 3)
    assert len({tuple(row) for row in pal}) == 10


def test_lr_schedule_exact():
    assert rl.lr_schedule(1e-3, 0.1, 20, 0) == 1e-3
    assert rl.lr_schedule(1e-3, 0.1, 20, 20) == 1e-4
    assert rl.lr_schedule(1e-3, 0.1, 20, 79) == 1e-6


def test_kmeans_groups_blobs():
    rng = np.random.default_rng(8)
    pts = np.concatenate([rng.normal(loc=c * 10, scale=0.1, size=(15, 2)) for c in range(3)])
    labels = rl.kmeans([list(p) for p in pts], 3, seed=1)
    for blob in range(3):
        chunk = labels[blob * 15:(blob + 1) * 15]
        assert len(set(chunk)) == 1


def test_train_run_smoke():
    out = rl.train_run("vanilla", rho=1.0, epochs=3, batch_size=25, train_count=100,
                       val_count=100, seed=1)
    assert len(out["loss_f"]) == 3
    assert out["loss_f"][-1] < out["loss_f"][0]
    assert not out["diverged"]
    assert 0.0 <= out["biased_accuracy"] <= 100.0

    again = rl.train_run("vanilla", rho=1.0, epochs=3, batch_size=25, train_count=100,
                         val_count=100, seed=1)
    assert again["loss_f"] == out["loss_f"]
    assert again["unbiased_accuracy"] == out["unbiased_accuracy"]


def test_train_run_rebias_smoke():
    out = rl.train_run("rebias", rho=1.0, epochs=2, batch_size=25, train_count=100,
                       val_count=100, seed=2)
    assert len(out["hsic"]) == 2
    assert not math.isnan(out["hsic"][0])
    assert not out["diverged"]
