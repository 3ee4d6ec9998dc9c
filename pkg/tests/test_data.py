import numpy as np
import pytest

from prunesearch import data as D


def test_spec_validation():
    with pytest.raises(ValueError, match="generator"):
        D.SyntheticDatasetSpec(generator="mnist")
    with pytest.raises(ValueError, match="divisible"):
        D.SyntheticDatasetSpec(n_train=1000, classes=3)


def test_class_balance():
    ds = D.generate(D.SyntheticDatasetSpec(n_train=4000, n_eval=400, classes=4))
    assert np.array_equal(np.bincount(ds.train_y), [1000] * 4)
    assert np.array_equal(np.bincount(ds.eval_y), [100] * 4)


def test_bitwise_deterministic_regeneration():
    spec = D.SyntheticDatasetSpec(seed=123)
    a, b = D.generate(spec), D.generate(spec)
    assert np.array_equal(a.train_x, b.train_x)
    assert np.array_equal(a.train_y, b.train_y)
    assert np.array_equal(a.eval_x, b.eval_x)


def test_train_eval_disjoint_streams():
    ds = D.generate(D.SyntheticDatasetSpec())
    assert not np.array_equal(ds.train_x[: len(ds.eval_x)], ds.eval_x)


def test_both_generators_produce_shapes():
    for gen in D.GENERATORS:
        ds = D.generate(D.SyntheticDatasetSpec(n_train=64, n_eval=32, generator=gen))
        assert ds.train_x.shape == (64, 1, 32, 32)
        assert ds.train_x.dtype == np.float64


def _linear_probe_accuracy(x, y, x_te, y_te):
    # least-squares one-vs-all on raw pixels
    flat = x.reshape(len(x), -1)
    onehot = np.eye(y.max() + 1)[y]
    w, *_ = np.linalg.lstsq(np.c_[flat, np.ones(len(flat))], onehot, rcond=None)
    pred = np.c_[x_te.reshape(len(x_te), -1), np.ones(len(x_te))] @ w
    return (pred.argmax(axis=1) == y_te).mean()


def test_blobs_linearly_separable():
    ds = D.generate(D.SyntheticDatasetSpec(n_train=1024, n_eval=512))
    acc = _linear_probe_accuracy(ds.train_x, ds.train_y, ds.eval_x, ds.eval_y)
    assert acc > 0.8


def test_stripes_linearly_separable():
    ds = D.generate(D.SyntheticDatasetSpec(n_train=1024, n_eval=512,
                                           generator="striped-textures"))
    acc = _linear_probe_accuracy(ds.train_x, ds.train_y, ds.eval_x, ds.eval_y)
    assert acc > 0.8


def test_save_load_roundtrip(tmp_path):
    ds = D.generate(D.SyntheticDatasetSpec(n_train=64, n_eval=32))
    D.save_dataset(ds, tmp_path)
    loaded = D.load_dataset(tmp_path)
    assert np.array_equal(loaded.train_x, ds.train_x)
    assert np.array_equal(loaded.eval_y, ds.eval_y)
    assert loaded.spec == ds.spec


def test_saved_files_bitwise_stable(tmp_path):
    spec = D.SyntheticDatasetSpec(n_train=64, n_eval=32, seed=5)
    D.save_dataset(D.generate(spec), tmp_path / "a")
    D.save_dataset(D.generate(spec), tmp_path / "b")
    for name in ("train_images.bin", "train_labels.bin", "eval_images.bin",
                 "eval_labels.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
