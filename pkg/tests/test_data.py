import struct

import numpy as np
import pytest

from dpjl.autodiff import Dense, Embedding, Model, SimpleRNN
from dpjl.data import DataError, Dataset, gen_synthetic, load_csv, load_idx
from dpjl.optim import TrainConfig, train


def write_idx(tmp_path, images, labels, image_magic=0x803, label_magic=0x801):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    ip, lp = tmp_path / "images.idx", tmp_path / "labels.idx"
    ip.write_bytes(struct.pack(">IIII", image_magic, *images.shape) + images.tobytes())
    lp.write_bytes(struct.pack(">II", label_magic, labels.size) + labels.tobytes())
    return ip, lp


def test_idx_fixture(tmp_path):
    images = np.array([[[0, 255, 1], [2, 3, 4], [5, 6, 7]],
                       [[255, 0, 128], [9, 10, 11], [12, 13, 14]]])
    ds = load_idx(*write_idx(tmp_path, images, [3, 7]))
    assert ds.x.shape == (2, 9) and ds.n_train == 2
    assert ds.y.tolist() == [3, 7] and ds.num_classes == 8
    assert ds.x[0, 1] == 1.0 and ds.x[0, 0] == 0.0 and ds.x[1, 0] == 1.0
    np.testing.assert_array_equal(ds.x, images.reshape(2, 9) / 255.0)


def test_idx_bytes_by_hand(tmp_path):
    (tmp_path / "i").write_bytes(bytes.fromhex("00000803 00000001 00000001 00000002 ff33".replace(" ", "")))
    (tmp_path / "l").write_bytes(bytes.fromhex("00000801 00000001 05".replace(" ", "")))
    ds = load_idx(tmp_path / "i", tmp_path / "l", num_classes=10)
    assert ds.x.tolist() == [[1.0, 0x33 / 255]] and ds.y.tolist() == [5] and ds.num_classes == 10


def test_idx_truncated(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1])
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(DataError, match="expected 34 bytes, got 33"):
        load_idx(ip, lp)


def test_idx_bad_magic_and_count_mismatch(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1], image_magic=0x801)
    with pytest.raises(DataError, match="magic"):
        load_idx(ip, lp)
    ip, lp = write_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1, 1])
    with pytest.raises(DataError, match="count mismatch"):
        load_idx(ip, lp)


def test_csv_fixture(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,b\n1.5,0,2\n-1,2,0.25\n3,1,4\n")
    ds = load_csv(p)
    assert ds.x.tolist() == [[1.5, 2.0], [-1.0, 0.25], [3.0, 4.0]]
    assert ds.y.tolist() == [0, 2, 1] and ds.num_classes == 3
    only_b = load_csv(p, feature_columns=["b"])
    assert only_b.x.tolist() == [[2.0], [0.25], [4.0]]


@pytest.mark.parametrize("body,match", [
    ("a,label\n1,0\n,1\n", "row 3, column 'a'"),
    ("a,label\n1,0\nx,1\n", "non-numeric"),
    ("a,label\n1,1.5\n", "not a nonnegative integer"),
    ("a,label\n1,-1\n", "not a nonnegative integer"),
    ("a,label\n1\n", "row 2 has 1 cells"),
    ("a,b\n1,2\n", "unknown label column"),
    ("", "empty"),
])
def test_csv_errors(tmp_path, body, match):
    p = tmp_path / "d.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=match):
        load_csv(p)


def test_csv_unknown_feature_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label\n1,0\n")
    with pytest.raises(DataError, match="feature"):
        load_csv(p, feature_columns=["z"])


@pytest.mark.parametrize("kind,params", [("classification-gaussians", {"num_classes": 4}),
                                         ("sequence-parity", {"min_length": 3})])
def test_synthetic_is_deterministic(kind, params):
    a = gen_synthetic(kind, 200, 7, params)
    b = gen_synthetic(kind, 200, 7, params)
    c = gen_synthetic(kind, 200, 8, params)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.x.tobytes() != c.x.tobytes()
    assert (a.n_train, a.n_test) == (160, 40)


def test_parity_layout():
    ds = gen_synthetic("sequence-parity", 500, 1, {"length": 6, "vocab": 5, "marked": 2, "min_length": 2})
    assert ds.is_tokens and ds.x.shape == (500, 6)
    assert ds.x.min() >= 0 and ds.x.max() < 5
    for row, label in zip(ds.x, ds.y):
        body = row[np.argmax(row != 0):]
        assert np.all(body != 0) and 2 <= body.size <= 6
        assert label == np.count_nonzero(row == 2) % 2


def test_wide_margin_is_separable():
    ds = gen_synthetic("classification-gaussians", 1000, 0, {"num_classes": 2, "margin": 10.0})
    res = train(TrainConfig("sgd", batch_size=32, epochs=10), Model([Dense(10, 2)], "softmax_ce", (10,)), ds)
    assert res.metrics[-1].train_acc >= 0.99 and res.metrics[-1].test_acc >= 0.99


def test_single_token_parity_beats_majority():
    ds = gen_synthetic("sequence-parity", 600, 2, {"length": 1, "vocab": 4})
    model = Model([Embedding(4, 4), SimpleRNN(4, 8), Dense(8, 2)], "softmax_ce", (1,))
    res = train(TrainConfig("adam", batch_size=32, epochs=30, learning_rate=0.05), model, ds)
    majority = max(np.mean(ds.test[1]), 1 - np.mean(ds.test[1]))
    assert res.metrics[-1].test_acc > majority
    assert res.metrics[-1].test_acc == 1.0


@pytest.mark.parametrize("kind,params", [("classification-gaussians", {"num_classes": 1}),
                                         ("sequence-parity", {"vocab": 2}),
                                         ("sequence-parity", {"min_length": 9}),
                                         ("classification-gaussians", {"colour": 1}),
                                         ("spirals", {})])
def test_synthetic_errors(kind, params):
    with pytest.raises(DataError):
        gen_synthetic(kind, 10, 0, params)


def test_dataset_helpers():
    x = np.arange(10.0).reshape(5, 2)
    ds = Dataset(x, np.array([0, 1, 0, 1, 1]), 2, 3)
    assert ds.subset(2, 1).x.tolist() == [[0, 1], [2, 3], [6, 7]]
    other = Dataset(np.zeros((2, 2)), np.array([1, 1]), 2, 2)
    merged = ds.with_test(other)
    assert merged.n_train == 3 and merged.n_test == 2
    with pytest.raises(DataError):
        Dataset(x, np.array([0, 1, 0, 1, 2]), 2, 5)
    with pytest.raises(DataError):
        Dataset(x, np.zeros(4, dtype=int), 2, 4)
