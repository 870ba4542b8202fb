import struct

import numpy as np
import pytest

from dcprune.data import (
    CIFAR_MEAN,
    CIFAR_RECORD,
    CIFAR_STD,
    CheckpointError,
    DataError,
    Dataset,
    load_checkpoint,
    load_cifar10,
    make_synthetic,
    read_cifar_file,
    sample_subset,
    save_checkpoint,
)
from dcprune.network import apply_mask, build_architecture, compact, count_params, forward, prunable_layers
from dcprune.tensor import Tensor


def write_batch(path, n, seed, label_max=10):
    rng = np.random.default_rng(seed)
    rec = rng.integers(0, 256, size=(n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, label_max, size=n)
    rec.tofile(path)
    return rec


@pytest.fixture
def cifar_dir(tmp_path):
    for i in range(1, 6):
        write_batch(tmp_path / f"data_batch_{i}.bin", 10_000, i)
    write_batch(tmp_path / "test_batch.bin", 10_000, 0)
    return tmp_path


def test_cifar_sizes_and_byte_offsets(cifar_dir):
    train = load_cifar10(cifar_dir, "train", normalize=False)
    test = load_cifar10(cifar_dir, "test", normalize=False)
    assert len(train) == 50_000 and len(test) == 10_000
    raw = np.fromfile(cifar_dir / "test_batch.bin", dtype=np.uint8)
    rng = np.random.default_rng(5)
    for _ in range(200):
        r, c, h, w = rng.integers(10_000), rng.integers(3), rng.integers(32), rng.integers(32)
        byte = raw[r * 3073 + 1 + c * 1024 + h * 32 + w]
        assert test.images[r, c, h, w] == byte / 255.0
        assert test.labels[r] == raw[r * 3073]


def test_cifar_normalization_and_determinism(cifar_dir):
    a = load_cifar10(cifar_dir, "test")
    b = load_cifar10(cifar_dir, "test")
    np.testing.assert_array_equal(a.images, b.images)
    raw = load_cifar10(cifar_dir, "test", normalize=False)
    ref = (raw.images - np.array(CIFAR_MEAN)[None, :, None, None]) / np.array(CIFAR_STD)[None, :, None, None]
    np.testing.assert_allclose(a.images, ref, rtol=1e-15)
    np.testing.assert_array_equal(a.mean, CIFAR_MEAN)


def test_cifar_all_255_record(tmp_path):
    rec = np.full((1, CIFAR_RECORD), 255, dtype=np.uint8)
    rec[0, 0] = 3
    rec.tofile(tmp_path / "one.bin")
    images, labels = read_cifar_file(tmp_path / "one.bin", strict=False)
    assert labels[0] == 3
    assert np.all(images.astype(float) / 255.0 == 1.0)


def test_cifar_diagnostics(tmp_path, monkeypatch):
    monkeypatch.delenv("DCP_DATA_DIR", raising=False)
    with pytest.raises(DataError, match="missing"):
        load_cifar10(tmp_path, "test")
    (tmp_path / "test_batch.bin").write_bytes(b"\0" * 100)
    with pytest.raises(DataError, match="bad file size"):
        load_cifar10(tmp_path, "test")
    write_batch(tmp_path / "test_batch.bin", 10_000, 0, label_max=11)
    with pytest.raises(DataError, match="label byte"):
        load_cifar10(tmp_path, "test")


def test_data_dir_env_override(cifar_dir, monkeypatch, tmp_path_factory):
    monkeypatch.setenv("DCP_DATA_DIR", str(cifar_dir))
    empty = tmp_path_factory.mktemp("empty")
    assert len(load_cifar10(empty, "test")) == 10_000


def test_synthetic_determinism_and_shared_structure():
    a = make_synthetic("informative-channel", 50, 3, (6, 4, 4), seed=7, informative=2)
    b = make_synthetic("informative-channel", 50, 3, (6, 4, 4), seed=7, informative=2)
    np.testing.assert_array_equal(a.images, b.images)
    test = make_synthetic("informative-channel", 50, 3, (6, 4, 4), seed=7, split="test", informative=2)
    np.testing.assert_array_equal(a.informative, test.informative)
    assert not np.array_equal(a.images, test.images)


def _least_squares_error(train: Dataset, test: Dataset) -> float:
    x = train.images.reshape(len(train), -1)
    y = np.eye(train.num_classes)[train.labels]
    coef, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], y, rcond=None)
    xt = test.images.reshape(len(test), -1)
    pred = (np.c_[xt, np.ones(len(xt))] @ coef).argmax(axis=1)
    return float(np.mean(pred != test.labels))


def test_gaussian_blobs_linearly_separable():
    train = make_synthetic("gaussian-blobs", 600, 4, (3, 4, 4), seed=1, signal=1.0)
    test = make_synthetic("gaussian-blobs", 600, 4, (3, 4, 4), seed=1, split="test", signal=1.0)
    assert _least_squares_error(train, test) < 0.05


def test_informative_channels_carry_all_signal():
    kw = dict(informative=3, signal=0.5)
    train = make_synthetic("informative-channel", 2000, 4, (8, 4, 4), seed=2, **kw)
    test = make_synthetic("informative-channel", 2000, 4, (8, 4, 4), seed=2, split="test", **kw)

    def channel_means(ds, keep):
        f = ds.images.mean(axis=(2, 3))[:, keep]
        return Dataset(f[:, :, None, None], ds.labels, ds.num_classes, ds.split)

    all_ch = np.arange(8)
    full = _least_squares_error(channel_means(train, all_ch), channel_means(test, all_ch))
    informative = _least_squares_error(channel_means(train, train.informative),
                                       channel_means(test, train.informative))
    noise_only = np.setdiff1d(all_ch, train.informative)
    blind = _least_squares_error(channel_means(train, noise_only), channel_means(test, noise_only))
    assert informative <= full + 0.01
    assert blind > 0.6  # chance is 0.75


def test_sample_subset_properties():
    ds = make_synthetic("gaussian-blobs", 103, 4, (1, 2, 2), seed=0)
    sub = sample_subset(ds, 50, seed=3)
    counts = np.bincount(sub.labels, minlength=4)
    assert counts.sum() == 50 and counts.max() - counts.min() <= 1
    full = sample_subset(ds, 103, seed=1)
    assert sorted(map(tuple, full.images.reshape(103, -1))) == sorted(map(tuple, ds.images.reshape(103, -1)))
    again = sample_subset(ds, 50, seed=3)
    np.testing.assert_array_equal(sub.images, again.images)
    keys = {sample_subset(ds, 20, seed=s).images.tobytes() for s in range(100)}
    assert len(keys) == 100
    with pytest.raises(DataError):
        sample_subset(ds, 104)


def _pruned_toy(seed=0):
    net = build_architecture("toy-cnn", 4, seed=seed)
    rng = np.random.default_rng(seed)
    for node in net.nodes:
        if node.kind == "bn":
            node.buffers["running_mean"][:] = rng.normal(size=node.buffers["running_mean"].shape)
    for l in prunable_layers(net, include_input=True):
        c = net.nodes[l].weight.shape[1]
        net = apply_mask(net, l, rng.choice(c, size=c - 1, replace=False))
    net.meta["epoch"] = 7
    return net


@pytest.mark.parametrize("do_compact", [False, True])
def test_checkpoint_round_trip_bit_exact(tmp_path, do_compact):
    net = _pruned_toy()
    if do_compact:
        net = compact(net)
    path = save_checkpoint(net, tmp_path / "m.ckpt", {"seed": 0})
    back = load_checkpoint(path)
    assert back.meta["epoch"] == 7 and back.arch == net.arch
    for a, b in zip(net.nodes, back.nodes):
        assert a.kind == b.kind and a.name == b.name and a.inputs == b.inputs
        for key in a.params:
            assert a.params[key].data.tobytes() == b.params[key].data.tobytes()
        for key in a.buffers:
            assert a.buffers[key].tobytes() == b.buffers[key].tobytes()
        if a.kind == "conv":
            np.testing.assert_array_equal(a.input_mask, b.input_mask)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 3, 8, 8)))
    assert forward(net, x).data.tobytes() == forward(back, x).data.tobytes()
    assert count_params(back) == count_params(net)
    save_checkpoint(back, tmp_path / "again.ckpt", {"seed": 0})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    assert (tmp_path / "m.ckpt.json").exists()


def test_checkpoint_corruption_diagnostics(tmp_path):
    path = save_checkpoint(_pruned_toy(), tmp_path / "m.ckpt")
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(blob[:-16] + struct.pack("<Q", len(blob) + 1) + blob[-8:])
    with pytest.raises(CheckpointError, match="length"):
        load_checkpoint(bad)
