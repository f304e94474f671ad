import gzip
import struct

import numpy as np
import pytest

from snapens import data
from snapens.data import Batcher, DataFormatError, Sampling

MNIST_TRAIN_COUNTS = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
MNIST_TEST_COUNTS = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]


def idx_images(pixels, magic=0x803, count=None, rows=None, cols=None):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, r, c = pixels.shape
    header = struct.pack(">IIII", magic, n if count is None else count, r if rows is None else rows,
                         c if cols is None else cols)
    return header + pixels.tobytes()


def idx_labels(labels, magic=0x801, count=None):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", magic, len(labels) if count is None else count) + labels.tobytes()


def write_mnist(directory, n_train=3, n_test=2, size=28, gz=False):
    rng = np.random.default_rng(0)
    directory.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        img_name, lbl_name = data.MNIST_FILES[split]
        blobs = {img_name: idx_images(rng.integers(0, 256, (n, size, size))),
                 lbl_name: idx_labels(rng.integers(0, 10, n))}
        for name, blob in blobs.items():
            if gz:
                (directory / (name + ".gz")).write_bytes(gzip.compress(blob))
            else:
                (directory / name).write_bytes(blob)
    return directory


def cifar_record(label, pixels):
    return bytes([label]) + np.asarray(pixels, dtype=np.uint8).tobytes()


def write_cifar(directory, per_file=2):
    rng = np.random.default_rng(1)
    directory.mkdir(parents=True, exist_ok=True)
    for name in data.CIFAR_TRAIN_FILES + [data.CIFAR_TEST_FILE]:
        recs = b"".join(cifar_record(int(rng.integers(10)), rng.integers(0, 256, 3072)) for _ in range(per_file))
        (directory / name).write_bytes(recs)
    return directory


# --- IDX ------------------------------------------------------------------------

def test_idx_pixel_scaling():
    pixels = np.zeros((2, 28, 28), np.uint8)
    pixels[0, 0, 0] = 255
    pixels[1, 5, 7] = 51
    images = data.parse_idx_images(idx_images(pixels))
    assert images.shape == (2, 1, 28, 28) and images.dtype == np.float32
    assert images[0, 0, 0, 0] == 1.0 and images[1, 0, 5, 7] == pytest.approx(0.2)


def test_idx_labels_roundtrip():
    assert data.parse_idx_labels(idx_labels([3, 0, 9])).tolist() == [3, 0, 9]


def test_label_magic_passed_as_images_rejected():
    with pytest.raises(DataFormatError, match="magic"):
        data.parse_idx_images(idx_images(np.zeros((2, 28, 28)), magic=0x801))


def test_image_magic_passed_as_labels_rejected():
    with pytest.raises(DataFormatError, match="magic"):
        data.parse_idx_labels(idx_labels([1, 2], magic=0x803))


@pytest.mark.parametrize("kwargs", [dict(count=3), dict(rows=27), dict(cols=29)])
def test_idx_image_header_payload_mismatch(kwargs):
    with pytest.raises(DataFormatError, match="count"):
        data.parse_idx_images(idx_images(np.zeros((2, 28, 28)), **kwargs))


def test_idx_truncated_header():
    with pytest.raises(DataFormatError, match="short"):
        data.parse_idx_images(b"\x00\x00\x08\x03")
    with pytest.raises(DataFormatError, match="short"):
        data.parse_idx_labels(b"\x00")


def test_idx_label_count_mismatch():
    with pytest.raises(DataFormatError, match="count"):
        data.parse_idx_labels(idx_labels([1, 2, 3], count=4))


def test_idx_label_out_of_range():
    with pytest.raises(DataFormatError, match="label"):
        data.parse_idx_labels(idx_labels([1, 10]))


def test_load_mnist_synthetic(tmp_path):
    train, test = data.load_mnist(write_mnist(tmp_path))
    assert train.images.shape == (3, 1, 28, 28) and len(test) == 2
    assert train.split is data.Split.TRAIN and test.split is data.Split.TEST
    assert 0 <= train.images.min() and train.images.max() <= 1


def test_load_mnist_gzip_matches_raw(tmp_path):
    raw = data.load_mnist(write_mnist(tmp_path / "raw"))
    gz = data.load_mnist(write_mnist(tmp_path / "gz", gz=True))
    for a, b in zip(raw, gz):
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_load_mnist_rejects_wrong_dims(tmp_path):
    with pytest.raises(DataFormatError, match="28x28"):
        data.load_mnist(write_mnist(tmp_path, size=27))


def test_load_mnist_rejects_count_disagreement(tmp_path):
    write_mnist(tmp_path)
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(idx_labels([1, 2]))
    with pytest.raises(DataFormatError, match="3 images but 2 labels"):
        data.load_mnist(tmp_path)


def test_load_mnist_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_mnist(tmp_path)


def test_loading_is_idempotent(tmp_path):
    write_mnist(tmp_path)
    a, b = data.load_mnist(tmp_path), data.load_mnist(tmp_path)
    assert all(np.array_equal(x.images, y.images) and np.array_equal(x.labels, y.labels) for x, y in zip(a, b))


# --- CIFAR ----------------------------------------------------------------------

def test_cifar_single_record():
    pixels = np.arange(3072) % 256
    images, labels = data.parse_cifar_batch(cifar_record(7, pixels))
    assert images.shape == (1, 3, 32, 32) and labels.tolist() == [7]
    # channel-major: the first 1024 bytes are the red plane
    assert images[0, 1, 0, 0] * 255 == pytest.approx(1024 % 256)
    assert images[0, 0, 0, 5] * 255 == pytest.approx(5)


def test_cifar_all_ff_record():
    images, _ = data.parse_cifar_batch(cifar_record(0, np.full(3072, 255)))
    assert np.all(images == 1.0)


@pytest.mark.parametrize("length", [0, 3072, 3074, 2 * 3073 - 1])
def test_cifar_bad_length(length):
    with pytest.raises(DataFormatError, match="3073"):
        data.parse_cifar_batch(bytes(length))


def test_cifar_label_out_of_range():
    with pytest.raises(DataFormatError, match="label"):
        data.parse_cifar_batch(cifar_record(10, np.zeros(3072)))


@pytest.mark.parametrize("nested", [False, True])
def test_load_cifar_synthetic(tmp_path, nested):
    write_cifar(tmp_path / "cifar-10-batches-bin" if nested else tmp_path)
    train, test = data.load_cifar10(tmp_path)
    assert train.images.shape == (10, 3, 32, 32) and test.images.shape == (2, 3, 32, 32)


def test_load_dataset_requires_directory(monkeypatch):
    monkeypatch.delenv(data.MNIST_ENV, raising=False)
    with pytest.raises(FileNotFoundError, match=data.MNIST_ENV):
        data.load_dataset("mnist")
    with pytest.raises(ValueError):
        data.load_dataset("svhn", "/nowhere")


def test_load_dataset_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(data.CIFAR10_ENV, str(write_cifar(tmp_path)))
    assert len(data.load_dataset("cifar10")[0]) == 10


# --- batching -------------------------------------------------------------------

def test_shuffle_partition():
    batches = list(Batcher(3, seed=0).epoch(10))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_batcher_deterministic():
    for mode in Sampling:
        a = [b.tolist() for _ in range(2) for b in Batcher(4, mode, seed=3).epoch(11)]
        b = [b.tolist() for _ in range(2) for b in Batcher(4, mode, seed=3).epoch(11)]
        assert a == b
    assert [b.tolist() for b in Batcher(4, seed=3).epoch(11)] != [b.tolist() for b in Batcher(4, seed=4).epoch(11)]


def test_batch_larger_than_dataset_rejected():
    with pytest.raises(ValueError):
        list(Batcher(11).epoch(10))
    assert len(list(Batcher(11, Sampling.BOOTSTRAP).epoch(10))) == 1


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        list(Batcher(1, Sampling.BOOTSTRAP).epoch(0))


def test_bootstrap_frequencies():
    batcher = Batcher(10_000, Sampling.BOOTSTRAP, seed=0)
    counts = np.bincount(next(batcher.epoch(4)), minlength=4)
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma)


def test_next_batch_walks_epochs():
    ds = data.Dataset(np.zeros((5, 1, 2, 2), np.float32), np.arange(5), data.Split.TRAIN)
    batcher = Batcher(2, seed=1)
    seen = [batcher.next_batch(ds)[1] for _ in range(6)]
    assert [len(s) for s in seen] == [2, 2, 1, 2, 2, 1]
    assert sorted(np.concatenate(seen[:3]).tolist()) == list(range(5))


def test_sampling_parse():
    assert Sampling.parse("bootstrap") is Sampling.BOOTSTRAP
    assert Sampling.parse("shuffle-epoch") is Sampling.SHUFFLE_EPOCH


# --- real data ------------------------------------------------------------------

def test_real_mnist_invariants(mnist, mnist_dir):
    train, test = mnist
    assert train.images.shape == (60_000, 1, 28, 28) and test.images.shape == (10_000, 1, 28, 28)
    assert np.bincount(train.labels, minlength=10).tolist() == MNIST_TRAIN_COUNTS
    assert np.bincount(test.labels, minlength=10).tolist() == MNIST_TEST_COUNTS
    assert train.images.min() == 0.0 and train.images.max() == 1.0
    # minimal independent reader: label bytes start after the 8-byte header
    path = mnist_dir / "train-labels-idx1-ubyte"
    raw = path.read_bytes() if path.exists() else gzip.decompress(path.with_name(path.name + ".gz").read_bytes())
    assert raw[8] == train.labels[0]


def test_real_cifar_invariants(cifar10_dir):
    train, test = data.load_cifar10(cifar10_dir)
    assert train.images.shape == (50_000, 3, 32, 32) and test.images.shape == (10_000, 3, 32, 32)
    assert np.bincount(test.labels, minlength=10).tolist() == [1000] * 10
    assert np.bincount(train.labels, minlength=10).tolist() == [5000] * 10
