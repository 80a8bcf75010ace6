import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtc.data import (
    DataFormatError,
    batch_indices,
    batches,
    load_mnist,
    parse_cifar10_bin,
    parse_idx_images,
    parse_idx_labels,
    synth_blobs,
    write_idx_images,
    write_idx_labels,
)

ONE_IMAGE = struct.pack(">IIII", 0x00000803, 1, 2, 2) + bytes([0, 255, 51, 102])
LABELS = struct.pack(">II", 0x00000801, 3) + bytes([0, 5, 9])


def cifar_record(label, fill=None):
    pix = bytes(range(256)) * 12 if fill is None else bytes([fill]) * 3072
    return bytes([label]) + pix


def test_idx_single_image():
    img = parse_idx_images(ONE_IMAGE)
    assert img.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(img.data[0, 0], np.array([[0, 255], [51, 102]], np.float32) / np.float32(255))
    assert img.data[0, 0, 1, 0] == np.float32(0.2)


def test_idx_labels():
    assert parse_idx_labels(LABELS).tolist() == [0, 5, 9]


@pytest.mark.parametrize("buf", [ONE_IMAGE[:-1], ONE_IMAGE + b"\0", ONE_IMAGE[:10],
                                 struct.pack(">I", 0x00000801) + ONE_IMAGE[4:]])
def test_idx_images_reject_malformed(buf):
    with pytest.raises(DataFormatError):
        parse_idx_images(buf)


@pytest.mark.parametrize("buf", [LABELS[:-1], LABELS + b"\1", b"", struct.pack(">II", 0x00000803, 0)])
def test_idx_labels_reject_malformed(buf):
    with pytest.raises(DataFormatError):
        parse_idx_labels(buf)


def test_idx_header_overflow_rejected():
    with pytest.raises(DataFormatError):
        parse_idx_images(struct.pack(">IIII", 0x00000803, 2 ** 32 - 1, 2 ** 16, 2 ** 16))


def test_cifar_single_record():
    split = parse_cifar10_bin(cifar_record(7))
    assert split.labels.tolist() == [7] and split.images.shape == (1, 3, 32, 32)
    # channel-major: red plane first, each plane row-major
    assert split.images.data[0, 0, 0, 1] == np.float32(1 / 255)
    assert split.images.data[0, 1, 0, 0] == np.float32(0)
    assert split.images.data[0, 2, 31, 31] == np.float32(1)


def test_cifar_two_records_keep_order():
    split = parse_cifar10_bin(cifar_record(3, 10) + cifar_record(0, 20))
    assert split.labels.tolist() == [3, 0]
    assert np.all(split.images.data[0] == np.float32(10 / 255))
    assert np.all(split.images.data[1] == np.float32(20 / 255))


def test_cifar_empty_and_malformed():
    assert len(parse_cifar10_bin(b"")) == 0
    with pytest.raises(DataFormatError):
        parse_cifar10_bin(cifar_record(1)[:-1])
    with pytest.raises(DataFormatError):
        parse_cifar10_bin(cifar_record(10))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["img", "lab", "cifar"]), st.integers(0, 2 ** 32 - 1))
def test_mutated_inputs_raise_only_format_errors(kind, seed):
    rng = np.random.default_rng(seed)
    blob = bytearray({"img": ONE_IMAGE, "lab": LABELS, "cifar": cifar_record(2)}[kind])
    for _ in range(int(rng.integers(1, 4))):
        op = rng.integers(3)
        pos = int(rng.integers(len(blob) + 1))
        if op == 0 and blob:
            blob[min(pos, len(blob) - 1)] = int(rng.integers(256))
        elif op == 1:
            del blob[pos:pos + int(rng.integers(1, 5))]
        else:
            blob[pos:pos] = bytes(rng.integers(0, 256, int(rng.integers(1, 5)), dtype=np.uint8))
    parse = {"img": parse_idx_images, "lab": parse_idx_labels, "cifar": parse_cifar10_bin}[kind]
    try:
        parse(bytes(blob))
    except DataFormatError:
        pass


def test_idx_round_trip_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (5, 1, 28, 28)).astype(np.float32) / np.float32(255)
    labels = rng.integers(0, 10, 5)
    assert parse_idx_images(write_idx_images(pix)).data.tobytes() == pix.tobytes()
    assert parse_idx_labels(write_idx_labels(labels)).tolist() == labels.tolist()
    files = {"train-images-idx3-ubyte": write_idx_images(pix), "train-labels-idx1-ubyte": write_idx_labels(labels),
             "t10k-images-idx3-ubyte": write_idx_images(pix[:2]), "t10k-labels-idx1-ubyte": write_idx_labels(labels[:2])}
    for name, raw in files.items():
        if name.startswith("t10k"):
            (tmp_path / (name + ".gz")).write_bytes(gzip.compress(raw, mtime=0))
        else:
            (tmp_path / name).write_bytes(raw)
    train, test = load_mnist(str(tmp_path), train_subset=3, test_subset=None)
    assert len(train) == 3 and len(test) == 2
    assert test.labels.tolist() == labels[:2].tolist()


def test_synth_blobs_properties():
    d = synth_blobs(4, 25, 6, seed=3)
    assert d.images.shape == (100, 1, 1, 6)
    assert np.bincount(d.labels).tolist() == [25] * 4
    x = d.images.data.reshape(100, 6)
    assert x.min() >= 0 and x.max() <= 1
    # nearest-centre classification is perfect at the default variance
    assert np.array_equal(np.argmax(x[:, :4], axis=1), d.labels)
    again = synth_blobs(4, 25, 6, seed=3)
    assert again.images.data.tobytes() == d.images.data.tobytes()
    assert synth_blobs(4, 25, 6, seed=4).images.data.tobytes() != d.images.data.tobytes()
    with pytest.raises(ValueError):
        synth_blobs(5, 2, 4)


def test_batches_cover_each_epoch_once():
    d = synth_blobs(3, 7, 3)
    got = [y for _, y in batches(d, 4, seed=1)]
    assert [len(y) for y in got] == [4, 4, 4, 4, 4, 1]
    assert sorted(np.concatenate(got).tolist()) == sorted(d.labels.tolist())
    first = np.concatenate([batch_indices(21, 4, 1, i) for i in range(6)])
    second = np.concatenate([batch_indices(21, 4, 1, i) for i in range(6, 12)])
    assert sorted(first.tolist()) == sorted(second.tolist()) == list(range(21))
    assert first.tolist() != second.tolist()


def test_batches_seeded_and_unshuffled():
    d = synth_blobs(2, 5, 2)
    a = [x.tobytes() for x, _ in batches(d, 3, seed=9)]
    assert a == [x.tobytes() for x, _ in batches(d, 3, seed=9)]
    (x, y), = batches(d, 100, shuffle=False)
    assert y.tolist() == d.labels.tolist()
    with pytest.raises(ValueError):
        next(batches(d, 0))
