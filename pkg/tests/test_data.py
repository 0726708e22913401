"""Pixel conversions, dataset containers, binary records, toy generators."""

import numpy as np
import pytest
import torch

from satlab.data import (
    CIFAR10_RECORD_BYTES,
    Dataset,
    ImageBatch,
    denormalize_pixels,
    load_cifar10_binary,
    load_image,
    make_toy_dataset,
    normalize_pixels,
    save_cifar10_binary,
    save_image,
)
from satlab.errors import DataError, FormatError, PreconditionError, ShapeError


def test_normalize_endpoints():
    raw = torch.tensor([0.0, 127.5, 255.0])
    norm = normalize_pixels(raw)
    assert torch.equal(norm, torch.tensor([-1.0, 0.0, 1.0]))


def test_normalize_round_trip_is_tight():
    raw = torch.arange(256, dtype=torch.float32)
    back = denormalize_pixels(normalize_pixels(raw))
    assert torch.allclose(back, raw, atol=1e-4)


def test_normalize_linearity():
    a, b = torch.tensor(10.0), torch.tensor(20.0)
    mid = normalize_pixels((a + b) / 2)
    assert torch.isclose(mid, (normalize_pixels(a) + normalize_pixels(b)) / 2)


def test_image_batch_validation():
    good = ImageBatch(torch.zeros(2, 3, 4, 4), torch.tensor([0, 1]))
    good.validate(num_classes=2)
    with pytest.raises(ShapeError):
        ImageBatch(torch.zeros(3, 4, 4), torch.tensor([0])).validate()
    with pytest.raises(ShapeError):
        ImageBatch(torch.zeros(2, 3, 4, 4), torch.tensor([0])).validate()
    with pytest.raises(DataError):
        ImageBatch(torch.full((1, 3, 4, 4), 2.0), torch.tensor([0])).validate()
    with pytest.raises(DataError):
        good.validate(num_classes=1)


def test_dataset_normalize_state_machine():
    ds = Dataset(torch.full((2, 3, 4, 4), 255.0), torch.tensor([0, 1]), num_classes=2)
    norm = ds.normalize()
    assert norm.normalized and float(norm.images.max()) == 1.0
    with pytest.raises(DataError):
        norm.normalize()
    back = norm.denormalize()
    assert not back.normalized
    with pytest.raises(DataError):
        back.denormalize()


def test_dataset_subset_and_batches():
    ds = make_toy_dataset("blobs", n_per_class=5, classes=2, seed=0)
    sub = ds.subset([0, 5])
    assert len(sub) == 2 and sub.labels.tolist() == [0, 1]
    sizes = [len(b) for b in ds.batches(4)]
    assert sizes == [4, 4, 2]
    order_a = [b.labels.tolist() for b in ds.batches(4, shuffle=True,
                                                    rng=np.random.default_rng(1))]
    order_b = [b.labels.tolist() for b in ds.batches(4, shuffle=True,
                                                     rng=np.random.default_rng(1))]
    assert order_a == order_b
    assert order_a != [b.labels.tolist() for b in ds.batches(4)]


def test_cifar10_record_parsing_by_hand(tmp_path):
    # two hand-built records: label byte then 3072 channel-major pixel bytes
    img0 = np.arange(3072, dtype=np.uint8)
    img1 = np.full(3072, 7, dtype=np.uint8)
    blob = bytes([3]) + img0.tobytes() + bytes([9]) + img1.tobytes()
    path = tmp_path / "two.bin"
    path.write_bytes(blob)

    ds = load_cifar10_binary(path)
    assert len(ds) == 2 and not ds.normalized
    assert ds.labels.tolist() == [3, 9]
    assert ds.images.shape == (2, 3, 32, 32)
    # channel-major layout: first 1024 bytes fill channel 0 row by row
    assert float(ds.images[0, 0, 0, 5]) == 5.0
    assert float(ds.images[0, 1, 0, 0]) == float(img0[1024])
    assert float(ds.images[1].min()) == 7.0 == float(ds.images[1].max())


def test_cifar10_truncated_record_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(CIFAR10_RECORD_BYTES - 1))
    with pytest.raises(FormatError):
        load_cifar10_binary(path)
    path.write_bytes(b"")
    with pytest.raises(FormatError):
        load_cifar10_binary(path)


def test_cifar10_label_byte_out_of_range(tmp_path):
    path = tmp_path / "label.bin"
    path.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(DataError):
        load_cifar10_binary(path)


def test_cifar10_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = torch.from_numpy(
        rng.integers(0, 256, size=(4, 3, 32, 32)).astype(np.float32))
    labels = torch.tensor([0, 1, 2, 9])
    ds = Dataset(images, labels, num_classes=10)
    path = tmp_path / "rt.bin"
    save_cifar10_binary(ds, path)
    assert path.stat().st_size == 4 * CIFAR10_RECORD_BYTES
    back = load_cifar10_binary(path)
    assert torch.equal(back.images, images)
    assert torch.equal(back.labels, labels)


def test_blobs_are_linearly_separable_by_nearest_mean():
    ds = make_toy_dataset("blobs", n_per_class=50, classes=4, seed=11)
    flat = ds.images.reshape(len(ds), -1).numpy()
    means = np.stack([flat[ds.labels.numpy() == k].mean(axis=0) for k in range(4)])
    dists = ((flat[:, None, :] - means[None]) ** 2).sum(axis=2)
    pred = dists.argmin(axis=1)
    assert (pred == ds.labels.numpy()).mean() >= 0.99


def test_toy_dataset_determinism_and_range():
    a = make_toy_dataset("rings", n_per_class=20, classes=3, seed=5)
    b = make_toy_dataset("rings", n_per_class=20, classes=3, seed=5)
    c = make_toy_dataset("rings", n_per_class=20, classes=3, seed=6)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert not torch.equal(a.images, c.images)
    assert a.normalized
    assert float(a.images.min()) >= -1.0 and float(a.images.max()) <= 1.0


def test_toy_dataset_rejects_bad_arguments():
    with pytest.raises(PreconditionError):
        make_toy_dataset("blobs", classes=1)
    with pytest.raises(DataError):
        make_toy_dataset("nope")
    with pytest.raises(PreconditionError):
        make_toy_dataset("fragile-blobs", classes=3)


def test_fragile_blobs_strong_block_carries_most_signal():
    ds = make_toy_dataset("fragile-blobs", n_per_class=200, classes=2, seed=0,
                          shape=(3, 8, 8))
    imgs = ds.images.numpy()
    labs = ds.labels.numpy()
    block = imgs[:, 0, :2, :2].reshape(len(ds), -1)
    gap_block = block[labs == 1].mean() - block[labs == 0].mean()
    rest = imgs[:, 2].reshape(len(ds), -1)
    gap_rest = rest[labs == 1].mean() - rest[labs == 0].mean()
    assert gap_block > 0.35
    assert 0.0 < gap_rest < 0.1


def test_image_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    raw = torch.from_numpy(rng.integers(0, 256, size=(3, 8, 8)).astype(np.float32))
    path = tmp_path / "img.png"
    save_image(raw, path)
    back = load_image(path)
    assert torch.equal(back, raw)
    # normalized input is converted back to raw bytes before writing
    save_image(normalize_pixels(raw), path)
    assert torch.equal(load_image(path), raw)
