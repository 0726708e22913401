"""Datasets: CIFAR-10 binary ingestion, synthetic toy data, image file I/O.

Pixel conventions: raw images live in [0, 255]; normalized images live in
[-1, +1]. The mapping is x_norm = x_raw * (2/255) - 1 and every dataset
tracks which state it is in so normalization is applied exactly once.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image

from .errors import DataError, FormatError, PreconditionError, ShapeError

NORM_MIN = -1.0
NORM_MAX = 1.0
RAW_MAX = 255.0

CIFAR10_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_CLASSES = 10

TOY_KINDS = ("blobs", "rings", "fragile-blobs")


def normalize_pixels(raw):
    """Map raw [0,255] pixel values to [-1,+1]."""
    return raw * (2.0 / RAW_MAX) - 1.0


def denormalize_pixels(norm):
    """Map normalized [-1,+1] pixel values back to raw [0,255]."""
    return (norm + 1.0) * (RAW_MAX / 2.0)


@dataclass
class ImageBatch:
    """A batch of normalized images with integer class labels."""

    pixels: torch.Tensor  # (b, c, h, w), values in [-1, +1]
    labels: torch.Tensor  # (b,), int64

    def validate(self, num_classes=None):
        if self.pixels.dim() != 4:
            raise ShapeError(f"pixels must be (b,c,h,w), got {tuple(self.pixels.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ShapeError(
                f"labels shape {tuple(self.labels.shape)} does not match "
                f"batch size {self.pixels.shape[0]}"
            )
        lo, hi = self.pixels.min().item(), self.pixels.max().item()
        if lo < NORM_MIN - 1e-6 or hi > NORM_MAX + 1e-6:
            raise DataError(f"pixel values outside [-1,+1]: min={lo:.4g} max={hi:.4g}")
        if self.labels.numel() and self.labels.min().item() < 0:
            raise DataError("negative class label")
        if num_classes is not None and self.labels.numel():
            top = int(self.labels.max().item())
            if top >= num_classes:
                raise DataError(f"label {top} out of range for {num_classes} classes")
        return self

    def __len__(self):
        return self.pixels.shape[0]

    def to(self, dtype):
        return ImageBatch(self.pixels.to(dtype), self.labels)


@dataclass
class Dataset:
    """Images plus labels with an explicit raw/normalized state flag."""

    images: torch.Tensor  # (n, c, h, w) float32
    labels: torch.Tensor  # (n,) int64
    num_classes: int
    split: str = "train"
    normalized: bool = False

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ShapeError(f"images must be (n,c,h,w), got {tuple(self.images.shape)}")
        if self.labels.shape[0] != self.images.shape[0]:
            raise ShapeError("images/labels length mismatch")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def normalize(self):
        if self.normalized:
            raise DataError("dataset is already normalized")
        return replace(self, images=normalize_pixels(self.images), normalized=True)

    def denormalize(self):
        if not self.normalized:
            raise DataError("dataset is already in raw pixel state")
        return replace(self, images=denormalize_pixels(self.images), normalized=False)

    def subset(self, indices):
        idx = torch.as_tensor(indices, dtype=torch.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def batch(self, indices=None):
        """Whole dataset (or an index slice) as a normalized ImageBatch."""
        ds = self if self.normalized else self.normalize()
        if indices is None:
            return ImageBatch(ds.images, ds.labels)
        idx = torch.as_tensor(indices, dtype=torch.int64)
        return ImageBatch(ds.images[idx], ds.labels[idx])

    def batches(self, batch_size, shuffle=False, rng=None):
        """Iterate ImageBatches; shuffle order is driven by the given rng."""
        ds = self if self.normalized else self.normalize()
        n = len(ds)
        order = np.arange(n)
        if shuffle:
            rng = rng if rng is not None else np.random.default_rng(0)
            rng.shuffle(order)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            yield ImageBatch(ds.images[idx], ds.labels[idx])


def load_cifar10_binary(path, split="test"):
    """Parse CIFAR-10 binary records (1 label byte + 3072 channel-major bytes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) == 0 or len(blob) % CIFAR10_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(blob)} is not a multiple of {CIFAR10_RECORD_BYTES}"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= CIFAR10_CLASSES:
        bad = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise DataError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *CIFAR10_SHAPE).astype(np.float32)
    return Dataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels),
        num_classes=CIFAR10_CLASSES,
        split=split,
        normalized=False,
    )


def save_cifar10_binary(dataset, path):
    """Write a dataset in the CIFAR-10 binary record format (10 classes max)."""
    if dataset.num_classes > CIFAR10_CLASSES:
        raise DataError("CIFAR-10 record format stores labels 0..9 only")
    ds = dataset.denormalize() if dataset.normalized else dataset
    if ds.image_shape != CIFAR10_SHAPE:
        raise ShapeError(f"CIFAR-10 records are 3x32x32, got {ds.image_shape}")
    pixels = ds.images.numpy().round().clip(0, 255).astype(np.uint8)
    labels = ds.labels.numpy().astype(np.uint8)
    with open(path, "wb") as fh:
        for lab, img in zip(labels, pixels):
            fh.write(bytes([lab]))
            fh.write(img.tobytes())


def _blob_means(rng, classes, shape, noise_sigma):
    """Per-class mean images with pairwise separation of at least 6 sigma."""
    d = int(np.prod(shape))
    means = rng.uniform(-0.6, 0.6, size=(classes, d))
    min_dist = min(
        float(np.linalg.norm(means[i] - means[j]))
        for i in range(classes)
        for j in range(i + 1, classes)
    )
    floor = 6.0 * noise_sigma
    if min_dist < floor:
        means *= (floor / max(min_dist, 1e-12)) * 1.05
        means = means.clip(-0.95, 0.95)
    return means.reshape(classes, *shape)


def make_toy_dataset(kind, n_per_class=100, classes=2, seed=0, shape=(3, 8, 8),
                     noise_sigma=0.1, split="train"):
    """Deterministic synthetic image-shaped datasets, already normalized.

    blobs          linearly separable Gaussian clusters (means >= 6 sigma apart)
    rings          concentric radial classes embedded in the first two pixels
    fragile-blobs  two classes carried by one strongly separated pixel block
                   plus many weakly separated pixels; plain training latches
                   onto the weak pixels, which an l-inf adversary can flip
    """
    if classes < 2:
        raise PreconditionError("toy datasets need at least 2 classes")
    if kind not in TOY_KINDS:
        raise DataError(f"unknown toy dataset kind {kind!r}; choose from {TOY_KINDS}")
    rng = np.random.default_rng(seed)
    n = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)

    if kind == "blobs":
        means = _blob_means(rng, classes, shape, noise_sigma)
        images = means[labels] + rng.normal(0.0, noise_sigma, size=(n, *shape))
    elif kind == "rings":
        radii = 0.25 + 0.6 * np.arange(classes) / max(classes - 1, 1)
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        r = radii[labels] + rng.normal(0.0, noise_sigma * 0.3, size=n)
        images = rng.normal(0.0, noise_sigma * 0.3, size=(n, *shape))
        images[:, 0, 0, 0] = r * np.cos(theta)
        images[:, 0, 0, 1] = r * np.sin(theta)
    else:  # fragile-blobs
        if classes != 2:
            raise PreconditionError("fragile-blobs is a two-class construction")
        c, h, w = shape
        block_h, block_w = max(1, h // 4), max(1, w // 4)
        sign = np.where(labels == 0, -1.0, 1.0).reshape(n, 1, 1, 1)
        weak_gap, weak_sigma = 0.02, 0.15
        strong_gap, strong_sigma = 0.45, 0.1
        images = sign * weak_gap + rng.normal(0.0, weak_sigma, size=(n, *shape))
        block = sign[:, :, 0, 0].reshape(n, 1, 1, 1) * strong_gap + rng.normal(
            0.0, strong_sigma, size=(n, 1, block_h, block_w)
        )
        images[:, :1, :block_h, :block_w] = block

    images = images.clip(NORM_MIN, NORM_MAX).astype(np.float32)
    return Dataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=classes,
        split=split,
        normalized=True,
    )


def load_image(path):
    """Read a lossless image file (PNG/PPM/...) into a raw (c,h,w) tensor."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(pixels, path):
    """Write a (c,h,w) tensor to a lossless image file; accepts raw or normalized."""
    arr = pixels.detach().cpu().numpy()
    if arr.min() >= NORM_MIN - 1e-6 and arr.max() <= NORM_MAX + 1e-6:
        arr = denormalize_pixels(arr)
    arr = arr.round().clip(0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)
