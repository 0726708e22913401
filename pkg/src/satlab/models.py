"""Differentiable classifiers that expose intermediate feature taps.

Every model follows the same contract: calling it on a (b,c,h,w) pixel
tensor returns a FeatureTaps holding one activation tensor per declared
tap id (in tap_spec order) plus the logits. Taps are always 4-d
(b,c,h,w); vector-valued layers are exposed as (b,d,1,1).
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ImageBatch
from .errors import ConfigurationError, FormatError, NumericError, ShapeError

CHECKPOINT_MAGIC = b"SATCKPT1"


@dataclass
class FeatureTaps:
    """Ordered per-layer activations plus logits from one forward pass."""

    taps: dict  # tap id -> (b, c, h, w) tensor, in tap_spec order
    logits: torch.Tensor  # (b, num_classes)

    def penultimate(self):
        """Activation of the last declared tap (the layer feeding the logits)."""
        return self.taps[next(reversed(self.taps))]


def _he_init(module, generator, dtype):
    """Seeded He fan-in initialization for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
            )
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=generator, dtype=torch.float64)
                    .mul(std)
                    .to(dtype)
                )
                if m.bias is not None:
                    m.bias.zero_()
    module.to(dtype)


class LinearModel(nn.Module):
    """Flatten-then-linear classifier; its single tap is the flattened input.

    The identity tap makes every feature-space loss analytically tractable,
    which the attack and loss oracles rely on.
    """

    def __init__(self, in_shape=(3, 32, 32), num_classes=10):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.tap_spec = ("flat",)
        d = int(np.prod(in_shape))
        self.fc = nn.Linear(d, num_classes)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        logits = self.fc(flat)
        taps = {"flat": flat.reshape(x.shape[0], -1, 1, 1)}
        return FeatureTaps(taps=taps, logits=logits)


class TinyCNN(nn.Module):
    """Three conv stages with 2x pooling, then a hidden linear layer.

    Taps: stage1/stage2/stage3 after each conv+pool block, penult after the
    hidden layer. On 3x32x32 inputs the stage spatial sizes are 16, 8, 4.
    Pooling is skipped once the spatial extent reaches 1 so the same
    architecture runs on tiny oracle inputs (e.g. 4x4).
    """

    def __init__(self, in_shape=(3, 32, 32), num_classes=10, width=16, hidden=64):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.tap_spec = ("stage1", "stage2", "stage3", "penult")
        c, h, w = in_shape
        widths = (width, 2 * width, 4 * width)
        convs, pools = [], []
        for cout in widths:
            convs.append(nn.Conv2d(c, cout, 3, padding=1))
            pool = h >= 2 and w >= 2
            pools.append(pool)
            if pool:
                h, w = h // 2, w // 2
            c = cout
        self.convs = nn.ModuleList(convs)
        self.pools = pools
        self.hidden = nn.Linear(widths[-1] * h * w, hidden)
        self.fc = nn.Linear(hidden, num_classes)

    def forward(self, x):
        taps = {}
        out = x
        for name, conv, pool in zip(("stage1", "stage2", "stage3"), self.convs, self.pools):
            out = torch.relu(conv(out))
            if pool:
                out = torch.max_pool2d(out, 2)
            taps[name] = out
        flat = out.reshape(out.shape[0], -1)
        penult = torch.relu(self.hidden(flat))
        taps["penult"] = penult.reshape(penult.shape[0], -1, 1, 1)
        logits = self.fc(penult)
        return FeatureTaps(taps=taps, logits=logits)


class _ResidualBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        out = torch.relu(self.conv1(x))
        out = self.conv2(out)
        skip = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(out + skip)


class SmallResNet(nn.Module):
    """Conv stem plus three residual blocks with 2x pooling between them.

    Taps: block1/block2/block3 after each residual block, penult after
    global average pooling. On 3x32x32 inputs the block spatial sizes are
    32, 16, 8.
    """

    def __init__(self, in_shape=(3, 32, 32), num_classes=10, width=16):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.tap_spec = ("block1", "block2", "block3", "penult")
        c = in_shape[0]
        self.stem = nn.Conv2d(c, width, 3, padding=1)
        self.block1 = _ResidualBlock(width, width)
        self.block2 = _ResidualBlock(width, 2 * width)
        self.block3 = _ResidualBlock(2 * width, 4 * width)
        self.fc = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        taps = {}
        out = torch.relu(self.stem(x))
        out = self.block1(out)
        taps["block1"] = out
        if out.shape[-1] >= 2 and out.shape[-2] >= 2:
            out = torch.max_pool2d(out, 2)
        out = self.block2(out)
        taps["block2"] = out
        if out.shape[-1] >= 2 and out.shape[-2] >= 2:
            out = torch.max_pool2d(out, 2)
        out = self.block3(out)
        taps["block3"] = out
        pooled = out.mean(dim=(2, 3))
        taps["penult"] = pooled.reshape(pooled.shape[0], -1, 1, 1)
        return FeatureTaps(taps=taps, logits=self.fc(pooled))


ARCHITECTURES = {
    "linear": LinearModel,
    "tiny-cnn": TinyCNN,
    "small-resnet": SmallResNet,
}


def build_model(arch, in_shape=(3, 32, 32), num_classes=10, seed=0,
                dtype=torch.float32, **kwargs):
    """Construct a reference architecture with seeded He initialization."""
    if arch not in ARCHITECTURES:
        raise ConfigurationError(
            f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}"
        )
    model = ARCHITECTURES[arch](in_shape=tuple(in_shape), num_classes=num_classes, **kwargs)
    generator = torch.Generator().manual_seed(seed)
    _he_init(model, generator, dtype)
    model.arch_spec = {
        "arch": arch,
        "in_shape": list(in_shape),
        "num_classes": num_classes,
        "seed": seed,
        **{k: v for k, v in kwargs.items()},
    }
    return model


def forward(model, batch):
    """Run the model on a batch and return its FeatureTaps.

    Validates the input shape against the model and that every declared tap
    is present in the result.
    """
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    if tuple(pixels.shape[1:]) != tuple(model.in_shape):
        raise ShapeError(
            f"input shape {tuple(pixels.shape[1:])} does not match model "
            f"input spec {tuple(model.in_shape)}"
        )
    taps = model(pixels)
    if tuple(taps.taps.keys()) != tuple(model.tap_spec):
        raise ShapeError(
            f"model produced taps {tuple(taps.taps)} but declares {model.tap_spec}"
        )
    return taps


def grad_input(model, loss_fn, batch):
    """Gradient of a scalar loss with respect to the batch pixels.

    loss_fn maps the FeatureTaps of the forward pass to a scalar tensor.
    Model parameters are left untouched (no .grad accumulation).
    """
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    pixels = pixels.detach().clone().requires_grad_(True)
    taps = model(pixels)
    loss = loss_fn(taps)
    if not torch.isfinite(loss):
        finite = torch.isfinite(taps.logits).all(dim=1)
        bad = (~finite).nonzero().flatten().tolist()
        raise NumericError(
            f"loss is non-finite ({loss.item()}); suspect batch indices {bad or 'unknown'}"
        )
    if not loss.requires_grad:  # constant loss, no graph at all
        return torch.zeros_like(pixels)
    (grad,) = torch.autograd.grad(loss, pixels, allow_unused=True)
    if grad is None:  # loss did not depend on the input
        return torch.zeros_like(pixels)
    return grad.detach()


def predict_classes(logits):
    """Argmax predictions; ties broken by the lowest class index."""
    arr = logits.detach().cpu().numpy()
    return torch.from_numpy(np.argmax(arr, axis=1).astype(np.int64))


def save_checkpoint(model, path, extra=None):
    """Write a versioned, bit-exact container of named parameter arrays."""
    arch_spec = getattr(model, "arch_spec", None)
    if arch_spec is None:
        raise ConfigurationError("model lacks arch_spec; build it via build_model")
    names, metas, blobs = [], [], []
    for name, param in model.state_dict().items():
        arr = param.detach().cpu().numpy()
        names.append(name)
        metas.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(arr.tobytes())
    header = {
        "format_version": 1,
        "arch_spec": arch_spec,
        "params": metas,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Rebuild the model recorded in a checkpoint; returns (model, header)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a satlab checkpoint")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != 1:
            raise FormatError(f"{path}: unsupported checkpoint version")
        spec = dict(header["arch_spec"])
        arch = spec.pop("arch")
        dtypes = {m["dtype"] for m in header["params"]}
        dtype = torch.float64 if dtypes == {"float64"} else torch.float32
        model = build_model(arch, dtype=dtype, **spec)
        state = {}
        for meta in header["params"]:
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            arr = np.frombuffer(
                fh.read(count * np.dtype(meta["dtype"]).itemsize), dtype=meta["dtype"]
            ).reshape(meta["shape"])
            state[meta["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header
