"""Closed-form image corruptions with five-level severity tables.

Corruptions run in raw [0,255] pixel space: the batch is denormalized,
corrupted, renormalized and clipped. Severity parameters come from a
versioned JSON table shipped with the package (strictly monotone in
severity per corruption) and can be overridden per spec.
"""

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import torch
import torch.nn.functional as F

from .data import ImageBatch, denormalize_pixels, normalize_pixels
from .errors import ConfigurationError, FormatError

CORRUPTIONS = (
    "gaussian-noise", "shot-noise", "impulse-noise", "speckle-noise",
    "gaussian-blur", "defocus-blur", "contrast", "brightness",
    "saturate", "pixelate",
)

SEVERITIES = (1, 2, 3, 4, 5)

_default_table = None


def _monotone(values):
    ups = all(b > a for a, b in zip(values, values[1:]))
    downs = all(b < a for a, b in zip(values, values[1:]))
    return ups or downs


def load_severity_table(path=None):
    """Load and validate a severity table (default: the shipped one)."""
    if path is None:
        text = resources.files("satlab").joinpath("tables/corruptions.json").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    doc = json.loads(text)
    if doc.get("format_version") != 1:
        raise FormatError("unsupported severity table version")
    table = doc["severities"]
    for name in CORRUPTIONS:
        if name not in table:
            raise FormatError(f"severity table missing corruption {name!r}")
        if len(table[name]) != len(SEVERITIES) or not _monotone(table[name]):
            raise FormatError(f"severity parameters for {name!r} must be 5 strictly monotone values")
    return table


def default_severity_table():
    global _default_table
    if _default_table is None:
        _default_table = load_severity_table()
    return _default_table


@dataclass(frozen=True)
class CorruptionSpec:
    """A named corruption at one severity, with an optional table override."""

    name: str
    severity: int
    table: dict = field(default=None, compare=False)

    def __post_init__(self):
        if self.name not in CORRUPTIONS:
            raise ConfigurationError(
                f"unknown corruption {self.name!r}; choose from {sorted(CORRUPTIONS)}"
            )
        if self.severity not in SEVERITIES:
            raise ConfigurationError(f"severity must be in {SEVERITIES}, got {self.severity}")

    @property
    def parameter(self):
        table = self.table if self.table is not None else default_severity_table()
        return table[self.name][self.severity - 1]


def _blur(raw, kernel):
    b, c, h, w = raw.shape
    k = kernel.shape[-1]
    pad = k // 2
    padded = F.pad(raw, (pad, pad, pad, pad), mode="reflect")
    weight = kernel.reshape(1, 1, k, k).repeat(c, 1, 1, 1).to(raw.dtype)
    return F.conv2d(padded, weight, groups=c)


def _gaussian_kernel(sigma):
    radius = max(1, math.ceil(3.0 * sigma))
    coords = torch.arange(-radius, radius + 1, dtype=torch.float64)
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    kernel = g.reshape(-1, 1) * g.reshape(1, -1)
    return kernel / kernel.sum()


def _disk_kernel(radius):
    r = int(radius)
    coords = torch.arange(-r, r + 1, dtype=torch.float64)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    mask = (yy ** 2 + xx ** 2 <= r ** 2 + 1e-9).to(torch.float64)
    return mask / mask.sum()


def _pixelate(raw, fraction):
    h, w = raw.shape[-2:]
    nh, nw = max(1, round(h * fraction)), max(1, round(w * fraction))
    rows = (torch.arange(h) * nh // h).clamp(max=nh - 1)
    cols = (torch.arange(w) * nw // w).clamp(max=nw - 1)
    src_rows = ((rows * h + h // 2) // nh).clamp(max=h - 1)
    src_cols = ((cols * w + w // 2) // nw).clamp(max=w - 1)
    return raw[:, :, src_rows][:, :, :, src_cols]


def corrupt(batch: ImageBatch, spec: CorruptionSpec, seed=0):
    """Apply one corruption at its severity parameter; noise is seeded."""
    p = spec.parameter
    raw = denormalize_pixels(batch.pixels)
    g = torch.Generator().manual_seed(seed)
    if spec.name == "gaussian-noise":
        raw = raw + torch.randn(raw.shape, generator=g, dtype=raw.dtype) * p
    elif spec.name == "shot-noise":
        rate = torch.clamp(raw, 0, 255) / 255.0 * p
        raw = torch.poisson(rate, generator=g) / p * 255.0
    elif spec.name == "impulse-noise":
        u = torch.rand(raw.shape, generator=g, dtype=raw.dtype)
        raw = torch.where(u < p / 2, torch.full_like(raw, 255.0), raw)
        raw = torch.where((u >= p / 2) & (u < p), torch.zeros_like(raw), raw)
    elif spec.name == "speckle-noise":
        raw = raw + raw * torch.randn(raw.shape, generator=g, dtype=raw.dtype) * p
    elif spec.name == "gaussian-blur":
        raw = _blur(raw, _gaussian_kernel(p))
    elif spec.name == "defocus-blur":
        raw = _blur(raw, _disk_kernel(p))
    elif spec.name == "contrast":
        mean = raw.mean(dim=(1, 2, 3), keepdim=True)
        raw = (raw - mean) * p + mean
    elif spec.name == "brightness":
        raw = raw + p
    elif spec.name == "saturate":
        gray = raw.mean(dim=1, keepdim=True)
        raw = gray + (raw - gray) * p
    elif spec.name == "pixelate":
        raw = _pixelate(raw, p)
    pixels = torch.clamp(normalize_pixels(raw), -1.0, 1.0).to(batch.pixels.dtype)
    return ImageBatch(pixels=pixels, labels=batch.labels)
