"""Scalar losses: style (Gram MSE), content (feature MSE), boundary
(targeted cross-entropy), their weighted sum, the contrastive margin loss,
and label smoothing.

All reductions over the batch are means, so loss weights are batch-size
independent. Tap-set arguments default to the conventions used across the
toolkit: style over all taps, content and margin over the penultimate tap
only.
"""

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, DataError, ShapeError
from .models import FeatureTaps


@dataclass(frozen=True)
class LossWeights:
    """Weights and knobs for the adversary objective and the training loss.

    style_weight/content_weight/boundary_weight scale the three adversary
    loss components; margin_weight and ce_weight scale the two training
    loss components. margin is the hinge offset, norm_order the p of the
    feature-distance norm, smoothing the label-smoothing factor.
    """

    style_weight: float = 1.0
    content_weight: float = 1.0
    boundary_weight: float = 1.0
    margin_weight: float = 1.0
    ce_weight: float = 1.0
    margin: float = 1.0
    norm_order: float = 2.0
    smoothing: float = 0.1

    def __post_init__(self):
        weights = {
            "style_weight": self.style_weight,
            "content_weight": self.content_weight,
            "boundary_weight": self.boundary_weight,
            "margin_weight": self.margin_weight,
            "ce_weight": self.ce_weight,
            "margin": self.margin,
        }
        for name, value in weights.items():
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
        if self.norm_order < 1:
            raise ConfigurationError(f"norm_order must be >= 1, got {self.norm_order}")
        if not 0 <= self.smoothing < 1:
            raise ConfigurationError(f"smoothing must be in [0, 1), got {self.smoothing}")


@dataclass
class GramMatrix:
    """Channel second-moment matrix of a feature map, scaled by 1/(c*h*w)."""

    matrix: torch.Tensor  # (c, c) or (b, c, c)
    normalization: float


def gram(features):
    """Normalized Gram matrix G = f f^T / (c*h*w) of a (c,h,w) feature map.

    Also accepts a batched (b,c,h,w) map, returning a (b,c,c) stack.
    """
    if features.dim() not in (3, 4) or features.numel() == 0:
        raise ShapeError(f"expected non-empty (c,h,w) or (b,c,h,w) tensor, got {tuple(features.shape)}")
    c, h, w = features.shape[-3:]
    flat = features.reshape(*features.shape[:-3], c, h * w)
    g = flat @ flat.transpose(-2, -1) / (c * h * w)
    return GramMatrix(matrix=g, normalization=float(c * h * w))


def _resolve_taps(taps_a, taps_b, tap_set, default):
    ids = tuple(tap_set) if tap_set is not None else default
    for tap in ids:
        if tap not in taps_a.taps or tap not in taps_b.taps:
            raise ConfigurationError(f"tap {tap!r} not present in both inputs")
        if taps_a.taps[tap].shape != taps_b.taps[tap].shape:
            raise ShapeError(
                f"tap {tap!r} shapes differ: {tuple(taps_a.taps[tap].shape)} vs "
                f"{tuple(taps_b.taps[tap].shape)}"
            )
    return ids


def style_loss(taps_o: FeatureTaps, taps_t: FeatureTaps, tap_set=None):
    """Sum over taps of the MSE between normalized Gram matrices.

    Default tap set: every declared tap.
    """
    ids = _resolve_taps(taps_o, taps_t, tap_set, tuple(taps_o.taps))
    total = None
    for tap in ids:
        g_o = gram(taps_o.taps[tap]).matrix
        g_t = gram(taps_t.taps[tap]).matrix
        term = torch.mean((g_o - g_t) ** 2)
        total = term if total is None else total + term
    return total


def content_loss(taps_o: FeatureTaps, taps_t: FeatureTaps, tap_set=None):
    """Sum over taps of the element-mean squared feature difference.

    Default tap set: penultimate tap only.
    """
    ids = _resolve_taps(taps_o, taps_t, tap_set, (tuple(taps_o.taps)[-1],))
    total = None
    for tap in ids:
        term = torch.mean((taps_o.taps[tap] - taps_t.taps[tap]) ** 2)
        total = term if total is None else total + term
    return total


def smooth_labels(labels, num_classes, smoothing, dtype=torch.float32):
    """Rows (1-s) * one_hot(y) + s/n; every row sums to 1."""
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    out = torch.full((labels.shape[0], num_classes), smoothing / num_classes, dtype=dtype)
    out.scatter_(1, labels.reshape(-1, 1), 1.0 - smoothing + smoothing / num_classes)
    return out


def boundary_loss(logits, target_labels, smoothing=0.0):
    """Cross-entropy of softmax(logits) against smoothed targets, batch mean."""
    targets = smooth_labels(target_labels, logits.shape[1], smoothing, dtype=logits.dtype)
    return -(targets * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


@dataclass
class AdversarialLossParts:
    """Weighted adversary objective with its components kept for logging."""

    total: torch.Tensor
    style: torch.Tensor
    content: torch.Tensor
    boundary: torch.Tensor


def adversarial_loss(taps_o, taps_t, logits, y_t, weights: LossWeights,
                     style_taps=None, content_taps=None):
    """style_weight*L_style + content_weight*L_content + boundary_weight*L_ce.

    taps_o are the features of the sample being perturbed, taps_t those of
    the target-class sample; the boundary term pulls logits toward y_t.
    """
    l_style = style_loss(taps_o, taps_t, style_taps)
    l_content = content_loss(taps_o, taps_t, content_taps)
    l_boundary = boundary_loss(logits, y_t, weights.smoothing)
    total = (
        weights.style_weight * l_style
        + weights.content_weight * l_content
        + weights.boundary_weight * l_boundary
    )
    return AdversarialLossParts(total=total, style=l_style, content=l_content,
                                boundary=l_boundary)


def margin_loss(anchor_taps, positive_taps, negative_taps, margin=1.0, norm_order=2.0,
                tap_set=None):
    """Triplet hinge max(d(a,pos) - d(a,neg) + margin, 0), batch mean.

    Distances are p-norms over flattened per-sample features; the hinge is
    summed over the tap set (default: penultimate tap only).
    """
    if margin < 0 or norm_order < 1:
        raise ConfigurationError("margin must be >= 0 and norm_order >= 1")
    ids = _resolve_taps(anchor_taps, positive_taps, tap_set,
                        (tuple(anchor_taps.taps)[-1],))
    _resolve_taps(anchor_taps, negative_taps, ids, ids)
    total = None
    for tap in ids:
        a = anchor_taps.taps[tap].reshape(anchor_taps.taps[tap].shape[0], -1)
        pos = positive_taps.taps[tap].reshape(a.shape)
        neg = negative_taps.taps[tap].reshape(a.shape)
        d_pos = torch.linalg.vector_norm(a - pos, ord=norm_order, dim=1)
        d_neg = torch.linalg.vector_norm(a - neg, ord=norm_order, dim=1)
        term = torch.clamp(d_pos - d_neg + margin, min=0).mean()
        total = term if total is None else total + term
    return total
