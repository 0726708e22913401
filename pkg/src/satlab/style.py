"""Iterative style transfer driven by a trained model's feature taps.

Plain gradient descent on the pixels of an initialization image, minimizing
weighted style (Gram MSE) plus content (feature MSE) terms against fixed
targets. Used to compare the perceptual quality of feature spaces learned
by differently trained models.
"""

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ShapeError
from .losses import content_loss, style_loss
from .models import forward


@dataclass
class StyleJob:
    """One style-transfer optimization problem."""

    content: torch.Tensor  # (c, h, w), normalized [-1,+1]
    style: torch.Tensor  # (c, h, w), same spatial size
    initialization: str = "content"  # content | noise
    iterations: int = 100
    style_weight: float = 1.0
    content_weight: float = 1.0
    style_taps: tuple = None  # None = all taps
    content_taps: tuple = None  # None = penultimate tap
    step_size: float = 0.05  # normalized pixel units
    seed: int = 0

    def validate(self):
        if self.content.shape != self.style.shape:
            raise ShapeError(
                f"content {tuple(self.content.shape)} and style "
                f"{tuple(self.style.shape)} images must share dimensions"
            )
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.initialization not in ("content", "noise"):
            raise ConfigurationError(
                f"initialization must be 'content' or 'noise', got {self.initialization!r}"
            )


def style_transfer(model, job: StyleJob):
    """Optimize pixels against the job's style/content targets.

    Returns (output image (c,h,w), loss trace). The trace holds the total
    loss at every iterate including the final one (iterations + 1 entries),
    so trace[0] is the loss of the initialization.
    """
    job.validate()
    with torch.no_grad():
        taps_style = forward(model, job.style.unsqueeze(0))
        taps_content = forward(model, job.content.unsqueeze(0))
    if job.initialization == "content":
        x = job.content.unsqueeze(0).clone()
    else:
        g = torch.Generator().manual_seed(job.seed)
        x = torch.rand(job.content.unsqueeze(0).shape, generator=g,
                       dtype=job.content.dtype) * 2 - 1

    def loss_and_grad(pixels):
        pixels = pixels.detach().clone().requires_grad_(True)
        taps = model(pixels)
        loss = (job.style_weight * style_loss(taps, taps_style, job.style_taps)
                + job.content_weight * content_loss(taps, taps_content, job.content_taps))
        (grad,) = torch.autograd.grad(loss, pixels, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(pixels)
        return float(loss.detach()), grad

    trace = []
    for _ in range(job.iterations):
        loss, grad = loss_and_grad(x)
        trace.append(loss)
        x = torch.clamp(x - job.step_size * grad, -1.0, 1.0)
    final_loss, _ = loss_and_grad(x)
    trace.append(final_loss)
    return x.squeeze(0).detach(), trace
