"""Gradient-based attack suite plus the stylized single-step adversary.

Budgets live in raw 0-255 pixel units in every config and are converted to
the normalized [-1,+1] scale (factor 2/255) at the point of use. sign(0)=0
throughout, so zero-gradient points are left untouched.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import NORM_MAX, NORM_MIN, RAW_MAX, ImageBatch
from .errors import ConfigurationError, PreconditionError
from .losses import LossWeights, adversarial_loss
from .models import forward, grad_input, predict_classes

RAW_TO_NORM = 2.0 / RAW_MAX


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8.0  # raw 0-255 units
    step_size: float = 2.0  # raw units per iteration
    iterations: int = 20
    random_start: bool = True
    momentum_decay: float = 1.0  # MIFGSM only
    kappa: float = 0.0  # CW confidence
    window: tuple = (5, 5)  # ROA occlusion height x width
    stride: int = 2  # ROA search stride
    candidates: int = 10  # ROA gradient-search pool

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.iterations > 1 and self.step_size <= 0:
            raise ConfigurationError("step_size must be > 0 for multi-step attacks")
        if self.momentum_decay < 0 or self.kappa < 0:
            raise ConfigurationError("momentum_decay and kappa must be >= 0")
        if self.stride < 1 or self.candidates < 1:
            raise ConfigurationError("stride and candidates must be >= 1")

    @property
    def eps_norm(self):
        return self.epsilon * RAW_TO_NORM

    @property
    def step_norm(self):
        return self.step_size * RAW_TO_NORM


@dataclass
class AdversarialBatch:
    """Attack output: perturbed pixels plus bookkeeping for reports.

    success is attack-specific: prediction != true label for untargeted
    attacks, prediction == target label for the stylized step. linf holds
    per-sample normalized distances to the source pixels.
    """

    pixels: torch.Tensor
    source: ImageBatch
    success: np.ndarray
    linf: np.ndarray
    meta: dict

    def to_batch(self):
        return ImageBatch(pixels=self.pixels, labels=self.source.labels)

    def record(self):
        """JSON-ready summary: attack name, config, per-sample outcomes."""
        return {
            "attack": self.meta.get("attack"),
            "config": self.meta.get("config"),
            "success": [bool(v) for v in self.success],
            "linf": [float(v) for v in self.linf],
        }


def _finish(name, cfg, model, batch, adv, extra=None, targets=None):
    with torch.no_grad():
        preds = predict_classes(forward(model, adv).logits)
    if targets is None:
        success = (preds != batch.labels).numpy()
    else:
        success = (preds == targets).numpy()
    linf = (adv - batch.pixels).abs().amax(dim=(1, 2, 3)).cpu().numpy()
    meta = {"attack": name, "config": asdict(cfg) if cfg is not None else None}
    if extra:
        meta.update(extra)
    return AdversarialBatch(pixels=adv.detach(), source=batch, success=success,
                            linf=linf, meta=meta)


def _ce_grad(model, pixels, labels):
    return grad_input(model, lambda t: F.cross_entropy(t.logits, labels), pixels)


def _project(x, x0, eps):
    x = torch.minimum(x, x0 + eps)
    x = torch.maximum(x, x0 - eps)
    return torch.clamp(x, NORM_MIN, NORM_MAX)


def stylized_step(model, x_o: ImageBatch, x_t: ImageBatch, y_t=None,
                  weights: LossWeights = None, epsilon=8.0,
                  style_taps=None, content_taps=None):
    """Single descent step on the multi-task adversary objective.

    x_bar = clip(x_o - eps * sign(grad_x [style + content + targeted CE])),
    pulling the sample toward the target image's feature statistics and the
    target class. Exactly one gradient evaluation.
    """
    weights = weights or LossWeights()
    y_t = x_t.labels if y_t is None else torch.as_tensor(y_t, dtype=torch.int64)
    collide = (y_t == x_o.labels).nonzero().flatten().tolist()
    if collide:
        raise PreconditionError(
            f"target class equals source class at batch indices {collide}"
        )
    with torch.no_grad():
        taps_t = forward(model, x_t)

    def loss_fn(taps):
        return adversarial_loss(taps, taps_t, taps.logits, y_t, weights,
                                style_taps=style_taps, content_taps=content_taps).total

    grad = grad_input(model, loss_fn, x_o)
    eps = epsilon * RAW_TO_NORM
    adv = torch.clamp(x_o.pixels - eps * torch.sign(grad), NORM_MIN, NORM_MAX)
    with torch.no_grad():
        taps_o = forward(model, x_o)
        parts = adversarial_loss(taps_o, taps_t, taps_o.logits, y_t, weights,
                                 style_taps=style_taps, content_taps=content_taps)
    extra = {
        "epsilon": epsilon,
        "loss_style": float(parts.style),
        "loss_content": float(parts.content),
        "loss_boundary": float(parts.boundary),
    }
    return _finish("stylized-step", None, model, x_o, adv, extra=extra, targets=y_t)


def fgsm(model, batch, cfg: AttackConfig, seed=0):
    """Single signed ascent step on the true-label cross-entropy."""
    grad = _ce_grad(model, batch.pixels, batch.labels)
    adv = torch.clamp(batch.pixels + cfg.eps_norm * torch.sign(grad),
                      NORM_MIN, NORM_MAX)
    return _finish("fgsm", cfg, model, batch, adv)


def _pgd_loop(model, batch, cfg, seed, grad_fn, ascend=True):
    x0 = batch.pixels
    eps, step = cfg.eps_norm, cfg.step_norm
    if cfg.random_start:
        g = torch.Generator().manual_seed(seed)
        noise = (torch.rand(x0.shape, generator=g, dtype=x0.dtype) * 2 - 1) * eps
        x = torch.clamp(x0 + noise, NORM_MIN, NORM_MAX)
    else:
        x = x0.clone()
    sign = 1.0 if ascend else -1.0
    for _ in range(cfg.iterations):
        grad = grad_fn(x)
        x = x + sign * step * torch.sign(grad)
        x = _project(x, x0, eps)
    return x


def pgd(model, batch, cfg: AttackConfig, seed=0):
    """Iterative signed ascent with per-step projection onto the eps ball.

    With one iteration, no random start, and step >= eps the projection
    arithmetic reduces bitwise to fgsm.
    """
    adv = _pgd_loop(model, batch, cfg, seed,
                    lambda x: _ce_grad(model, x, batch.labels))
    return _finish("pgd", cfg, model, batch, adv)


def mifgsm(model, batch, cfg: AttackConfig, seed=0):
    """Momentum attack: g <- mu*g + grad/||grad||_1, signed step eps/T.

    The per-iteration step is eps/iterations (so one iteration equals
    fgsm); random_start is ignored, matching the usual formulation.
    """
    x0 = batch.pixels
    eps = cfg.eps_norm
    step = eps / cfg.iterations
    x = x0.clone()
    g = torch.zeros_like(x0)
    for _ in range(cfg.iterations):
        grad = _ce_grad(model, x, batch.labels)
        l1 = grad.abs().sum(dim=(1, 2, 3), keepdim=True)
        g = cfg.momentum_decay * g + grad / l1.clamp(min=1e-12)
        x = x + step * torch.sign(g)
        x = _project(x, x0, eps)
    return _finish("mifgsm", cfg, model, batch, x)


def _cw_margin(logits, labels, kappa):
    true = logits.gather(1, labels.reshape(-1, 1)).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, labels.reshape(-1, 1), float("-inf"))
    other = masked.max(dim=1).values
    return torch.clamp(true - other, min=-kappa)


def cw_linf(model, batch, cfg: AttackConfig, seed=0):
    """PGD descent on the confidence margin clamp(Z_y - max_other Z, -kappa).

    Once a sample is misclassified with margin beyond kappa the clamp
    plateaus, its gradient vanishes, and the sample stops moving.
    """

    def grad_fn(x):
        return grad_input(
            model, lambda t: _cw_margin(t.logits, batch.labels, cfg.kappa).mean(), x
        )

    adv = _pgd_loop(model, batch, cfg, seed, grad_fn, ascend=False)
    return _finish("cw", cfg, model, batch, adv)


def deepfool_linf(model, batch, cfg: AttackConfig, seed=0):
    """DeepFool steps to the nearest linearized boundary, then an eps clip.

    Standard l2 DeepFool (overshoot 0.02, cap 50 iterations) runs until the
    sample leaves its true class; the accumulated noise is then clamped to
    the l-infinity ball and the pixels to range. Samples that are already
    misclassified exit before the first step.
    """
    overshoot, max_iter = 0.02, 50
    x0 = batch.pixels
    labels = batch.labels
    n_classes = model.num_classes
    x = x0.clone()
    for _ in range(max_iter):
        with torch.no_grad():
            preds = predict_classes(forward(model, x).logits)
        active = preds == labels
        if not active.any():
            break
        xa = x[active].detach().clone().requires_grad_(True)
        logits = model(xa).logits
        grads = []
        for k in range(n_classes):
            (gk,) = torch.autograd.grad(logits[:, k].sum(), xa, retain_graph=True,
                                        allow_unused=True)
            grads.append(torch.zeros_like(xa) if gk is None else gk)
        grads = torch.stack(grads, dim=1)  # (a, classes, c, h, w)
        la = labels[active]
        idx = torch.arange(xa.shape[0])
        f = logits.detach() - logits.detach()[idx, la].reshape(-1, 1)
        w = grads - grads[idx, la].unsqueeze(1)
        w_norm = w.reshape(w.shape[0], n_classes, -1).norm(dim=2)
        ratio = f.abs() / w_norm.clamp(min=1e-12)
        ratio[idx, la] = float("inf")
        l = ratio.argmin(dim=1)
        r = (f[idx, l].abs() + 1e-4) / w_norm[idx, l].clamp(min=1e-12) ** 2
        step = r.reshape(-1, 1, 1, 1) * w[idx, l]
        x = x.clone()
        x[active] = (xa + (1 + overshoot) * step).detach()
    noise = torch.clamp(x - x0, -cfg.eps_norm, cfg.eps_norm)
    adv = torch.clamp(x0 + noise, NORM_MIN, NORM_MAX)
    return _finish("deepfool", cfg, model, batch, adv)


def _roa_positions(height, width, window, stride):
    wh, ww = window
    if wh > height or ww > width:
        raise ConfigurationError(
            f"window {window} does not fit inside image {(height, width)}"
        )
    return [(r, c)
            for r in range(0, height - wh + 1, stride)
            for c in range(0, width - ww + 1, stride)]


def _roa_inner(model, batch, mask, steps, step_size):
    """Unconstrained signed ascent restricted to masked pixels."""
    x = batch.pixels.clone()
    for _ in range(steps):
        grad = _ce_grad(model, x, batch.labels)
        x = torch.clamp(x + step_size * torch.sign(grad) * mask, NORM_MIN, NORM_MAX)
    return x


def _per_sample_ce(model, pixels, labels):
    with torch.no_grad():
        logits = forward(model, pixels).logits
    return F.cross_entropy(logits, labels, reduction="none")


def roa(model, batch, cfg: AttackConfig, mode="gradient", seed=0, inner_steps=30):
    """Rectangular occlusion: pick a window position, then attack inside it.

    exhaustive mode scores every stride-aligned position; gradient mode
    scores only the top-`candidates` positions ranked by the summed
    gradient magnitude under the window. Position quality is the per-sample
    cross-entropy after the inner attack; ties keep the earliest position
    in (row, col) order. Pixels outside the chosen window are untouched and
    pixels inside are free in [-1,+1].
    """
    if mode not in ("gradient", "exhaustive"):
        raise ConfigurationError(f"unknown roa mode {mode!r}")
    b, _, height, width = batch.pixels.shape
    wh, ww = cfg.window
    positions = _roa_positions(height, width, cfg.window, cfg.stride)
    if mode == "gradient":
        grad = _ce_grad(model, batch.pixels, batch.labels).abs().sum(dim=1)
        scores = torch.stack(
            [grad[:, r:r + wh, c:c + ww].sum(dim=(1, 2)) for r, c in positions], dim=1
        )  # (b, positions)
        k = min(cfg.candidates, len(positions))
        # stable sort keeps row-major order among tied scores
        order = torch.argsort(-scores, dim=1, stable=True)[:, :k]
        candidate_sets = [sorted(order[i].tolist()) for i in range(b)]
    else:
        candidate_sets = [list(range(len(positions)))] * b
    pos_union = sorted({p for cand in candidate_sets for p in cand})
    best_loss = torch.full((b,), float("-inf"))
    best_adv = batch.pixels.clone()
    best_pos = [None] * b
    for p in pos_union:
        r, c = positions[p]
        mask = torch.zeros((1, 1, height, width), dtype=batch.pixels.dtype)
        mask[:, :, r:r + wh, c:c + ww] = 1.0
        adv = _roa_inner(model, batch, mask, inner_steps, cfg.step_norm)
        loss = _per_sample_ce(model, adv, batch.labels)
        for i in range(b):
            if p in candidate_sets[i] and loss[i] > best_loss[i]:
                best_loss[i] = loss[i]
                best_adv[i] = adv[i]
                best_pos[i] = [r, c]
    extra = {"mode": mode, "positions": best_pos,
             "loss": [float(v) for v in best_loss]}
    return _finish(f"roa-{mode}", cfg, model, batch, best_adv, extra=extra)


def roa_gradient(model, batch, cfg, seed=0):
    return roa(model, batch, cfg, mode="gradient", seed=seed)


def roa_exhaustive(model, batch, cfg, seed=0):
    return roa(model, batch, cfg, mode="exhaustive", seed=seed)


ATTACKS = {
    "fgsm": fgsm,
    "pgd": pgd,
    "mifgsm": mifgsm,
    "cw": cw_linf,
    "deepfool": deepfool_linf,
    "roa-gradient": roa_gradient,
    "roa-exhaustive": roa_exhaustive,
}
