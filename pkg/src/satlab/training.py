"""Training loops: the stylized-adversary margin training scheme plus the
natural, PGD-adversarial, and Gaussian-transformation baselines.

Every run is fully seeded: batch order, target sampling, attack noise and
initialization all derive from TrainConfig.seed, so identical configs give
bitwise-identical checkpoints.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import RAW_TO_NORM, AttackConfig, pgd, stylized_step
from .data import Dataset, ImageBatch
from .errors import ConfigurationError, DataError, PreconditionError, TrainingDiverged
from .evaluation import clean_accuracy, robust_accuracy
from .losses import LossWeights, boundary_loss, margin_loss
from .models import save_checkpoint

MODES = ("sat", "natural", "pgd-at", "gaussian")


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    decay_epochs: tuple = (50, 95)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mode: str = "sat"
    gaussian_sigma: float = 0.1  # normalized pixel units
    epsilon: float = 8.0  # raw 0-255 units
    attack_step: float = 2.0  # raw units, pgd-at inner attack
    attack_iterations: int = 10  # pgd-at inner attack
    margin_taps: tuple = None  # None = penultimate tap
    style_taps: tuple = None  # None = all taps
    content_taps: tuple = None  # None = penultimate tap
    quick_robust_samples: int = 0  # per-epoch PGD eval subset size, 0 = off

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 < self.decay_factor < 1:
            raise ConfigurationError(
                f"decay_factor must be in (0,1), got {self.decay_factor}"
            )
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gaussian_sigma < 0 or self.epsilon < 0:
            raise ConfigurationError("gaussian_sigma and epsilon must be >= 0")

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch; decays apply at their epoch."""
        drops = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.lr * self.decay_factor ** drops


@dataclass
class TripletBatch:
    """Clean samples, their perturbed versions, and other-class targets."""

    clean: ImageBatch
    adversarial: ImageBatch
    target: ImageBatch

    def validate(self, eps_norm=None):
        collide = (self.target.labels == self.clean.labels).nonzero().flatten().tolist()
        if collide:
            raise PreconditionError(f"target class equals source class at {collide}")
        if eps_norm is not None:
            dist = (self.adversarial.pixels - self.clean.pixels).abs().amax()
            if float(dist) > eps_norm + 1e-6:
                raise PreconditionError(
                    f"perturbation {float(dist):.6f} exceeds budget {eps_norm:.6f}"
                )


def sample_targets(batch: ImageBatch, pool: Dataset, seed=0):
    """Per sample, a uniform pool draw whose label differs from the source."""
    pool_labels = pool.labels.numpy()
    classes = np.unique(pool_labels)
    if classes.size < 2:
        raise PreconditionError("target sampling needs a pool with >= 2 classes")
    complements = {int(c): np.flatnonzero(pool_labels != c) for c in classes}
    all_indices = np.arange(len(pool))
    rng = np.random.default_rng(seed)
    chosen = np.empty(len(batch), dtype=np.int64)
    for i, label in enumerate(batch.labels.numpy()):
        candidates = complements.get(int(label), all_indices)
        chosen[i] = candidates[rng.integers(candidates.size)]
    target = pool.batch(chosen)
    return target, target.labels


def gaussian_transform(batch: ImageBatch, sigma, epsilon, seed=0):
    """Additive Gaussian noise clipped to the eps ball and pixel range.

    sigma is in normalized pixel units; epsilon in raw 0-255 units like the
    attack budgets.
    """
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(batch.pixels.shape, generator=g, dtype=batch.pixels.dtype) * sigma
    eps = epsilon * RAW_TO_NORM
    noise = torch.clamp(noise, -eps, eps)
    pixels = torch.clamp(batch.pixels + noise, -1.0, 1.0)
    return ImageBatch(pixels=pixels, labels=batch.labels)


def _components_message(parts):
    return ", ".join(f"{k}={v:.6g}" for k, v in parts.items())


def sat_step(model, triplet: TripletBatch, cfg: TrainConfig, optimizer=None,
             epoch=None, batch_index=None):
    """One optimizer update on margin_weight*L_margin + ce_weight*L_ce.

    The cross-entropy term scores the adversarial samples against the true
    labels (smoothed); the margin term anchors on the clean features with
    the adversarial features as positives and target-class features as
    negatives. With margin_weight == 0 the margin term never enters the
    graph, so the parameter trajectory is exactly that of plain adversarial
    training.
    """
    w = cfg.weights
    if optimizer is None:
        optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr,
                                    momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay)
    taps_adv = model(triplet.adversarial.pixels)
    l_ce = boundary_loss(taps_adv.logits, triplet.clean.labels, w.smoothing)
    if w.margin_weight > 0:
        taps_clean = model(triplet.clean.pixels)
        taps_target = model(triplet.target.pixels)
        l_margin = margin_loss(taps_clean, taps_adv, taps_target, margin=w.margin,
                               norm_order=w.norm_order, tap_set=cfg.margin_taps)
        total = w.margin_weight * l_margin + w.ce_weight * l_ce
    else:
        with torch.no_grad():
            taps_clean = model(triplet.clean.pixels)
            taps_target = model(triplet.target.pixels)
            l_margin = margin_loss(taps_clean, taps_adv, taps_target, margin=w.margin,
                                   norm_order=w.norm_order, tap_set=cfg.margin_taps)
        total = w.ce_weight * l_ce
    parts = {"total": float(total.detach()), "margin": float(l_margin.detach()),
             "ce": float(l_ce.detach())}
    if not all(math.isfinite(v) for v in parts.values()):
        where = f" at epoch {epoch}, batch {batch_index}" if epoch is not None else ""
        raise TrainingDiverged(f"non-finite loss{where}: {_components_message(parts)}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return parts


def _ce_step(model, batch, labels, smoothing, optimizer, epoch, batch_index):
    logits = model(batch).logits
    loss = boundary_loss(logits, labels, smoothing)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: ce={value}"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"total": value, "margin": 0.0, "ce": value}


def _derive_seed(seed, epoch, batch_index, salt=0):
    return (seed * 1_000_003 + epoch * 10_007 + batch_index * 101 + salt) % (2 ** 31)


def train(model, dataset: Dataset, cfg: TrainConfig, out_dir=None):
    """Run the configured training mode; returns (model, per-epoch records).

    Writes train_log.jsonl plus checkpoints (at each decay epoch and at the
    end) into out_dir when given. Epochs are 1-based in logs and schedule.
    """
    if dataset.num_classes != model.num_classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes but model expects "
            f"{model.num_classes}"
        )
    if len(dataset) == 0:
        raise DataError("empty dataset")
    data = dataset if dataset.normalized else dataset.normalize()
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(cfg.seed)
    log, log_fh = [], None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8")
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            sums = {"total": 0.0, "margin": 0.0, "ce": 0.0}
            batches = 0
            model.train()
            for index, batch in enumerate(data.batches(cfg.batch_size, shuffle=True,
                                                       rng=shuffle_rng)):
                step_seed = _derive_seed(cfg.seed, epoch, index)
                if cfg.mode == "natural":
                    parts = _ce_step(model, batch.pixels, batch.labels,
                                     cfg.weights.smoothing, optimizer, epoch, index)
                elif cfg.mode == "pgd-at":
                    attack_cfg = AttackConfig(epsilon=cfg.epsilon,
                                              step_size=cfg.attack_step,
                                              iterations=cfg.attack_iterations,
                                              random_start=True)
                    model.eval()
                    adv = pgd(model, batch, attack_cfg, seed=step_seed)
                    model.train()
                    parts = _ce_step(model, adv.pixels, batch.labels,
                                     cfg.weights.smoothing, optimizer, epoch, index)
                else:
                    target, _ = sample_targets(batch, data,
                                               seed=_derive_seed(cfg.seed, epoch,
                                                                 index, salt=1))
                    if cfg.mode == "gaussian":
                        perturbed = gaussian_transform(batch, cfg.gaussian_sigma,
                                                       cfg.epsilon, seed=step_seed)
                    else:
                        model.eval()
                        adv = stylized_step(model, batch, target,
                                            weights=cfg.weights, epsilon=cfg.epsilon,
                                            style_taps=cfg.style_taps,
                                            content_taps=cfg.content_taps)
                        model.train()
                        perturbed = adv.to_batch()
                    triplet = TripletBatch(clean=batch, adversarial=perturbed,
                                           target=target)
                    triplet.validate(eps_norm=cfg.epsilon * RAW_TO_NORM)
                    parts = sat_step(model, triplet, cfg, optimizer=optimizer,
                                     epoch=epoch, batch_index=index)
                for key in sums:
                    sums[key] += parts[key]
                batches += 1
            model.eval()
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": sums["total"] / batches,
                "loss_margin": sums["margin"] / batches,
                "loss_ce": sums["ce"] / batches,
                "train_accuracy": clean_accuracy(model, data),
            }
            if cfg.quick_robust_samples > 0:
                subset = data.subset(range(min(cfg.quick_robust_samples, len(data))))
                quick_cfg = AttackConfig(epsilon=cfg.epsilon, step_size=cfg.attack_step,
                                         iterations=10)
                record["robust_accuracy"] = robust_accuracy(
                    model, subset, "pgd", quick_cfg, seed=_derive_seed(cfg.seed, epoch, 0, 2)
                )
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if out_dir is not None and epoch in cfg.decay_epochs:
                save_checkpoint(model, os.path.join(out_dir, f"checkpoint-epoch-{epoch}.ckpt"),
                                extra={"epoch": epoch, "mode": cfg.mode, "seed": cfg.seed})
        if out_dir is not None:
            save_checkpoint(model, os.path.join(out_dir, "checkpoint-final.ckpt"),
                            extra={"epoch": cfg.epochs, "mode": cfg.mode,
                                   "seed": cfg.seed})
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, log
