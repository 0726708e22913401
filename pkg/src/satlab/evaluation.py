"""Robustness measurement: clean/robust accuracy, black-box transfer, the
covariance-shift feature-stability metric, corruption sweeps, and the three
gradient-obfuscation sanity checks.

Accuracies are percentages in [0,100]. Reports are plain dataclasses with
lossless JSON round-trips; sweep curves are stored in a uniform
{name, x_label, x, y_label, y} shape that the plotting front-end consumes.
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .attacks import ATTACKS, AttackConfig
from .corruptions import SEVERITIES, CORRUPTIONS, CorruptionSpec, corrupt
from .data import Dataset
from .errors import ConfigurationError, DataError, ShapeError
from .models import forward, predict_classes


def _jsonable(obj):
    """Canonicalize to JSON-native types so round-trips compare equal."""
    return json.loads(json.dumps(obj))


def resolve_attack(attack):
    if callable(attack):
        return attack
    if attack in ATTACKS:
        return ATTACKS[attack]
    raise ConfigurationError(f"unknown attack {attack!r}; choose from {sorted(ATTACKS)}")


def clean_accuracy(model, dataset: Dataset, batch_size=256):
    """Percentage of correctly classified samples (lowest-index tie-break)."""
    if len(dataset) == 0:
        raise DataError("empty dataset")
    correct = 0
    with torch.no_grad():
        for batch in dataset.batches(batch_size):
            preds = predict_classes(forward(model, batch).logits)
            correct += int((preds == batch.labels).sum())
    return 100.0 * correct / len(dataset)


def _attacked_accuracy(craft_model, eval_model, dataset, attack, cfg, seed, batch_size):
    attack_fn = resolve_attack(attack)
    if len(dataset) == 0:
        raise DataError("empty dataset")
    correct, distances = 0, []
    for index, batch in enumerate(dataset.batches(batch_size)):
        adv = attack_fn(craft_model, batch, cfg, seed=seed + index)
        with torch.no_grad():
            preds = predict_classes(forward(eval_model, adv.pixels).logits)
        correct += int((preds == batch.labels).sum())
        distances.append(adv.linf)
    accuracy = 100.0 * correct / len(dataset)
    return accuracy, float(np.mean(np.concatenate(distances)))


def robust_accuracy(model, dataset, attack, cfg: AttackConfig, seed=0, batch_size=128):
    """Accuracy on adversarial examples crafted against the model itself."""
    accuracy, _ = _attacked_accuracy(model, model, dataset, attack, cfg, seed, batch_size)
    return accuracy


def transfer_attack(source_model, target_model, dataset, attack, cfg, seed=0,
                    batch_size=128):
    """Black-box accuracy: adversaries crafted on source, scored on target."""
    if tuple(source_model.in_shape) != tuple(target_model.in_shape) or \
            source_model.num_classes != target_model.num_classes:
        raise ConfigurationError("source/target models disagree on input shape or classes")
    accuracy, _ = _attacked_accuracy(source_model, target_model, dataset, attack, cfg,
                                     seed, batch_size)
    return accuracy


def correlation_loss(model, clean_batch, adv_batch, tap=None):
    """Frobenius norm of the feature-covariance shift under attack.

    Covariances are computed over the batch of flattened features at the
    chosen tap (default: penultimate), mean-centered with the n-1
    normalization of np.cov. Needs at least two samples.
    """
    if len(clean_batch) != len(adv_batch):
        raise ShapeError("clean and adversarial batches must be aligned")
    if len(clean_batch) < 2:
        raise DataError("covariance needs a batch of at least 2 samples")
    with torch.no_grad():
        taps_c = forward(model, clean_batch)
        taps_a = forward(model, adv_batch)
    tap = tap if tap is not None else tuple(taps_c.taps)[-1]
    f_c = taps_c.taps[tap].reshape(len(clean_batch), -1).double().numpy()
    f_a = taps_a.taps[tap].reshape(len(adv_batch), -1).double().numpy()
    cov_c = np.atleast_2d(np.cov(f_c, rowvar=False))
    cov_a = np.atleast_2d(np.cov(f_a, rowvar=False))
    return float(np.linalg.norm(cov_a - cov_c, ord="fro"))


@dataclass
class AttackRecord:
    """One attack's evaluation row in a robustness report."""

    attack: str
    config: dict
    clean_accuracy: float
    robust_accuracy: float
    mean_linf: float


@dataclass
class ObfuscationCheck:
    name: str
    passed: bool
    detail: dict


@dataclass
class ObfuscationReport:
    checks: list
    sweep: dict  # epsilon sweep curve, {name, x_label, x, y_label, y}

    def all_passed(self):
        return all(c.passed for c in self.checks)


EPSILON_SWEEP = (8.0, 16.0, 32.0, 64.0, 128.0)


def obfuscation_report(model, dataset, base_cfg=None, source_model=None, seed=0,
                       batch_size=128, source_epochs=5):
    """The three gradient-obfuscation sanity checks.

    1. black-box (transfer) robust accuracy >= white-box robust accuracy;
    2. PGD robust accuracy <= FGSM robust accuracy (iterative stronger);
    3. PGD robust accuracy over budgets {8,16,32,64,128} is non-increasing
       and ends at or below 5%.
    A missing source model is trained naturally on the fly.
    """
    cfg = base_cfg if base_cfg is not None else AttackConfig()
    if source_model is None:
        from .models import build_model
        from .training import TrainConfig, train

        source_model = build_model("tiny-cnn", in_shape=dataset.image_shape,
                                   num_classes=dataset.num_classes, seed=seed + 17)
        source_cfg = TrainConfig(mode="natural", epochs=source_epochs, lr=0.01,
                                 seed=seed + 17, epsilon=cfg.epsilon)
        train(source_model, dataset, source_cfg)
    white = robust_accuracy(model, dataset, "pgd", cfg, seed=seed, batch_size=batch_size)
    black = transfer_attack(source_model, model, dataset, "pgd", cfg, seed=seed,
                            batch_size=batch_size)
    check1 = ObfuscationCheck(
        name="black-box-not-stronger",
        passed=bool(black >= white - 1e-9),
        detail={"black_box": black, "white_box": white},
    )
    fgsm_acc = robust_accuracy(model, dataset, "fgsm", cfg, seed=seed,
                               batch_size=batch_size)
    check2 = ObfuscationCheck(
        name="iterative-stronger-than-single-step",
        passed=bool(white <= fgsm_acc + 1e-9),
        detail={"pgd": white, "fgsm": fgsm_acc, "pgd_iterations": cfg.iterations},
    )
    accs = []
    for eps in EPSILON_SWEEP:
        # keep the attack powered across budgets: step grows as 2.5*eps/T
        step = max(cfg.step_size, 2.5 * eps / cfg.iterations)
        sweep_cfg = replace(cfg, epsilon=eps, step_size=step)
        accs.append(robust_accuracy(model, dataset, "pgd", sweep_cfg, seed=seed,
                                    batch_size=batch_size))
    monotone = all(b <= a + 1e-9 for a, b in zip(accs, accs[1:]))
    check3 = ObfuscationCheck(
        name="large-budget-breaks-model",
        passed=bool(monotone and accs[-1] <= 5.0),
        detail={"epsilons": list(EPSILON_SWEEP), "accuracies": accs,
                "monotone": monotone, "final": accs[-1]},
    )
    sweep = {"name": "pgd-epsilon-sweep", "x_label": "epsilon (raw units)",
             "x": list(EPSILON_SWEEP), "y_label": "robust accuracy (%)", "y": accs}
    return ObfuscationReport(checks=[check1, check2, check3], sweep=sweep)


@dataclass
class CorruptionTable:
    """Accuracy per (corruption, severity) plus the summary rows."""

    table: dict  # corruption -> {severity (str) -> accuracy}
    per_corruption_mean: dict
    overall_mean: float
    variance: float  # population variance across per-corruption means
    clean_accuracy: float


def corruption_sweep(model, dataset, corruption_names=None, severities=SEVERITIES,
                     seed=0, batch_size=256, table=None):
    """Accuracy under each corruption at each severity level."""
    names = tuple(corruption_names) if corruption_names is not None else CORRUPTIONS
    for name in names:
        if name not in CORRUPTIONS:
            raise ConfigurationError(f"unknown corruption {name!r}")
    grid = {}
    for name in names:
        row = {}
        for severity in severities:
            spec = CorruptionSpec(name=name, severity=severity, table=table)
            correct = 0
            for index, batch in enumerate(dataset.batches(batch_size)):
                corrupted = corrupt(batch, spec, seed=seed + 1000 * severity + index)
                with torch.no_grad():
                    preds = predict_classes(forward(model, corrupted).logits)
                correct += int((preds == batch.labels).sum())
            row[str(severity)] = 100.0 * correct / len(dataset)
        grid[name] = row
    means = {name: float(np.mean(list(row.values()))) for name, row in grid.items()}
    overall = float(np.mean(list(means.values())))
    variance = float(np.var(list(means.values())))
    return CorruptionTable(table=grid, per_corruption_mean=means, overall_mean=overall,
                           variance=variance, clean_accuracy=clean_accuracy(model, dataset))


@dataclass
class RobustnessReport:
    """Top-level evaluation artifact; serializes losslessly to JSON."""

    model_id: str
    dataset_id: str
    attacks: list = field(default_factory=list)  # AttackRecord
    corruptions: dict = None  # CorruptionTable as dict
    obfuscation: dict = None  # ObfuscationReport as dict
    correlation: float = None
    sweeps: list = field(default_factory=list)

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "attacks": [asdict(a) for a in self.attacks],
            "corruptions": self.corruptions,
            "obfuscation": self.obfuscation,
            "correlation": self.correlation,
            "sweeps": self.sweeps,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc):
        attacks = [AttackRecord(**a) for a in doc.get("attacks", [])]
        return cls(model_id=doc["model_id"], dataset_id=doc["dataset_id"],
                   attacks=attacks, corruptions=doc.get("corruptions"),
                   obfuscation=doc.get("obfuscation"),
                   correlation=doc.get("correlation"),
                   sweeps=doc.get("sweeps", []))

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def evaluate_attacks(model, dataset, attack_specs, seed=0, batch_size=128,
                     model_id="model", dataset_id="dataset"):
    """Run a list of (attack name, AttackConfig) pairs into a report."""
    clean = clean_accuracy(model, dataset, batch_size=batch_size)
    report = RobustnessReport(model_id=model_id, dataset_id=dataset_id)
    for name, cfg in attack_specs:
        accuracy, mean_linf = _attacked_accuracy(model, model, dataset, name, cfg,
                                                 seed, batch_size)
        report.attacks.append(AttackRecord(
            attack=name, config=_jsonable(asdict(cfg)), clean_accuracy=clean,
            robust_accuracy=accuracy, mean_linf=mean_linf,
        ))
    return report
