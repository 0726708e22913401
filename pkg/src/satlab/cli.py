"""Command-line front-end.

satlab <command> --config <path> [--set key=value ...] --out <dir> --seed <n>

Commands: train, attack, evaluate, corruptions, obfuscation, style, plots.
Every run writes a manifest (resolved config, seed, package version) into
the output directory; report-producing commands also render their sweep
figures next to the report. Exit codes: 0 success, 1 runtime failure,
2 invalid configuration.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import torch

from . import __version__
from .config import (build_attack_config, build_dataset, build_train_config,
                     load_config, resolve_data_path)
from .corruptions import load_severity_table
from .data import normalize_pixels, load_image, save_image
from .errors import ConfigurationError, SatlabError
from .evaluation import (correlation_loss, corruption_sweep, evaluate_attacks,
                         obfuscation_report, resolve_attack, robust_accuracy)
from .models import build_model, forward, load_checkpoint, predict_classes
from .plots import emit_plots
from .style import StyleJob, style_transfer
from .training import train


def _write_manifest(out_dir, command, config, seed):
    manifest = {"command": command, "config": config, "seed": seed,
                "version": __version__}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _resolve_model(config, dataset, seed):
    model_cfg = dict(config.get("model") or {})
    checkpoint = model_cfg.pop("checkpoint", None)
    if checkpoint:
        model, _ = load_checkpoint(resolve_data_path(checkpoint))
        return model
    arch = model_cfg.pop("arch", "tiny-cnn")
    model_cfg.setdefault("num_classes", dataset.num_classes)
    model_cfg.setdefault("in_shape", dataset.image_shape)
    model_cfg.setdefault("seed", seed)
    model_cfg["in_shape"] = tuple(model_cfg["in_shape"])
    return build_model(arch, **model_cfg)


def _model_id(config):
    model_cfg = config.get("model") or {}
    return model_cfg.get("checkpoint") or model_cfg.get("arch", "tiny-cnn")


def cmd_train(config, out_dir, seed):
    dataset, _ = build_dataset(config.get("dataset"), seed=seed)
    model = _resolve_model(config, dataset, seed)
    train_cfg = build_train_config(config.get("train"), seed=seed)
    _, log = train(model, dataset, train_cfg, out_dir=out_dir)
    final = log[-1]
    print(f"trained {train_cfg.mode} for {train_cfg.epochs} epochs; "
          f"final loss {final['loss']:.4f}, train accuracy {final['train_accuracy']:.2f}%")
    return 0


def cmd_attack(config, out_dir, seed):
    dataset, dataset_id = build_dataset(config.get("dataset"), seed=seed)
    model = _resolve_model(config, dataset, seed)
    name, cfg = build_attack_config(config.get("attack"))
    attack_fn = resolve_attack(name)
    batch_size = int(config.get("batch_size", 128))
    success, linf, correct = [], [], 0
    for index, batch in enumerate(dataset.batches(batch_size)):
        adv = attack_fn(model, batch, cfg, seed=seed + index)
        record = adv.record()
        success.extend(record["success"])
        linf.extend(record["linf"])
        with torch.no_grad():
            preds = predict_classes(forward(model, adv.pixels).logits)
        correct += int((preds == batch.labels).sum())
    doc = {
        "attack": name,
        "config": json.loads(json.dumps(asdict(cfg))),
        "dataset_id": dataset_id,
        "model_id": _model_id(config),
        "robust_accuracy": 100.0 * correct / len(dataset),
        "success_rate": 100.0 * sum(success) / len(success),
        "mean_linf": sum(linf) / len(linf),
        "per_sample": {"success": success, "linf": linf},
    }
    _write_json(os.path.join(out_dir, "attack_report.json"), doc)
    print(f"{name}: robust accuracy {doc['robust_accuracy']:.2f}%, "
          f"mean linf {doc['mean_linf']:.5f}")
    return 0


def cmd_evaluate(config, out_dir, seed):
    dataset, dataset_id = build_dataset(config.get("dataset"), seed=seed)
    model = _resolve_model(config, dataset, seed)
    eval_cfg = dict(config.get("evaluate") or {})
    batch_size = int(eval_cfg.get("batch_size", config.get("batch_size", 128)))
    specs = [build_attack_config(entry) for entry in eval_cfg.get("attacks", [{"name": "pgd"}])]
    report = evaluate_attacks(model, dataset, specs, seed=seed, batch_size=batch_size,
                              model_id=_model_id(config), dataset_id=dataset_id)
    base_name, base_cfg = build_attack_config(config.get("attack"))
    sweep_eps = eval_cfg.get("epsilon_sweep")
    if sweep_eps:
        accs = [robust_accuracy(model, dataset, base_name,
                                replace(base_cfg, epsilon=float(eps)), seed=seed,
                                batch_size=batch_size)
                for eps in sweep_eps]
        report.sweeps.append({"name": f"{base_name}-epsilon-sweep",
                              "x_label": "epsilon (raw units)",
                              "x": [float(e) for e in sweep_eps],
                              "y_label": "robust accuracy (%)", "y": accs})
    sweep_iters = eval_cfg.get("iterations_sweep")
    if sweep_iters:
        accs = [robust_accuracy(model, dataset, base_name,
                                replace(base_cfg, iterations=int(it)), seed=seed,
                                batch_size=batch_size)
                for it in sweep_iters]
        report.sweeps.append({"name": f"{base_name}-iterations-sweep",
                              "x_label": "iterations",
                              "x": [int(i) for i in sweep_iters],
                              "y_label": "robust accuracy (%)", "y": accs})
    if eval_cfg.get("correlation"):
        probe = dataset.subset(range(min(len(dataset), 256)))
        batch = probe.batch()
        corr_cfg = replace(base_cfg, iterations=10)
        adv = resolve_attack(base_name)(model, batch, corr_cfg, seed=seed)
        report.correlation = correlation_loss(model, batch, adv.to_batch())
    report_path = os.path.join(out_dir, "report.json")
    report.save(report_path)
    emit_plots(report_path, out_dir)
    lines = [f"{r.attack}: clean {r.clean_accuracy:.2f}% robust {r.robust_accuracy:.2f}%"
             for r in report.attacks]
    print("\n".join(lines))
    return 0


def cmd_corruptions(config, out_dir, seed):
    dataset, dataset_id = build_dataset(config.get("dataset"), seed=seed)
    model = _resolve_model(config, dataset, seed)
    section = dict(config.get("corruptions") or {})
    table = load_severity_table(section["table"]) if section.get("table") else None
    names = section.get("names")
    severities = tuple(section.get("severities", (1, 2, 3, 4, 5)))
    result = corruption_sweep(model, dataset, corruption_names=names,
                              severities=severities, seed=seed,
                              batch_size=int(config.get("batch_size", 256)),
                              table=table)
    doc = asdict(result)
    doc["model_id"] = _model_id(config)
    doc["dataset_id"] = dataset_id
    doc["sweeps"] = [
        {"name": f"corruption-{name}", "x_label": "severity",
         "x": [int(s) for s in severities],
         "y_label": "accuracy (%)",
         "y": [row[str(s)] for s in severities]}
        for name, row in result.table.items()
    ]
    report_path = os.path.join(out_dir, "corruption_report.json")
    _write_json(report_path, doc)
    emit_plots(report_path, out_dir)
    print(f"overall mean {result.overall_mean:.2f}%, "
          f"variance {result.variance:.2f} (clean {result.clean_accuracy:.2f}%)")
    return 0


def cmd_obfuscation(config, out_dir, seed):
    dataset, dataset_id = build_dataset(config.get("dataset"), seed=seed)
    model = _resolve_model(config, dataset, seed)
    _, base_cfg = build_attack_config(config.get("attack"))
    section = dict(config.get("obfuscation") or {})
    source_model = None
    if section.get("source_checkpoint"):
        source_model, _ = load_checkpoint(resolve_data_path(section["source_checkpoint"]))
    result = obfuscation_report(model, dataset, base_cfg=base_cfg,
                                source_model=source_model, seed=seed,
                                batch_size=int(config.get("batch_size", 128)),
                                source_epochs=int(section.get("source_epochs", 5)))
    doc = {
        "model_id": _model_id(config),
        "dataset_id": dataset_id,
        "checks": [asdict(c) for c in result.checks],
        "obfuscation": {"sweep": result.sweep},
        "all_passed": result.all_passed(),
    }
    report_path = os.path.join(out_dir, "obfuscation_report.json")
    _write_json(report_path, doc)
    emit_plots(report_path, out_dir)
    for check in result.checks:
        print(f"{check.name}: {'pass' if check.passed else 'FAIL'} {check.detail}")
    return 0


def _load_normalized_image(path):
    raw = load_image(resolve_data_path(path))
    return normalize_pixels(raw)


def cmd_style(config, out_dir, seed):
    section = dict(config.get("style") or {})
    for key in ("content", "style"):
        if not section.get(key):
            raise ConfigurationError(f"style.{key} image path is required")
    content = _load_normalized_image(section.pop("content"))
    style = _load_normalized_image(section.pop("style"))
    model_cfg = dict(config.get("model") or {})
    if model_cfg.get("checkpoint"):
        model, _ = load_checkpoint(resolve_data_path(model_cfg["checkpoint"]))
    else:
        arch = model_cfg.pop("arch", "tiny-cnn")
        model_cfg.setdefault("in_shape", tuple(content.shape))
        model_cfg.setdefault("num_classes", 10)
        model_cfg.setdefault("seed", seed)
        model_cfg["in_shape"] = tuple(model_cfg["in_shape"])
        model = build_model(arch, **model_cfg)
    for key in ("style_taps", "content_taps"):
        if section.get(key) is not None:
            section[key] = tuple(section[key])
    section.setdefault("seed", seed)
    job = StyleJob(content=content, style=style, **section)
    output, trace = style_transfer(model, job)
    save_image(output, os.path.join(out_dir, "stylized.png"))
    doc = {
        "initial_loss": trace[0],
        "final_loss": trace[-1],
        "iterations": job.iterations,
        "sweeps": [{"name": "style-loss-trace", "x_label": "iteration",
                    "x": list(range(len(trace))), "y_label": "total loss",
                    "y": trace}],
    }
    report_path = os.path.join(out_dir, "style_report.json")
    _write_json(report_path, doc)
    emit_plots(report_path, out_dir)
    print(f"style transfer: loss {trace[0]:.6g} -> {trace[-1]:.6g} "
          f"over {job.iterations} iterations")
    return 0


def cmd_plots(config, out_dir, seed):
    report = config.get("report")
    if not report:
        raise ConfigurationError("plots command needs a 'report' path in the config")
    written = emit_plots(resolve_data_path(report), out_dir)
    print(f"wrote {len(written)} plot(s)")
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "corruptions": cmd_corruptions,
    "obfuscation": cmd_obfuscation,
    "style": cmd_style,
    "plots": cmd_plots,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="satlab",
        description="Stylized adversarial training and robustness evaluation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON config file")
        cmd.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="dotted-path config override")
        cmd.add_argument("--out", required=True, help="output directory")
        cmd.add_argument("--seed", type=int, default=None,
                         help="base seed (default: config seed or 0)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        os.makedirs(args.out, exist_ok=True)
        _write_manifest(args.out, args.command, config, seed)
        torch.manual_seed(seed)
        return COMMANDS[args.command](config, args.out, seed)
    except ConfigurationError as err:
        print(f"error: invalid configuration: {err}", file=sys.stderr)
        return 2
    except SatlabError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
