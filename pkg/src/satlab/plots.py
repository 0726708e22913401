"""Figure emission: every sweep in a report becomes a PNG plus a CSV
sidecar of the plotted values, so plotted numbers stay machine-checkable.
"""

import csv
import json
import os
import re
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import FormatError  # noqa: E402


def _slug(name):
    slug = re.sub(r"[^a-z0-9]+", "-", str(name).lower()).strip("-")
    return slug or "sweep"


def _collect_sweeps(doc):
    sweeps = list(doc.get("sweeps") or [])
    nested = (doc.get("obfuscation") or {}).get("sweep")
    if nested and all(s.get("name") != nested.get("name") for s in sweeps):
        sweeps.append(nested)
    return sweeps


def emit_plots(report_path, out_dir=None):
    """One line plot + sidecar per sweep; returns the image paths written.

    Sweeps missing their data are skipped with a warning. Sidecar floats
    are written with repr so they re-parse to the exact report values.
    """
    with open(report_path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise FormatError(f"{report_path}: not valid JSON: {err}") from None
    out_dir = out_dir if out_dir is not None else os.path.dirname(report_path) or "."
    os.makedirs(out_dir, exist_ok=True)
    written = []
    sweeps = _collect_sweeps(doc)
    if not sweeps:
        print(f"warning: no sweep data in {report_path}, nothing to plot",
              file=sys.stderr)
        return written
    for sweep in sweeps:
        name = sweep.get("name", "sweep")
        xs, ys = sweep.get("x"), sweep.get("y")
        if not xs or not ys or len(xs) != len(ys):
            print(f"warning: sweep {name!r} has no plottable data, skipping",
                  file=sys.stderr)
            continue
        x_label = sweep.get("x_label", "x")
        y_label = sweep.get("y_label", "y")
        base = os.path.join(out_dir, _slug(name))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.set_title(name)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(base + ".png", dpi=120)
        plt.close(fig)
        with open(base + ".csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([x_label, y_label])
            for x, y in zip(xs, ys):
                writer.writerow([repr(x), repr(y)])
        written.append(base + ".png")
    return written
