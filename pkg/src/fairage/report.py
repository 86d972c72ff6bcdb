"""Report writers: delimited tables, JSON with matrices, and figures.

Every evaluation command emits a CSV (one row per age group or relation), a
JSON twin carrying the full matrices, and a rendered PNG figure next to
them. Confusion matrices stay data-only; figures are curves and bars.
"""

import csv
import json
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import __version__
from .core import RaceLabel


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_run_manifest(out_dir, command, config_hash, seed, inputs, outputs,
                       elapsed_seconds) -> Path:
    """One manifest per command, written next to its outputs."""
    payload = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": f"fairage-{__version__}",
        "elapsed_seconds": round(elapsed_seconds, 3),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    return write_json(Path(out_dir) / "run_manifest.json", payload)


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_series_figure(path, x, series, title, xlabel, ylabel, errors=None):
    """Line plot of one or more series over age groups."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in series.items():
        err = (errors or {}).get(name)
        if err is not None:
            ax.errorbar(x, values, yerr=err, marker="o", capsize=3, label=name)
        else:
            ax.plot(x, values, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    return _finish(fig, path)


def render_histogram(path, values_by_split, title, xlabel):
    """Age histogram per dataset split."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for split, counts in values_by_split.items():
        ages = sorted(int(a) for a in counts)
        ax.bar([a + (0.4 if split == "test" else 0) for a in ages],
               [counts[str(a)] for a in ages], width=0.4, label=split, alpha=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def render_grouped_bars(path, groups, series, title, ylabel):
    """Grouped bar chart, one group per relation, one bar per mode."""
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(series))
    for i, (name, values) in enumerate(series.items()):
        offsets = [g + i * width for g in range(len(groups))]
        ax.bar(offsets, values, width=width, label=str(name))
    ax.set_xticks([g + 0.4 - width / 2 for g in range(len(groups))])
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8, ncol=3)
    return _finish(fig, path)


def race_report(reports, out_dir, stem="race_accuracy"):
    """CSV + JSON (with matrices) + accuracy-over-age figure."""
    out_dir = Path(out_dir)
    header = ["age", "accuracy", "failures"]
    for race in RaceLabel:
        header += [f"{race.name.lower()}_{m}" for m in ("precision", "recall", "f1")]
    rows, payload = [], []
    for report in reports:
        per_race = report.per_race
        row = [report.age, f"{report.accuracy:.6f}", report.failures]
        for race in RaceLabel:
            s = per_race[race]
            row += [f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"]
        rows.append(row)
        payload.append({"age": report.age, "accuracy": report.accuracy,
                        "failures": report.failures,
                        "matrix": report.matrix.tolist(),
                        "per_race": {race.name: vars(per_race[race]) for race in RaceLabel}})
    paths = [write_csv(out_dir / f"{stem}.csv", header, rows),
             write_json(out_dir / f"{stem}.json", payload),
             render_series_figure(out_dir / f"{stem}.png",
                                  [r.age for r in reports],
                                  {"accuracy": [r.accuracy for r in reports]},
                                  "race classification accuracy of aged images",
                                  "target age", "accuracy")]
    return paths


def identity_report(reports, out_dir, stem="identity_preservation"):
    out_dir = Path(out_dir)
    rows = [[r.age, f"{r.mean:.6f}", f"{r.std:.6f}", r.excluded] for r in reports]
    payload = [vars(r) for r in reports]
    paths = [write_csv(out_dir / f"{stem}.csv", ["age", "mean", "std", "excluded"], rows),
             write_json(out_dir / f"{stem}.json", payload),
             render_series_figure(out_dir / f"{stem}.png",
                                  [r.age for r in reports],
                                  {"cosine similarity": [r.mean for r in reports]},
                                  "identity preservation over target age",
                                  "target age", "cosine similarity",
                                  errors={"cosine similarity": [r.std for r in reports]})]
    return paths


def age_error_report(reports, out_dir, stem="age_mae"):
    out_dir = Path(out_dir)
    rows = [[r.age, f"{r.mae_mean:.6f}", f"{r.mae_std:.6f}", r.count, r.failures, r.note]
            for r in reports]
    payload = [vars(r) for r in reports]
    paths = [write_csv(out_dir / f"{stem}.csv",
                       ["age", "mae_mean", "mae_std", "count", "failures", "note"], rows),
             write_json(out_dir / f"{stem}.json", payload),
             render_series_figure(out_dir / f"{stem}.png",
                                  [r.age for r in reports],
                                  {"MAE": [r.mae_mean for r in reports]},
                                  "apparent-age error over target age",
                                  "target age", "years",
                                  errors={"MAE": [r.mae_std for r in reports]})]
    return paths


def kinship_report(reports, out_dir, ages, stem="kinship_accuracy"):
    """Relation-per-row table with base, per-age, and recomputed improvement."""
    out_dir = Path(out_dir)
    header = ["relation", "base"] + [f"age_{a}" for a in ages] + ["improvement"]
    rows, payload = [], []
    for report in reports:
        row = [report.relation,
               "" if report.base is None else f"{report.base:.4f}"]
        row += [f"{report.by_age[a]:.4f}" for a in ages if a in report.by_age]
        improvement = report.improvement
        row.append("" if improvement != improvement else f"{improvement:.4f}")
        rows.append(row)
        payload.append({"relation": report.relation, "base": report.base,
                        "by_age": {str(k): v for k, v in report.by_age.items()},
                        "improvement": None if improvement != improvement else improvement})
    series = {}
    if any(r.base is not None for r in reports):
        series["base"] = [r.base for r in reports]
    for age in ages:
        if all(age in r.by_age for r in reports):
            series[f"age {age}"] = [r.by_age[age] for r in reports]
    paths = [write_csv(out_dir / f"{stem}.csv", header, rows),
             write_json(out_dir / f"{stem}.json", payload),
             render_grouped_bars(out_dir / f"{stem}.png",
                                 [r.relation for r in reports], series,
                                 "kinship verification accuracy", "accuracy (%)")]
    return paths


def dataset_report(summary, out_dir):
    """Summary figure for a freshly built dataset manifest."""
    return [render_histogram(Path(out_dir) / "age_histogram.png",
                             summary["age_histogram"],
                             "age distribution of the balanced dataset", "age (years)")]
