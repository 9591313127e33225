"""Render an evaluation report as the four comparison tables (text or CSV).

Scores are printed with two decimals and gains with one, e.g. ``0.82 (94.8%)``.
The baseline column never carries a gain.
"""

from __future__ import annotations

import csv
import io
import math

from .dataset import GROUP_NAMES, N_GROUPS, SEXES

STAT_ROWS = (("min", "min"), ("max", "max"), ("mean", "mean"), ("SD", "sd"),
             *((f"{p}-PCTL", f"p{p}") for p in range(10, 100, 10)))


def fmt_score(value) -> str:
    return "-" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.2f}"


def fmt_gain(gain) -> str:
    return "" if gain is None or math.isnan(gain) else f" ({gain:.1f}%)"


def fmt_with_gain(value, gain, is_baseline: bool) -> str:
    if value is None:
        return "-"
    return fmt_score(value) if is_baseline else fmt_score(value) + fmt_gain(gain)


def classifier_table(report: dict):
    """Per-group classifier accuracy as ``0.93 (1723/1855)``."""
    clf = report.get("classifier")
    if not clf:
        return None
    header = ["Age Group", *(s.capitalize() for s in SEXES)]
    rows = []
    for g in range(N_GROUPS):
        row = [GROUP_NAMES[g]]
        for sex in SEXES:
            cell = clf[sex]["groups"].get(str(g))
            row.append("-" if cell is None else f"{cell['accuracy']:.2f} ({cell['correct']}/{cell['total']})")
        rows.append(row)
    overall = ["Overall accuracy"]
    for sex in SEXES:
        cells = clf[sex]["groups"].values()
        c, t = sum(x["correct"] for x in cells), sum(x["total"] for x in cells)
        overall.append(f"{c / t:.2f} ({c}/{t})" if t else "-")
    rows.append(overall)
    return "Performance of Gender Classifier", header, rows


def gender_table(report: dict):
    models, base = report["meta"]["models"], report["meta"]["baseline"]
    header = ["Age Group", *(f"{sex[0].upper()}:{m}" for sex in SEXES for m in models)]
    rows = []
    for g in range(N_GROUPS):
        row = [GROUP_NAMES[g]]
        for sex in SEXES:
            for m in models:
                cell = report["models"][m]["gender"][sex]["groups"].get(str(g))
                gain = report["gains"][m]["gender"][sex]["groups"].get(str(g))
                row.append(fmt_with_gain(None if cell is None else cell["accuracy"], gain, m == base))
        rows.append(row)
    avg = ["Average"]
    for sex in SEXES:
        for m in models:
            avg.append(fmt_with_gain(report["models"][m]["gender"][sex]["average"],
                                     report["gains"][m]["gender"][sex]["average"], m == base))
    rows.append(avg)
    return "Gender Score Comparison", header, rows


def distance_table(report: dict):
    models, base = report["meta"]["models"], report["meta"]["baseline"]
    rows = []
    for label, key in STAT_ROWS:
        rows.append([label, *(fmt_with_gain(report["models"][m]["distance_stats"][key],
                                            report["gains"][m]["distance_stats"][key], m == base)
                              for m in models)])
    return "Distance (L2) Statistics Between Original and Simulated Faces", ["", *models], rows


def fr_table(report: dict):
    models, base = report["meta"]["models"], report["meta"]["baseline"]
    rows = []
    for t in report["meta"]["thresholds"]:
        key = f"{t:g}"
        rows.append([f"{t:.1f}", *(fmt_with_gain(report["models"][m]["fr"][key], report["gains"][m]["fr"][key],
                                                 m == base) for m in models)])
    return "Face Recognition (FR) Score Comparison", ["Threshold", *models], rows


def all_tables(report: dict) -> list:
    tables = [classifier_table(report), gender_table(report), distance_table(report), fr_table(report)]
    return [t for t in tables if t is not None]


def render_text(report: dict) -> str:
    out = []
    for i, (title, header, rows) in enumerate(all_tables(report), 1):
        widths = [max(len(str(r[c])) for r in [header, *rows]) for c in range(len(header))]
        line = lambda r: "  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip()
        out.append(f"Table {i}: {title}")
        out.append(line(header))
        out.append("-" * len(line(header)))
        out.extend(line(r) for r in rows)
        out.append("")
    base = report["meta"]["baseline"]
    out.append(f"Numbers in parentheses are percentage gains over {base}.")
    return "\n".join(out) + "\n"


def render_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for i, (title, header, rows) in enumerate(all_tables(report), 1):
        writer.writerow([f"table{i}", title])
        writer.writerow(header)
        writer.writerows(rows)
    return buf.getvalue()
