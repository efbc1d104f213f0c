"""Table rendering for metrics reports (Markdown, CSV and LaTeX rows)."""
from __future__ import annotations

import csv
import io
import json
from fractions import Fraction
from pathlib import Path

from .metrics import (
    AMCV_FINAL,
    PER_VIEW,
    _as_log,
    compute_report,
    fmt_pct,
    reresolve,
)

__all__ = [
    "KIND_NAMES",
    "LEVEL_NAMES",
    "ablation_reports",
    "render",
    "table_ablation",
    "table_by_intensity",
    "table_by_kind",
    "table_efficiency",
    "table_models",
    "write_reports",
]

KIND_NAMES = {
    "gaussian_noise": "Gaussian Noise",
    "salt_pepper": "Salt-and-Pepper Noise",
    "motion_blur": "Motion Blur",
    "occlusion": "Local Occlusion",
    "rotation": "Slight Rotation",
}
LEVEL_NAMES = {"low": "Low", "medium": "Medium", "high": "High"}
ABLATION_LABELS = {
    "single_view": "Single View (Baseline)",
    "majority_vote": "Multi-View Majority Vote",
    "full_amcv": "Full AMCV",
}

FORMATS = ("md", "csv", "tex")


def render(headers, rows, fmt: str = "md") -> str:
    if fmt == "md":
        align = ["---"] + ["---:"] * (len(headers) - 1)
        lines = ["| " + " | ".join(headers) + " |", "| " + " | ".join(align) + " |"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "tex":
        lines = [" & ".join(headers) + r" \\", r"\midrule"]
        lines += [" & ".join(r) + r" \\" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def _signed(x: Fraction) -> str:
    s = fmt_pct(x)
    return s if s.startswith("-") else "+" + s


def model_row(name: str, ca, prs, vdc) -> list[str]:
    return [name, fmt_pct(ca), fmt_pct(prs), fmt_pct(vdc)]


def table_models(named: list) -> tuple[list, list]:
    """Model comparison: one row of CA / PRS / VDC per ``(name, MetricsReport)``."""
    rows = [model_row(name, r.ca, r.prs, r.vdc) for name, r in named]
    return ["Model Name", "CA", "PRS", "VDC"], rows


def table_ablation(named: list) -> tuple[list, list]:
    rows = [model_row(name, r.ca, r.prs, r.vdc) for name, r in named]
    return ["Variant", "CA", "PRS", "VDC"], rows


def _facet_table(named, attr, names, first_header):
    headers = [first_header] + [f"{name} PRS" for name, _ in named]
    rows, cols = [], [getattr(r, attr) for _, r in named]
    for key, label in names.items():
        if any(key in c for c in cols):
            rows.append([label] + [fmt_pct(c[key]) if key in c else "-" for c in cols])
    return headers, rows, cols


def table_by_kind(named: list) -> tuple[list, list]:
    headers, rows, cols = _facet_table(named, "by_kind", KIND_NAMES, "Perturbation Type")
    avg = [sum(c.values(), Fraction(0)) / len(c) if c else None for c in cols]
    rows.append(["Average PRS"] + [fmt_pct(a) if a is not None else "-" for a in avg])
    return headers, rows


def table_by_intensity(named: list) -> tuple[list, list]:
    headers, rows, cols = _facet_table(named, "by_intensity", LEVEL_NAMES, "Intensity Level")
    if len(named) == 2:
        headers.append("Improvement")
        base, new = cols
        for row, key in zip(rows, [k for k in LEVEL_NAMES if any(k in c for c in cols)]):
            row.append(_signed(new[key] - base[key]) if key in base and key in new else "-")
    return headers, rows


def _calls_cell(eff: dict) -> str:
    lo, hi = eff.get("min_calls"), eff.get("max_calls")
    if lo is None or lo == hi:
        return str(lo if lo is not None else fmt_pct(eff["mean_calls_per_question"]))
    return f"{lo} -- {hi}"


def table_efficiency(named: list) -> tuple[list, list]:
    rows = []
    for name, r in named:
        eff = r.efficiency
        seconds = Fraction(repr(float(eff["mean_wall_s_per_question"])))
        rows.append([name, fmt_pct(seconds), _calls_cell(eff)])
    return ["Model", "Time per Question (seconds)", "API Calls per Question"], rows


def ablation_reports(log) -> list:
    """Single-view, majority-vote and full-AMCV reports from one full-AMCV log.

    The baseline row grades every logged view of the plain model
    (per-view PRS); the two multi-view rows grade the resolved answer.
    """
    qlogs = _as_log(log)
    single = compute_report(reresolve(qlogs, "single_view"), prs_mode=PER_VIEW)
    majority = compute_report(reresolve(qlogs, "majority_vote"), prs_mode=AMCV_FINAL)
    full = compute_report(qlogs, prs_mode=AMCV_FINAL)
    return [
        (ABLATION_LABELS["single_view"], single),
        (ABLATION_LABELS["majority_vote"], majority),
        (ABLATION_LABELS["full_amcv"], full),
    ]


def _write_table(out: Path, stem: str, headers, rows) -> None:
    for fmt in FORMATS:
        (out / f"{stem}.{fmt}").write_text(render(headers, rows, fmt), encoding="utf-8")


def write_reports(out_dir, model_logs: list, ablation_log=None) -> dict:
    """Compute reports for ``[(name, log_path)]`` and write every table.

    Files: ``metrics.json`` and ``table_models``, ``table_by_kind``,
    ``table_by_intensity``, ``table_efficiency`` (and ``table_ablation``
    when an ablation log is given), each as ``.md``, ``.csv`` and ``.tex``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    named = [(name, compute_report(path)) for name, path in model_logs]
    summary = {name: r.to_dict() for name, r in named}
    if named:
        _write_table(out, "table_models", *table_models(named))
        _write_table(out, "table_by_kind", *table_by_kind(named))
        _write_table(out, "table_by_intensity", *table_by_intensity(named))
        _write_table(out, "table_efficiency", *table_efficiency(named))
    if ablation_log is not None:
        ablation = ablation_reports(ablation_log)
        _write_table(out, "table_ablation", *table_ablation(ablation))
        summary["ablation"] = {name: r.to_dict() for name, r in ablation}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
