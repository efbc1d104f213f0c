"""
Metrics from an answer log
==========================

Every metric is a pure function of the JSON-lines answer log. This script
builds a log with the oracle, then recomputes CA, PRS and VDC by hand and
through the library, and renders the report tables.
Run with ``python3 notebooks/03_metrics_from_log.py``.
"""

# %%
import json
import tempfile
from pathlib import Path

from diagrobust.cli import main
from diagrobust.metrics import AMCV_FINAL, PER_VIEW, clean_accuracy, fmt_pct, prs, prs_breakdown, read_log, vdc

work = Path(tempfile.mkdtemp(prefix="metrics-"))
main(["synth", "--count", "30", "--seed", "42", "--out", str(work / "data")])
main(["perturb", "--manifest", str(work / "data" / "manifest.jsonl"), "--seed", "7", "--out", str(work / "views")])
main(["eval", "--manifest", str(work / "views"), "--backend", "oracle", "--out", str(work / "eval")])
log_path = work / "eval" / "answers.jsonl"

# %%
# A direct reading of the raw records.
records = [json.loads(line) for line in log_path.read_text().splitlines()]
summaries = {r["question_id"]: r for r in records if r["record"] == "summary"}
views = {}
for r in records:
    if r["record"] == "view":
        views.setdefault(r["question_id"], []).append(r["canonical"])

m = len(summaries)
ca = sum(views[q][0] == s["gt_canonical"] for q, s in summaries.items()) / m
robust = sum(all(a == s["gt_canonical"] for a in views[q]) for q, s in summaries.items()) / m
agree = sum(sum(a == views[q][0] for a in views[q]) / len(views[q]) for q in summaries) / m
print(f"by hand:  CA {100 * ca:.1f}  PRS {100 * robust:.1f}  VDC {100 * agree:.1f}")

# %%
# The same numbers from the library, kept exact until rendering.
log = read_log(log_path)
print(f"library:  CA {fmt_pct(clean_accuracy(log))}  PRS {fmt_pct(prs(log, PER_VIEW))}  VDC {fmt_pct(vdc(log))}")
print(f"PRS graded on the resolved answer: {fmt_pct(prs(log, AMCV_FINAL))}")

# %%
# Which perturbations hurt the oracle most.
for kind, value in prs_breakdown(log, "kind").items():
    print(f"  {kind:15s} {fmt_pct(value)}")
for level, value in prs_breakdown(log, "intensity").items():
    print(f"  {level:15s} {fmt_pct(value)}")

# %%
# The report command writes every table as Markdown, CSV and LaTeX.
main(["report", "--log", f"oracle={log_path}", "--ablation", str(log_path), "--out", str(work / "report")])
print((work / "report" / "table_ablation.md").read_text())
