"""Robustness metrics computed from answer logs.

All percentages are exact :class:`~fractions.Fraction` values; rounding to
one decimal (half-up) happens only when rendering via :func:`fmt_pct`.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .amcv import ResolutionMode, consistency_score
from .perturb import IntensityLevel, PerturbationKind

__all__ = [
    "GradedQuestion",
    "MalformedLogError",
    "MetricsReport",
    "NoGradableQuestionsError",
    "QuestionLog",
    "clean_accuracy",
    "compute_report",
    "efficiency",
    "fmt_pct",
    "grade",
    "parse_records",
    "prs",
    "prs_breakdown",
    "read_log",
    "reresolve",
    "vdc",
]

PER_VIEW = "per_view"
AMCV_FINAL = "amcv_final"
PRS_MODES = (PER_VIEW, AMCV_FINAL)

_VIEW_FIELDS = ("question_id", "view_index", "canonical")
_SUMMARY_FIELDS = ("question_id", "gt_canonical", "status", "a_final", "total_calls", "wall_ms", "n_views")


class MalformedLogError(ValueError):
    pass


class NoGradableQuestionsError(ValueError):
    pass


@dataclass
class QuestionLog:
    question_id: str
    views: dict = field(default_factory=dict)  # view_index -> record
    summary: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.summary is not None and self.summary.get("status") == "ok"


def parse_records(records, source: str = "<log>") -> list[QuestionLog]:
    """Group ``(line_number, record)`` pairs into per-question logs."""
    by_id: dict[str, QuestionLog] = {}
    for lineno, rec in records:
        where = f"{source}:{lineno}"
        if not isinstance(rec, dict):
            raise MalformedLogError(f"{where}: record is not a JSON object")
        kind = rec.get("record")
        needed = {"view": _VIEW_FIELDS, "summary": _SUMMARY_FIELDS}.get(kind)
        if needed is None:
            raise MalformedLogError(f"{where}: unknown record type {kind!r}")
        missing = [k for k in needed if k not in rec]
        if missing:
            raise MalformedLogError(f"{where}: {kind} record lacks {', '.join(missing)}")
        qlog = by_id.setdefault(rec["question_id"], QuestionLog(rec["question_id"]))
        if kind == "view":
            idx = int(rec["view_index"])
            if idx in qlog.views:
                raise MalformedLogError(f"{where}: duplicate view {idx} for {qlog.question_id}")
            qlog.views[idx] = rec
        else:
            if qlog.summary is not None:
                raise MalformedLogError(f"{where}: duplicate summary for {qlog.question_id}")
            qlog.summary = rec
    for qlog in by_id.values():
        if qlog.summary is None:
            raise MalformedLogError(f"{source}: question {qlog.question_id} has no summary record")
    return list(by_id.values())


def read_log(path) -> list[QuestionLog]:
    path = Path(path)
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pairs.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise MalformedLogError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return parse_records(pairs, source=str(path))


def _as_log(log) -> list[QuestionLog]:
    if isinstance(log, (str, Path)):
        return read_log(log)
    return list(log)


# Grading -----------------------------------------------------------------------


@dataclass(frozen=True)
class GradedQuestion:
    question_id: str
    view_indices: tuple
    correct: tuple  # A_i == GT per view, in view order
    agree: tuple  # A_i == A_0 per view
    final_correct: bool
    kinds: tuple
    intensities: tuple


def _check_views(qlog: QuestionLog, require_all: bool) -> None:
    if 0 not in qlog.views:
        raise MalformedLogError(f"question {qlog.question_id} has no view-0 record")
    if require_all:
        expected = int(qlog.summary["n_views"]) + 1
        if sorted(qlog.views) != list(range(expected)):
            raise MalformedLogError(
                f"question {qlog.question_id}: expected views 0..{expected - 1}, found {sorted(qlog.views)}"
            )


def grade(qlog: QuestionLog, require_all: bool = True) -> GradedQuestion:
    _check_views(qlog, require_all)
    gt = qlog.summary["gt_canonical"]
    order = sorted(qlog.views)
    answers = [qlog.views[i]["canonical"] for i in order]
    clean = qlog.views[0]["canonical"]
    return GradedQuestion(
        question_id=qlog.question_id,
        view_indices=tuple(order),
        correct=tuple(a == gt for a in answers),
        agree=tuple(a == clean for a in answers),
        final_correct=qlog.summary["a_final"] == gt,
        kinds=tuple(qlog.views[i].get("kind") for i in order),
        intensities=tuple(qlog.views[i].get("intensity") for i in order),
    )


def _gradable(log) -> list[QuestionLog]:
    qs = [q for q in _as_log(log) if q.ok]
    if not qs:
        raise NoGradableQuestionsError("no gradable questions in log")
    return qs


def failed_questions(log) -> list[str]:
    return [q.question_id for q in _as_log(log) if not q.ok]


def _percent(hits, m: int) -> Fraction:
    return Fraction(100 * hits, m)


def clean_accuracy(log) -> Fraction:
    qs = _gradable(log)
    hits = sum(grade(q, require_all=False).correct[0] for q in qs)
    return _percent(hits, len(qs))


def prs(log, mode: str = PER_VIEW) -> Fraction:
    """Share of questions answered robustly.

    ``per_view``: every view, clean included, matches the ground truth.
    ``amcv_final``: the resolved final answer matches it.
    """
    if mode not in PRS_MODES:
        raise ValueError(f"unknown PRS mode {mode!r}")
    qs = _gradable(log)
    if mode == PER_VIEW:
        hits = sum(all(grade(q).correct) for q in qs)
    else:
        hits = sum(grade(q, require_all=False).final_correct for q in qs)
    return _percent(hits, len(qs))


def vdc(log) -> Fraction:
    """Mean over questions of the share of views agreeing with the clean view."""
    qs = _gradable(log)
    total = Fraction(0)
    for q in qs:
        g = grade(q)
        total += Fraction(sum(g.agree), len(g.agree))
    return 100 * total / len(qs)


def prs_breakdown(log, facet: str, mode: str = PER_VIEW) -> dict:
    """PRS per perturbation kind or intensity.

    Only the views carrying the tag enter the quantifier (the clean view is
    untagged); the denominator is the number of questions with at least one
    such view. In ``amcv_final`` mode the final answer is graded over that
    same question subset.
    """
    if facet not in ("kind", "intensity"):
        raise ValueError(f"unknown facet {facet!r}")
    valid = {v.value for v in (PerturbationKind if facet == "kind" else IntensityLevel)}
    order = [v.value for v in (PerturbationKind if facet == "kind" else IntensityLevel)]
    hits: dict[str, int] = {}
    seen: dict[str, int] = {}
    for q in _gradable(log):
        g = grade(q)
        tags = g.kinds if facet == "kind" else g.intensities
        per_tag: dict[str, bool] = {}
        for idx, tag, ok in zip(g.view_indices, tags, g.correct):
            if idx == 0:
                continue
            if tag not in valid:
                raise MalformedLogError(f"question {q.question_id} view {idx}: unknown {facet} tag {tag!r}")
            per_tag[tag] = per_tag.get(tag, True) and ok
        for tag, robust in per_tag.items():
            seen[tag] = seen.get(tag, 0) + 1
            good = robust if mode == PER_VIEW else g.final_correct
            hits[tag] = hits.get(tag, 0) + int(good)
    return {tag: _percent(hits[tag], seen[tag]) for tag in order if tag in seen}


def efficiency(log) -> dict:
    qs = _gradable(log)
    per_q = [int(q.summary["total_calls"]) for q in qs]
    wall_s = sum(float(q.summary["wall_ms"]) for q in qs) / len(qs) / 1000.0
    return {
        "mean_wall_s_per_question": wall_s,
        "mean_calls_per_question": Fraction(sum(per_q), len(qs)),
        "min_calls": min(per_q),
        "max_calls": max(per_q),
    }


# Re-resolution for ablations ---------------------------------------------------------


def reresolve(log, mode, tau: float | None = None) -> list[QuestionLog]:
    """Rewrite summaries as if the run had used another resolution mode.

    ``single_view`` keeps the clean answer (1 call); ``majority_vote`` keeps
    the mode of the logged view answers (N+1 calls). A full-AMCV summary can
    only come from a full-AMCV log, since it needs the correction reply.
    View records are kept so per-view metrics stay computable.
    """
    mode = ResolutionMode(mode)
    out = []
    for q in _as_log(log):
        q2 = QuestionLog(q.question_id, dict(q.views), copy.deepcopy(q.summary))
        s = q2.summary
        src = ResolutionMode(s.get("resolution_mode", ResolutionMode.FULL_AMCV.value))
        if mode is ResolutionMode.FULL_AMCV and src is not ResolutionMode.FULL_AMCV:
            raise ValueError("cannot derive full_amcv resolution from a log without correction replies")
        if q2.ok and mode is not src:
            if src is ResolutionMode.SINGLE_VIEW:
                raise ValueError("a single_view log has no perturbed views to re-resolve")
            canon = [q2.views[i]["canonical"] for i in sorted(q2.views)]
            c_q, a_mode = consistency_score(canon)
            s["c_q"] = f"{c_q.numerator}/{c_q.denominator}"
            s["a_mode"] = a_mode
            s["triggered"] = False
            s["correction_raw"] = None
            if mode is ResolutionMode.SINGLE_VIEW:
                s["a_final"] = q2.views[0]["canonical"]
                s["total_calls"] = 1
            else:
                s["a_final"] = a_mode
                s["total_calls"] = len(canon)
            s["resolution_mode"] = mode.value
            s["derived_from"] = src.value
        if tau is not None:
            s["tau"] = tau
        out.append(q2)
    return out


# Report -----------------------------------------------------------------------------


def fmt_pct(value) -> str:
    """One decimal place, rounding half up."""
    frac = Fraction(value)
    sign = "-" if frac < 0 else ""
    tenths = (abs(frac) * 10 + Fraction(1, 2)).__floor__()
    return f"{sign}{tenths // 10}.{tenths % 10}"


def default_prs_mode(log) -> str:
    modes = {q.summary.get("resolution_mode") for q in _as_log(log) if q.ok}
    return PER_VIEW if modes <= {ResolutionMode.SINGLE_VIEW.value} else AMCV_FINAL


@dataclass
class MetricsReport:
    ca: Fraction
    prs: Fraction
    vdc: Fraction
    prs_mode: str
    prs_per_view: Fraction
    by_kind: dict
    by_intensity: dict
    efficiency: dict
    m: int
    failed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def num(x):
            return float(x)

        return {
            "m": self.m,
            "failed_questions": list(self.failed),
            "ca": num(self.ca),
            "prs": num(self.prs),
            "prs_mode": self.prs_mode,
            "prs_per_view": num(self.prs_per_view),
            "vdc": num(self.vdc),
            "breakdown_mode": PER_VIEW,
            "by_kind": {k: num(v) for k, v in self.by_kind.items()},
            "by_intensity": {k: num(v) for k, v in self.by_intensity.items()},
            "efficiency": {
                "mean_wall_s_per_question": self.efficiency["mean_wall_s_per_question"],
                "mean_calls_per_question": num(self.efficiency["mean_calls_per_question"]),
                "min_calls": self.efficiency["min_calls"],
                "max_calls": self.efficiency["max_calls"],
            },
        }


def compute_report(log, prs_mode: str | None = None) -> MetricsReport:
    qlogs = _as_log(log)
    qs = _gradable(qlogs)
    mode = prs_mode or default_prs_mode(qs)
    return MetricsReport(
        ca=clean_accuracy(qs),
        prs=prs(qs, mode),
        vdc=vdc(qs),
        prs_mode=mode,
        prs_per_view=prs(qs, PER_VIEW),
        # a_final is one answer per question, so faceting it cannot separate kinds
        by_kind=prs_breakdown(qs, "kind", PER_VIEW),
        by_intensity=prs_breakdown(qs, "intensity", PER_VIEW),
        efficiency=efficiency(qs),
        m=len(qs),
        failed=failed_questions(qlogs),
    )
