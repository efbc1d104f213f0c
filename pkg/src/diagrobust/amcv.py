"""Multi-view inference with consistency scoring and one-shot self-correction.

For each question the clean image and its N perturbed views are sent to the
backend in parallel. The canonical answers are scored by the share held by
the modal answer; below the threshold ``tau`` one extra call asks the model
to reconcile its answers against the clean image.
"""
from __future__ import annotations

import enum
import json
import logging
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .backend import (
    VERBATIM_TEMPLATE,
    Backend,
    BackendError,
    ConfigError,
    ModelRequest,
    cache_key,
)
from .image import Image, read_png
from .records import CHOICE_LETTERS, AnswerType, QuestionRecord

__all__ = [
    "AnswerSet",
    "AnswerType",
    "OrchestratorConfig",
    "PreconditionError",
    "ResolutionMode",
    "UNPARSEABLE",
    "ViewAnswer",
    "ViewInput",
    "answer_set_records",
    "build_self_correction_prompt",
    "consistency_score",
    "evaluate",
    "normalize_answer",
    "resolve_final",
    "run_multi_view",
]

log = logging.getLogger(__name__)

UNPARSEABLE = "UNPARSEABLE"
FINAL_MARKER = "Final answer:"


class PreconditionError(ValueError):
    pass


class ResolutionMode(str, enum.Enum):
    SINGLE_VIEW = "single_view"
    MAJORITY_VOTE = "majority_vote"
    FULL_AMCV = "full_amcv"


@dataclass(frozen=True)
class OrchestratorConfig:
    tau: float = 0.6
    n_views: int = 10
    resolution_mode: ResolutionMode = ResolutionMode.FULL_AMCV

    def __post_init__(self):
        object.__setattr__(self, "resolution_mode", ResolutionMode(self.resolution_mode))
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must be in [0, 1]")

    @property
    def tau_fraction(self) -> Fraction:
        return Fraction(str(self.tau))


# Answer normalisation ----------------------------------------------------------

_LABEL = re.compile(r"^\s*(?:final\s+answer|answer)\s*[:：]\s*", re.I)
_MARKED_LETTER = re.compile(
    r"(final\s+answer|answer)\s*(?:is\s*)?[:：\-]?\s*\(?([A-Ea-e])\)?(?![A-Za-z0-9])", re.I
)
_BARE_LETTER = re.compile(r"\(?([A-Ea-e])\)?[.:)]?")
_LEADING_OPTION = re.compile(r"\(?([A-E])[).:]\s")
_NUMBER = re.compile(r"^([-+]?)(\d{1,3}(?:,\d{3})+|\d+)(\.\d+)?(?![\d,])")
_ARTICLE = re.compile(r"^(?:a|an|the)\s+")
_TERMINAL_PUNCT = ".,;:!?。"


def _canonical_number(match: re.Match) -> str:
    sign, whole, frac = match.group(1), match.group(2).replace(",", ""), match.group(3) or ""
    whole = whole.lstrip("0") or "0"
    frac = frac.rstrip("0")
    if frac == ".":
        frac = ""
    num = whole + frac
    if sign == "-" and num.strip("0.") != "":
        num = "-" + num
    return num


def _free_form(text: str) -> str:
    t = _LABEL.sub("", text.strip()).lower()
    t = " ".join(t.split())
    t = t.rstrip(_TERMINAL_PUNCT + " ")
    t = _ARTICLE.sub("", t)
    m = _NUMBER.match(t)
    if m:
        t = _canonical_number(m) + t[m.end() :]
    return t


def _choice_letter(raw: str, choices) -> str:
    letters = CHOICE_LETTERS[: len(choices)] if choices else CHOICE_LETTERS
    text = raw.strip()
    marked = list(_MARKED_LETTER.finditer(text))
    finals = [m for m in marked if m.group(1).lower().startswith("final")]
    for m in reversed(finals or marked):
        if m.group(2).upper() in letters:
            return m.group(2).upper()
    m = _BARE_LETTER.fullmatch(text)
    if m and m.group(1).upper() in letters:
        return m.group(1).upper()
    if choices:
        target = _free_form(text)
        hits = [i for i, c in enumerate(choices) if _free_form(str(c)) == target]
        if len(hits) == 1:
            return letters[hits[0]]
    m = _LEADING_OPTION.match(text)
    if m and m.group(1) in letters:
        return m.group(1)
    return UNPARSEABLE


def normalize_answer(raw: str, kind, choices=None) -> str:
    """Canonical form used for every answer-equality test.

    Multiple choice gives an option letter or ``UNPARSEABLE``. Free-form
    answers are lower-cased, whitespace-collapsed, stripped of terminal
    punctuation and a leading article, and a leading number loses thousands
    separators and trailing zeros.
    """
    if AnswerType(kind) is AnswerType.MULTIPLE_CHOICE:
        return _choice_letter(raw, choices)
    return _free_form(raw)


def consistency_score(canon_answers) -> tuple[Fraction, str]:
    """``(share of the modal answer, modal answer)``; ties go to the lowest view index."""
    if not canon_answers:
        raise ValueError("need at least one answer")
    counts = Counter(canon_answers)
    top = max(counts.values())
    mode = next(a for a in canon_answers if counts[a] == top)
    return Fraction(top, len(canon_answers)), mode


# Answer sets ----------------------------------------------------------------------


@dataclass(frozen=True)
class ViewInput:
    view_index: int
    image: Image
    kind: Optional[str] = None
    intensity: Optional[str] = None


@dataclass
class ViewAnswer:
    view_index: int
    raw: str
    canonical: str
    kind: Optional[str] = None
    intensity: Optional[str] = None
    digest: str = ""
    latency_ms: float = 0.0


@dataclass
class AnswerSet:
    question_id: str
    answers: list = field(default_factory=list)
    c_q: Optional[Fraction] = None
    a_mode: Optional[str] = None
    triggered_correction: bool = False
    a_final: Optional[str] = None
    extra_calls: int = 0
    resolution_mode: ResolutionMode = ResolutionMode.FULL_AMCV
    failed: bool = False
    error: str = ""
    correction_raw: Optional[str] = None
    correction_error: str = ""
    wall_ms: float = 0.0

    @property
    def total_calls(self) -> int:
        return len(self.answers) + self.extra_calls

    @property
    def canonical(self) -> list[str]:
        return [a.canonical for a in self.answers]


def build_self_correction_prompt(q: QuestionRecord, answers: AnswerSet) -> str:
    canon = answers.canonical
    if len(set(canon)) < 2:
        raise PreconditionError("self-correction needs at least two distinct answers")
    lines = [
        f'You have provided different answers for the question "{q.question_text}" '
        "based on slightly varied visual presentations of the diagram.",
    ]
    if q.choices:
        lines.append("Options: " + "; ".join(f"({CHOICE_LETTERS[i]}) {c}" for i, c in enumerate(q.choices)))
    lines.append("Your responses were:")
    for a in answers.answers:
        if a.view_index == 0:
            source = "original, unperturbed diagram"
        else:
            source = f"perturbed view {a.view_index}: {a.kind}, {a.intensity} intensity"
        lines.append(f"- A_{a.view_index} ({source}): {a.canonical}")
    lines.append(
        "Please re-examine the diagram and your previous answers, identify the most "
        "consistent and likely correct answer among them, and explain your reasoning "
        "for the final choice."
    )
    lines.append(f'End your reply with one line of the form "{FINAL_MARKER} <answer>".')
    return "\n".join(lines)


def _request(q: QuestionRecord, image: Image, view_index: int) -> ModelRequest:
    return ModelRequest(
        image=image,
        question_text=q.question_text,
        answer_type=q.answer_type,
        choices=q.choices,
        question_id=q.id,
        view_index=view_index,
    )


def resolve_final(q: QuestionRecord, answers: AnswerSet, backend: Backend, cfg: OrchestratorConfig, clean_image: Image) -> str:
    """Fill ``a_final`` (and correction fields) on ``answers`` and return it.

    ``c_q >= tau`` keeps the mode. Below it, full AMCV makes one call on the
    clean image with the reconciliation prompt; an unparseable reply or a
    transport failure falls back to the mode.
    """
    if answers.c_q is None or answers.a_mode is None:
        raise PreconditionError("consistency score not computed")
    mode = cfg.resolution_mode
    if mode is ResolutionMode.SINGLE_VIEW:
        answers.a_final = answers.answers[0].canonical
        return answers.a_final
    answers.a_final = answers.a_mode
    if mode is ResolutionMode.MAJORITY_VOTE or answers.c_q >= cfg.tau_fraction:
        return answers.a_final
    answers.triggered_correction = True
    answers.extra_calls = 1
    req = ModelRequest(
        image=clean_image,
        question_text=build_self_correction_prompt(q, answers),
        answer_type=q.answer_type,
        choices=q.choices,
        prompt_template_id=VERBATIM_TEMPLATE,
        question_id=q.id,
        view_index=0,
    )
    try:
        resp = backend.infer(req)
    except ConfigError:
        raise
    except BackendError as exc:
        answers.correction_error = str(exc)
        log.warning("self-correction failed for %s: %s", q.id, exc)
        return answers.a_final
    answers.correction_raw = resp.raw_text
    corrected = normalize_answer(resp.raw_text, q.answer_type, q.choices)
    if corrected not in (UNPARSEABLE, ""):
        answers.a_final = corrected
    return answers.a_final


def run_multi_view(q: QuestionRecord, views, backend: Backend, cfg: OrchestratorConfig, executor=None) -> AnswerSet:
    """Query every view, score agreement, and resolve the final answer.

    ``views`` is a sequence of :class:`ViewInput` with the clean image at
    index 0. Answers are stored by view index whatever order calls finish in.
    A backend failure marks the set failed and keeps the answers gathered.
    """
    t0 = time.perf_counter()
    views = sorted(views, key=lambda v: v.view_index)
    if not views or views[0].view_index != 0:
        raise PreconditionError(f"question {q.id}: the clean view (index 0) is required")
    if cfg.resolution_mode is ResolutionMode.SINGLE_VIEW:
        views = views[:1]
    aset = AnswerSet(question_id=q.id, resolution_mode=cfg.resolution_mode)

    def call(view: ViewInput):
        req = _request(q, view.image, view.view_index)
        try:
            resp = backend.infer(req)
        except ConfigError:
            raise
        except BackendError as exc:
            return view, exc
        return view, resp

    own = executor is None
    pool = ThreadPoolExecutor(max_workers=backend.max_in_flight) if own else executor
    try:
        results = list(pool.map(call, views))
    finally:
        if own:
            pool.shutdown()

    errors = []
    for view, outcome in results:
        if isinstance(outcome, BackendError):
            errors.append(f"view {view.view_index}: {outcome}")
            continue
        aset.answers.append(
            ViewAnswer(
                view_index=view.view_index,
                raw=outcome.raw_text,
                canonical=normalize_answer(outcome.raw_text, q.answer_type, q.choices),
                kind=view.kind,
                intensity=view.intensity,
                digest=outcome.digest or cache_key(_request(q, view.image, view.view_index), backend.model_name),
                latency_ms=outcome.latency_ms,
            )
        )
    if errors:
        aset.failed = True
        aset.error = "; ".join(errors)
    else:
        aset.c_q, aset.a_mode = consistency_score(aset.canonical)
        resolve_final(q, aset, backend, cfg, views[0].image)
    aset.wall_ms = (time.perf_counter() - t0) * 1e3
    return aset


# Answer log ---------------------------------------------------------------------------


def answer_set_records(q: QuestionRecord, aset: AnswerSet, cfg: OrchestratorConfig, n_views: int) -> list[dict]:
    """Log records for one question: one per view, then a summary."""
    records = []
    for a in aset.answers:
        records.append(
            {
                "record": "view",
                "question_id": q.id,
                "view_index": a.view_index,
                "kind": a.kind,
                "intensity": a.intensity,
                "digest": a.digest,
                "raw": a.raw,
                "canonical": a.canonical,
                "latency_ms": round(a.latency_ms, 3),
            }
        )
    records.append(
        {
            "record": "summary",
            "question_id": q.id,
            "answer_type": q.answer_type.value,
            "domain": q.domain,
            "ground_truth": q.ground_truth,
            "gt_canonical": normalize_answer(q.ground_truth, q.answer_type, q.choices),
            "resolution_mode": cfg.resolution_mode.value,
            "tau": cfg.tau,
            "n_views": 0 if cfg.resolution_mode is ResolutionMode.SINGLE_VIEW else n_views,
            "status": "failed" if aset.failed else "ok",
            "error": aset.error,
            "c_q": None if aset.c_q is None else f"{aset.c_q.numerator}/{aset.c_q.denominator}",
            "a_mode": aset.a_mode,
            "triggered": aset.triggered_correction,
            "a_final": aset.a_final,
            "correction_raw": aset.correction_raw,
            "correction_error": aset.correction_error,
            "total_calls": aset.total_calls,
            "wall_ms": round(aset.wall_ms, 3),
        }
    )
    return records


class AnswerLogWriter:
    """Append-only JSON-lines writer; each record is written and flushed whole."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _views_for(entry, root: Path) -> list[ViewInput]:
    views = [ViewInput(0, read_png(root / entry.clean_path))]
    for v in entry.views:
        views.append(ViewInput(int(v["view_index"]), read_png(root / v["path"]), v["kind"], v["intensity"]))
    return views


def evaluate(manifest, backend: Backend, cfg: OrchestratorConfig, log_path, question_workers: int = 4) -> list[AnswerSet]:
    """Run every question of an augmented manifest and write the answer log.

    Questions run concurrently; records are written in manifest order so
    the log does not depend on scheduling.
    """
    root = Path(manifest.root)
    view_pool = ThreadPoolExecutor(max_workers=backend.max_in_flight)

    def one(entry):
        views = _views_for(entry, root)
        return run_multi_view(entry.question, views, backend, cfg, executor=view_pool)

    results = []
    try:
        with AnswerLogWriter(log_path) as writer, ThreadPoolExecutor(max_workers=max(1, question_workers)) as qpool:
            for entry, aset in zip(manifest.entries, qpool.map(one, manifest.entries)):
                for rec in answer_set_records(entry.question, aset, cfg, manifest.n_views):
                    writer.write(rec)
                results.append(aset)
    finally:
        view_pool.shutdown()
    return results
