"""Question manifests, the augmentation builder, and synthetic bar charts."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, ImageFont

from .image import Image, PngDecodeError, derive_stream, read_png, write_png
from .perturb import DEFAULT_TABLE, IntensityTable, apply_perturbation, build_view_plan
from .records import DOMAINS, AnswerType, QuestionRecord, RecordError

__all__ = [
    "AugmentedEntry",
    "AugmentedManifest",
    "ManifestError",
    "augment",
    "load_augmented",
    "load_manifest",
    "render_bar_chart",
    "synth_generate",
    "write_manifest",
]

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# Synthetic chart layout (pixels).
CANVAS = 256
BASELINE_Y = 224
AXIS_X = 24
PLOT_LEFT = 32
PLOT_RIGHT = 248
PX_PER_UNIT = 2
BAR_VALUES = tuple(range(10, 101, 10))
BAR_LABELS = "ABCDE"
BAR_COLORS = ((220, 30, 30), (30, 150, 40), (30, 60, 210), (235, 150, 0), (140, 40, 170))
QUESTION_KINDS = ("tallest", "value", "compare")


class ManifestError(ValueError):
    pass


# Question manifests (JSON lines) ------------------------------------------------


def load_manifest(path) -> list[QuestionRecord]:
    """Read a JSON-lines manifest; relative image paths resolve against its directory."""
    path = Path(path)
    records, seen = [], set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                if not isinstance(data, dict):
                    raise RecordError("record must be a JSON object")
                rec = QuestionRecord.from_dict(data)
            except (json.JSONDecodeError, RecordError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate question id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def resolve_image(rec: QuestionRecord, base_dir) -> Path:
    p = Path(rec.image_path)
    return p if p.is_absolute() else Path(base_dir) / p


# Augmentation --------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentedEntry:
    question: QuestionRecord
    clean_path: str
    views: tuple  # of dicts: view_index, kind, intensity, path, lineage

    def to_dict(self) -> dict:
        return {
            "question": self.question.to_dict(),
            "clean_path": self.clean_path,
            "views": list(self.views),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentedEntry":
        return cls(
            question=QuestionRecord.from_dict(data["question"]),
            clean_path=data["clean_path"],
            views=tuple(data["views"]),
        )


@dataclass
class AugmentedManifest:
    root: Path
    master_seed: int
    n_views: int
    table: IntensityTable
    entries: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "n_views": self.n_views,
            "intensity_table": self.table.to_dict(),
            "questions": [e.to_dict() for e in self.entries],
            "failures": self.failures,
        }

    def path_of(self, rel: str) -> Path:
        return self.root / rel


def load_augmented(path) -> AugmentedManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = json.loads(path.read_text(encoding="utf-8"))
    return AugmentedManifest(
        root=path.parent,
        master_seed=int(data["master_seed"]),
        n_views=int(data["n_views"]),
        table=IntensityTable.from_dict(data["intensity_table"]),
        entries=[AugmentedEntry.from_dict(e) for e in data["questions"]],
        failures=list(data.get("failures", [])),
    )


def _safe_dirname(qid: str) -> str:
    if qid in (".", "..") or any(c in qid for c in "/\\\0"):
        raise ManifestError(f"question id {qid!r} cannot be used as a directory name")
    return qid


def _augment_one(rec, master_seed, n_views, table, out_dir: Path, base_dir) -> AugmentedEntry:
    clean = read_png(resolve_image(rec, base_dir))
    qdir = out_dir / _safe_dirname(rec.id)
    plan = build_view_plan(rec.id, master_seed, n_views)
    write_png(clean, qdir / "view_0.png")
    views = []
    for spec in plan.specs:
        rel = f"{rec.id}/view_{spec.view_index}.png"
        write_png(apply_perturbation(clean, spec, table), out_dir / rel)
        views.append({**spec.to_dict(), "path": rel})
    (qdir / "plan.json").write_text(
        json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return AugmentedEntry(question=rec, clean_path=f"{rec.id}/view_0.png", views=tuple(views))


def augment(
    questions,
    master_seed: int,
    n_views: int = 10,
    table: IntensityTable = DEFAULT_TABLE,
    out_dir=".",
    base_dir=".",
    workers: int = 4,
) -> AugmentedManifest:
    """Write ``<out>/<qid>/view_{0..N}.png``, per-question ``plan.json`` and ``manifest.json``.

    Undecodable images are recorded in ``failures`` and the run continues.
    Re-running with the same arguments rewrites identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    build_view_plan("probe", master_seed, n_views)  # fail fast on a bad view count

    def work(rec):
        try:
            return _augment_one(rec, master_seed, n_views, table, out_dir, base_dir), None
        except (OSError, PngDecodeError, ManifestError) as exc:
            log.warning("augmentation failed for %s: %s", rec.id, exc)
            return None, {"id": rec.id, "error": str(exc)}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, questions))

    manifest = AugmentedManifest(root=out_dir, master_seed=master_seed, n_views=n_views, table=table)
    for entry, failure in results:
        if entry is not None:
            manifest.entries.append(entry)
        else:
            manifest.failures.append(failure)
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


# Synthetic bar charts --------------------------------------------------------------


def bar_layout(n_bars: int) -> list[tuple[int, int]]:
    """Column span ``[x0, x1)`` of each bar."""
    slot = (PLOT_RIGHT - PLOT_LEFT) // n_bars
    width = int(slot * 0.6)
    spans = []
    for i in range(n_bars):
        x0 = PLOT_LEFT + i * slot + (slot - width) // 2
        spans.append((x0, x0 + width))
    return spans


def render_bar_chart(values) -> tuple[Image, dict]:
    """Draw a bar chart and return it with its render schema.

    The schema records layout constants and the drawn values. Readers that
    stand in for a model must use only the layout part.
    """
    canvas = PILImage.new("RGB", (CANVAS, CANVAS), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default_imagefont()
    spans = bar_layout(len(values))
    for i, ((x0, x1), v) in enumerate(zip(spans, values)):
        top = BASELINE_Y - v * PX_PER_UNIT
        draw.rectangle([x0, top, x1 - 1, BASELINE_Y - 1], fill=BAR_COLORS[i])
        draw.text(((x0 + x1) // 2 - 3, BASELINE_Y + 8), BAR_LABELS[i], fill=(0, 0, 0), font=font)
    draw.line([(AXIS_X, 8), (AXIS_X, BASELINE_Y)], fill=(0, 0, 0), width=2)
    draw.line([(AXIS_X, BASELINE_Y), (PLOT_RIGHT + 4, BASELINE_Y)], fill=(0, 0, 0), width=1)
    schema = {
        "chart": "bar",
        "canvas": [CANVAS, CANVAS],
        "baseline_y": BASELINE_Y,
        "px_per_unit": PX_PER_UNIT,
        "bars": [
            {"label": BAR_LABELS[i], "x0": x0, "x1": x1, "value": int(v)}
            for i, ((x0, x1), v) in enumerate(zip(spans, values))
        ],
    }
    return Image(np.asarray(canvas)), schema


def _make_question(kind, values, rng):
    labels = BAR_LABELS[: len(values)]
    if kind == "tallest":
        gt = labels[int(np.argmax(values))]
        return (
            "Which bar is the tallest?",
            AnswerType.MULTIPLE_CHOICE,
            tuple(f"bar {lab}" for lab in labels),
            gt,
            {"type": "tallest"},
        )
    if kind == "value":
        i = rng.integers(len(values))
        return (
            f"What is the value of bar {labels[i]}?",
            AnswerType.FILL_IN_BLANK,
            None,
            str(values[i]),
            {"type": "value", "target": labels[i]},
        )
    i, j = rng.permutation(len(values))[:2]
    return (
        f"Is bar {labels[i]} taller than bar {labels[j]}?",
        AnswerType.SHORT_ANSWER,
        None,
        "yes" if values[i] > values[j] else "no",
        {"type": "compare", "target": labels[i], "other": labels[j]},
    )


def synth_generate(count: int, master_seed: int, out_dir) -> list[QuestionRecord]:
    """Render ``count`` bar-chart questions and write ``manifest.jsonl`` + images.

    Bars take distinct values from 10..100 in steps of 10 (20 px apart), so
    ground truth follows from the drawn values alone.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    records = []
    for n in range(count):
        qid = f"synth-{n:04d}"
        rng = derive_stream(master_seed, qid, 0)
        n_bars = 3 + rng.integers(3)
        values = [BAR_VALUES[k] for k in rng.permutation(len(BAR_VALUES))[:n_bars]]
        kind = QUESTION_KINDS[rng.integers(len(QUESTION_KINDS))]
        text, atype, choices, gt, question_schema = _make_question(kind, values, rng)
        img, schema = render_bar_chart(values)
        schema["question"] = question_schema
        rel = f"images/{qid}.png"
        write_png(img, out_dir / rel)
        records.append(
            QuestionRecord(
                id=qid,
                image_path=rel,
                question_text=text,
                answer_type=atype,
                choices=choices,
                ground_truth=gt,
                domain=DOMAINS[rng.integers(len(DOMAINS))],
                subtopic="bar chart reading",
                render_schema=schema,
            )
        )
    write_manifest(records, out_dir / "manifest.jsonl")
    return records
