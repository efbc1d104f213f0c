"""Question records shared by the dataset, backend and orchestration layers."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

__all__ = ["AnswerType", "DOMAINS", "QuestionRecord", "RecordError"]

DOMAINS = ("Physics", "Chemistry", "Biology", "Geography")
CHOICE_LETTERS = "ABCDE"


class RecordError(ValueError):
    pass


class AnswerType(str, enum.Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    FILL_IN_BLANK = "fill_in_blank"
    SHORT_ANSWER = "short_answer"


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    image_path: str
    question_text: str
    answer_type: AnswerType
    ground_truth: str
    domain: str
    subtopic: str = ""
    choices: Optional[tuple] = None
    render_schema: Optional[dict] = field(default=None, compare=True, hash=False)

    def __post_init__(self):
        try:
            object.__setattr__(self, "answer_type", AnswerType(self.answer_type))
        except ValueError as exc:
            raise RecordError(f"unknown answer_type {self.answer_type!r}") from exc
        if not self.id:
            raise RecordError("question id must be non-empty")
        if self.domain not in DOMAINS:
            raise RecordError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))
        if self.answer_type is AnswerType.MULTIPLE_CHOICE:
            if self.choices is None or not 2 <= len(self.choices) <= 5:
                raise RecordError("multiple_choice questions need 2-5 choices")
            allowed = CHOICE_LETTERS[: len(self.choices)]
            if self.ground_truth not in allowed:
                raise RecordError(
                    f"ground_truth {self.ground_truth!r} is not one of the option letters {allowed}"
                )

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "image_path": self.image_path,
            "question_text": self.question_text,
            "answer_type": self.answer_type.value,
            "choices": list(self.choices) if self.choices is not None else None,
            "ground_truth": self.ground_truth,
            "domain": self.domain,
            "subtopic": self.subtopic,
        }
        if self.render_schema is not None:
            d["render_schema"] = self.render_schema
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "QuestionRecord":
        required = ("id", "image_path", "question_text", "answer_type", "ground_truth", "domain")
        missing = [k for k in required if k not in data]
        if missing:
            raise RecordError(f"missing field(s): {', '.join(missing)}")
        unknown = set(data) - set(required) - {"choices", "subtopic", "render_schema"}
        if unknown:
            raise RecordError(f"unknown field(s): {', '.join(sorted(unknown))}")
        for key in ("id", "image_path", "question_text", "ground_truth", "domain"):
            if not isinstance(data[key], str):
                raise RecordError(f"field {key!r} must be a string")
        return cls(
            id=data["id"],
            image_path=data["image_path"],
            question_text=data["question_text"],
            answer_type=data["answer_type"],
            ground_truth=data["ground_truth"],
            domain=data["domain"],
            subtopic=data.get("subtopic", ""),
            choices=data.get("choices"),
            render_schema=data.get("render_schema"),
        )
