"""Scoring of model responses on math visual-QA benchmark items.

The default answer extractor is rule-based and fully deterministic, so the
whole evaluation path runs offline; an LLM-backed extractor can be plugged
in and must return the same normalized shapes. Extraction failure is a
value (scored incorrect), never an exception.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .errors import ConfigInvalid
from .ingest import AnswerKind, TaskType
from .storage import read_jsonl

SKILLS = ("ALG", "ARI", "GEO", "LOG", "NUM", "SCI", "STA")
EXTRACTION_FAILURE = "__extraction_failure__"
FLOAT_TOLERANCE = 1e-3
_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

_NUMBER = re.compile(r"[-+]?\d{1,3}(?:,\d{3})+(?:\.\d+)?|[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")
_PAREN_LETTER = re.compile(r"\(([A-Za-z])\)")
_BRACKET_GROUP = re.compile(r"\[([^\[\]]*)\]")


def _parse_float(text: str) -> float:
    return float(text.replace(",", "").strip())


def parse_list(text: str) -> tuple[str, ...]:
    """Split a bracketed or comma-separated rendering into elements."""
    inner = text.strip()
    if inner.startswith("[") and inner.endswith("]"):
        inner = inner[1:-1]
    return tuple(part.strip() for part in inner.split(",") if part.strip())


@dataclass(frozen=True, slots=True)
class EvalItem:
    item_id: str
    answer_kind: AnswerKind
    gold: str
    task: TaskType
    skills: tuple[str, ...]
    choices: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.skills:
            raise ConfigInvalid(f"item {self.item_id}: at least one skill tag required")
        bad = [s for s in self.skills if s not in SKILLS]
        if bad:
            raise ConfigInvalid(f"item {self.item_id}: unknown skill tags {bad}")
        if self.answer_kind is AnswerKind.CHOICE:
            if not self.choices:
                raise ConfigInvalid(f"item {self.item_id}: choice item needs choices")
            valid = _LETTERS[: len(self.choices)]
            if self.gold.upper() not in valid:
                raise ConfigInvalid(
                    f"item {self.item_id}: gold {self.gold!r} is not a letter in {valid}"
                )
        elif self.answer_kind in (AnswerKind.INTEGER, AnswerKind.FLOAT):
            try:
                _parse_float(self.gold)
            except ValueError:
                raise ConfigInvalid(
                    f"item {self.item_id}: gold {self.gold!r} is not numeric"
                ) from None
        elif self.answer_kind is AnswerKind.LIST:
            if not parse_list(self.gold):
                raise ConfigInvalid(f"item {self.item_id}: gold list is empty")

    @classmethod
    def from_dict(cls, row: Mapping) -> "EvalItem":
        return cls(
            item_id=row["item_id"],
            answer_kind=AnswerKind(row["answer_kind"]),
            gold=str(row["gold"]),
            task=TaskType(row["task"]),
            skills=tuple(row["skills"]),
            choices=tuple(row["choices"]) if row.get("choices") else None,
        )


Extractor = Callable[[str, EvalItem], object]


def _extract_choice(response: str, item: EvalItem) -> object:
    assert item.choices is not None
    valid = _LETTERS[: len(item.choices)]

    parenthesized = [m.group(1).upper() for m in _PAREN_LETTER.finditer(response)]
    parenthesized = [letter for letter in parenthesized if letter in valid]
    if parenthesized:
        return parenthesized[-1]

    standalone = [
        m.group(1)
        for m in re.finditer(r"(?<![A-Za-z])([A-Z])(?![A-Za-z])", response)
        if m.group(1) in valid
    ]
    if standalone:
        return standalone[-1]

    lowered = response.casefold()
    best: tuple[int, int] | None = None
    for index, option in enumerate(item.choices):
        at = lowered.rfind(option.casefold())
        if at >= 0 and (best is None or at > best[0]):
            best = (at, index)
    if best is not None:
        return _LETTERS[best[1]]

    alone = response.strip()
    if len(alone) == 1 and alone.upper() in valid:
        return alone.upper()
    return EXTRACTION_FAILURE


def _extract_number(response: str) -> object:
    found = _NUMBER.findall(response)
    if not found:
        return EXTRACTION_FAILURE
    return _parse_float(found[-1])


def _extract_list(response: str) -> object:
    groups = _BRACKET_GROUP.findall(response)
    if groups:
        elements = parse_list(groups[-1])
        if elements:
            return elements
    lines = [line for line in response.splitlines() if line.strip()]
    if lines:
        tail = lines[-1]
        if ":" in tail:
            tail = tail.rsplit(":", 1)[1]
        elements = parse_list(tail)
        if len(elements) >= 2:
            return elements
    return EXTRACTION_FAILURE


def extract_answer(response: str, item: EvalItem, extractor: Extractor | None = None) -> object:
    """Pull a normalized answer from free-form response text.

    Returns a choice letter, a float, a tuple of list elements, or stripped
    text, depending on the item's answer kind; EXTRACTION_FAILURE when the
    response yields nothing usable.
    """
    if extractor is not None:
        return extractor(response, item)
    if not response or not response.strip():
        return EXTRACTION_FAILURE
    if item.answer_kind is AnswerKind.CHOICE:
        return _extract_choice(response, item)
    if item.answer_kind in (AnswerKind.INTEGER, AnswerKind.FLOAT):
        return _extract_number(response)
    if item.answer_kind is AnswerKind.LIST:
        return _extract_list(response)
    return response.strip()


def _element_equal(pred: str, gold: str) -> bool:
    pred_n, gold_n = pred.strip().casefold(), gold.strip().casefold()
    try:
        return _score_float(_parse_float(pred_n), _parse_float(gold_n))
    except ValueError:
        return pred_n == gold_n


def _score_float(pred: float, gold: float) -> bool:
    return abs(round(pred, 3) - round(gold, 3)) <= FLOAT_TOLERANCE + 1e-12


def score_item(pred: object, item: EvalItem) -> bool:
    """Compare a normalized prediction against the item's gold answer."""
    if pred == EXTRACTION_FAILURE or pred is None:
        return False
    if item.answer_kind is AnswerKind.CHOICE:
        return isinstance(pred, str) and pred.casefold() == item.gold.casefold()
    if item.answer_kind is AnswerKind.INTEGER:
        if not isinstance(pred, (int, float)):
            return False
        return float(pred) == _parse_float(item.gold)
    if item.answer_kind is AnswerKind.FLOAT:
        if not isinstance(pred, (int, float)):
            return False
        return _score_float(float(pred), _parse_float(item.gold))
    if item.answer_kind is AnswerKind.LIST:
        gold_elements = parse_list(item.gold)
        if not isinstance(pred, tuple) or len(pred) != len(gold_elements):
            return False
        return all(_element_equal(p, g) for p, g in zip(pred, gold_elements))
    return isinstance(pred, str) and " ".join(pred.casefold().split()) == " ".join(
        item.gold.casefold().split()
    )


@dataclass(frozen=True, slots=True)
class SubsetAccuracy:
    overall: float
    by_task: Mapping[str, float]
    by_skill: Mapping[str, float]
    counts: Mapping[str, object]

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "by_task": dict(self.by_task),
            "by_skill": dict(self.by_skill),
            "counts": dict(self.counts),
        }


def aggregate(results: Sequence[tuple[EvalItem, bool]]) -> SubsetAccuracy:
    """Accuracy overall, per task (a partition), and per skill (overlapping).

    An item tagged with several skills counts once in each tagged skill
    cell; cells with no items are absent from the output rather than zero.
    """
    total = len(results)
    correct = sum(1 for _, ok in results if ok)
    task_cells: dict[str, list[int]] = {}
    skill_cells: dict[str, list[int]] = {}
    for item, ok in results:
        cell = task_cells.setdefault(item.task.value, [0, 0])
        cell[0] += int(ok)
        cell[1] += 1
        for skill in item.skills:
            cell = skill_cells.setdefault(skill, [0, 0])
            cell[0] += int(ok)
            cell[1] += 1

    return SubsetAccuracy(
        overall=correct / total if total else 0.0,
        by_task={t: c / n for t, (c, n) in sorted(task_cells.items())},
        by_skill={s: c / n for s, (c, n) in sorted(skill_cells.items())},
        counts={
            "overall": {"correct": correct, "total": total},
            "by_task": {t: {"correct": c, "total": n} for t, (c, n) in sorted(task_cells.items())},
            "by_skill": {s: {"correct": c, "total": n} for s, (c, n) in sorted(skill_cells.items())},
        },
    )


def evaluate(
    items: Sequence[EvalItem],
    predictions: Mapping[str, str],
    extractor: Extractor | None = None,
) -> tuple[SubsetAccuracy, list[dict]]:
    """Extract, score, and aggregate; absent predictions fail extraction."""
    results: list[tuple[EvalItem, bool]] = []
    rows: list[dict] = []
    for item in items:
        response = predictions.get(item.item_id)
        pred = (
            extract_answer(response, item, extractor)
            if response is not None
            else EXTRACTION_FAILURE
        )
        ok = score_item(pred, item)
        results.append((item, ok))
        rows.append(
            {
                "item_id": item.item_id,
                "extracted": list(pred) if isinstance(pred, tuple) else pred,
                "correct": ok,
            }
        )
    return aggregate(results), rows


def read_items(path) -> list[EvalItem]:
    return [EvalItem.from_dict(row) for row in read_jsonl(path)]


def read_predictions(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for row in read_jsonl(path):
        out[row["item_id"]] = row["response_text"]
    return out


def render_accuracy(acc: SubsetAccuracy) -> str:
    """Aligned-column text table of the accuracy cells."""
    counts = acc.counts
    lines = [
        f"overall  {acc.overall:7.2%}  "
        f"({counts['overall']['correct']}/{counts['overall']['total']})"
    ]
    for section_name, table in (("task", acc.by_task), ("skill", acc.by_skill)):
        if not table:
            continue
        lines.append("")
        width = max(len(k) for k in table)
        for key, fraction in table.items():
            cell = counts[f"by_{section_name}"][key]
            lines.append(
                f"{key.ljust(width)}  {fraction:7.2%}  ({cell['correct']}/{cell['total']})"
            )
    return "\n".join(lines) + "\n"
