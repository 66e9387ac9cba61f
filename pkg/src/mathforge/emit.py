"""Serialize the augmented corpus into conversation-format training data.

Records follow the common instruction-tuning JSONL convention (`id`,
`image`, `conversations` with `from`/`value` turns) so the output drops
straight into existing fine-tuning stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .augment import AugmentationKind, AugmentedCorpus, GeneratedQA
from .errors import DanglingParent, IoError, MissingImage
from .ingest import AnswerKind, SourceRecord
from .selection import SelectedSet
from .storage import read_jsonl, sha256_file, write_json_atomic, write_jsonl_atomic

IMAGE_TOKEN = "<image>"
KIND_ORDER = ("Seed", "AskImg", "CompQ", "RephQ", "SimpQ")
_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


@dataclass(frozen=True, slots=True)
class InstructionRecord:
    id: str
    image: str
    conversations: tuple[dict, ...]
    meta: Mapping[str, object]

    def __post_init__(self) -> None:
        if len(self.conversations) < 2 or len(self.conversations) % 2 != 0:
            raise ValueError("conversations must have even length of at least 2")
        for i, turn in enumerate(self.conversations):
            expected = "human" if i % 2 == 0 else "assistant"
            if turn.get("from") != expected:
                raise ValueError(f"turn {i} must be from {expected!r}")
        first = self.conversations[0]["value"]
        if first.count(IMAGE_TOKEN) != 1:
            raise ValueError(f"first human turn must contain exactly one {IMAGE_TOKEN}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "conversations": list(self.conversations),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, row: Mapping) -> "InstructionRecord":
        return cls(
            id=row["id"],
            image=row["image"],
            conversations=tuple(row["conversations"]),
            meta=row["meta"],
        )


def render_question(question: str, choices: Sequence[str] | None) -> str:
    """Question text, plus lettered options when the answer is a choice."""
    if not choices:
        return question
    lines = [question]
    for letter, option in zip(_LETTERS, choices):
        lines.append(f"({letter}) {option}")
    return "\n".join(lines)


def to_instruction_record(
    pair: GeneratedQA,
    parent: SourceRecord,
    complexity: int,
    record_id: str,
    image_root: Path,
) -> InstructionRecord:
    """One conversation: a human turn holding the image, an assistant answer."""
    if not (image_root / parent.image_ref).is_file():
        raise MissingImage(f"image {parent.image_ref!r} not found under {image_root}")
    choices = parent.choices if pair.kind is AugmentationKind.SEED else None
    human = f"{IMAGE_TOKEN}\n{render_question(pair.question, choices)}"
    return InstructionRecord(
        id=record_id,
        image=parent.image_ref,
        conversations=(
            {"from": "human", "value": human},
            {"from": "assistant", "value": pair.answer},
        ),
        meta={
            "dataset_id": parent.dataset_id,
            "task": parent.task.value,
            "kind": pair.kind.value,
            "complexity": complexity,
        },
    )


def emit_records(
    corpus: AugmentedCorpus,
    selected: SelectedSet,
    image_root: Path,
) -> list[InstructionRecord]:
    """Convert every pair, in corpus order, minting stable per-parent ids."""
    parents = {record.record_id: record for record in selected.records}
    counters: dict[tuple[str, str], int] = {}
    out: list[InstructionRecord] = []
    for pair in corpus.pairs:
        parent = parents.get(pair.parent_record_id)
        if parent is None:
            raise DanglingParent(
                f"pair references unknown parent {pair.parent_record_id!r}"
            )
        slot = (pair.parent_record_id, pair.kind.value)
        counters[slot] = counters.get(slot, 0) + 1
        suffix = pair.kind.value.lower()
        if pair.kind is AugmentationKind.ASK_IMG:
            suffix = f"{suffix}-{counters[slot]}"
        out.append(
            to_instruction_record(
                pair,
                parent,
                selected.complexity[parent.record_id],
                record_id=f"{parent.record_id}::{suffix}",
                image_root=image_root,
            )
        )
    return out


def write_dataset(
    records: Sequence[InstructionRecord], out_dir: Path, name: str = "dataset"
) -> dict:
    """Write the JSONL plus a manifest with counts and the file's SHA-256."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        data_path = out_dir / f"{name}.jsonl"
        write_jsonl_atomic(data_path, [r.to_dict() for r in records])
        by_kind: dict[str, int] = {}
        for record in records:
            kind = str(record.meta["kind"])
            by_kind[kind] = by_kind.get(kind, 0) + 1
        manifest = {
            "records": len(records),
            "by_kind": by_kind,
            "sha256": sha256_file(data_path),
            "file": data_path.name,
        }
        write_json_atomic(out_dir / f"{name}_manifest.json", manifest)
    except OSError as exc:
        raise IoError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return manifest


def read_dataset(path: Path) -> list[InstructionRecord]:
    return [InstructionRecord.from_dict(row) for row in read_jsonl(path)]


def dataset_report(
    records: Sequence[InstructionRecord], target: Mapping[str, int] | None = None
) -> dict:
    """Tabulate counts by kind, task, dataset, and complexity stratum."""
    by_kind: dict[str, int] = {}
    by_task: dict[str, int] = {}
    by_dataset: dict[str, int] = {}
    by_complexity: dict[str, int] = {}
    for record in records:
        meta = record.meta
        by_kind[str(meta["kind"])] = by_kind.get(str(meta["kind"]), 0) + 1
        by_task[str(meta["task"])] = by_task.get(str(meta["task"]), 0) + 1
        by_dataset[str(meta["dataset_id"])] = by_dataset.get(str(meta["dataset_id"]), 0) + 1
        key = str(meta["complexity"])
        by_complexity[key] = by_complexity.get(key, 0) + 1

    report = {
        "total": len(records),
        "by_kind": dict(sorted(by_kind.items())),
        "by_task": dict(sorted(by_task.items())),
        "by_dataset": dict(sorted(by_dataset.items())),
        "by_complexity": dict(sorted(by_complexity.items())),
    }
    if target is not None:
        report["composition"] = {
            kind: {"target": target.get(kind, 0), "realized": by_kind.get(kind, 0)}
            for kind in KIND_ORDER
            if target.get(kind, 0) or by_kind.get(kind, 0)
        }
    return report


def render_report(report: Mapping) -> str:
    """Aligned-column text rendering of a dataset report."""
    lines = [f"total records: {report['total']}"]
    for section in ("by_kind", "by_task", "by_dataset", "by_complexity"):
        table: Mapping[str, int] = report[section]
        if not table:
            continue
        lines.append("")
        lines.append(section.replace("_", " ") + ":")
        width = max(len(k) for k in table)
        for key, count in table.items():
            lines.append(f"  {key.ljust(width)}  {count}")
    if "composition" in report:
        lines.append("")
        lines.append("composition (realized / target):")
        width = max(len(k) for k in report["composition"])
        for kind, cell in report["composition"].items():
            lines.append(f"  {kind.ljust(width)}  {cell['realized']} / {cell['target']}")
    return "\n".join(lines) + "\n"
