"""Load heterogeneous source datasets into one validated in-memory corpus.

Source data is pre-normalized to one JSONL records file per dataset plus a
shared image directory; a JSON manifest binds dataset ids to task types and
records files. Loading is single-threaded and deterministic (manifest order,
then file order) and the resulting corpus is immutable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping

from .errors import ManifestInvalid, MissingImage, RecordInvalid
from .storage import canonical_dumps, read_jsonl, write_jsonl_atomic

SCHEMA_VERSION = 1


class TaskType(str, Enum):
    """The five supported question-answering task types."""

    FQA = "FQA"
    GPS = "GPS"
    MWP = "MWP"
    TQA = "TQA"
    VQA = "VQA"


class AnswerKind(str, Enum):
    CHOICE = "choice"
    INTEGER = "integer"
    FLOAT = "float"
    LIST = "list"
    FREE_TEXT = "free_text"


@dataclass(frozen=True, slots=True)
class SourceRecord:
    """One (image, question, answer) triple with provenance."""

    record_id: str
    dataset_id: str
    task: TaskType
    image_ref: str
    question: str
    answer: str
    answer_kind: AnswerKind
    choices: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        row = {
            "record_id": self.record_id,
            "dataset_id": self.dataset_id,
            "task": self.task.value,
            "image_ref": self.image_ref,
            "question": self.question,
            "answer": self.answer,
            "answer_kind": self.answer_kind.value,
        }
        if self.choices is not None:
            row["choices"] = list(self.choices)
        return row

    @classmethod
    def from_dict(cls, row: Mapping) -> "SourceRecord":
        choices = row.get("choices")
        return cls(
            record_id=row["record_id"],
            dataset_id=row["dataset_id"],
            task=TaskType(row["task"]),
            image_ref=row["image_ref"],
            question=row["question"],
            answer=row["answer"],
            answer_kind=AnswerKind(row["answer_kind"]),
            choices=tuple(choices) if choices is not None else None,
        )


@dataclass(frozen=True, slots=True)
class DatasetEntry:
    dataset_id: str
    task: TaskType
    records_file: Path


@dataclass(frozen=True, slots=True)
class DatasetManifest:
    image_root: Path
    datasets: tuple[DatasetEntry, ...]
    schema_version: int


@dataclass(frozen=True, slots=True)
class Corpus:
    """Immutable record collection; safe to share across threads."""

    records: tuple[SourceRecord, ...]
    image_root: Path

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SourceRecord]:
        return iter(self.records)

    def distinct_image_refs(self) -> tuple[str, ...]:
        """Distinct image refs in first-occurrence order."""
        seen: dict[str, None] = {}
        for record in self.records:
            seen.setdefault(record.image_ref, None)
        return tuple(seen)

    def by_id(self) -> dict[str, SourceRecord]:
        return {record.record_id: record for record in self.records}


@dataclass(frozen=True, slots=True)
class StatsReport:
    total: int
    by_dataset: Mapping[str, int]
    by_task: Mapping[str, int]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "by_dataset": dict(self.by_dataset),
            "by_task": dict(self.by_task),
        }


def infer_answer_kind(answer: str, choices: list[str] | None = None) -> AnswerKind:
    """Infer the answer kind for upstream rows that do not declare one.

    Rule: choice when choices are present; float when the answer parses as a
    number containing a decimal point; integer when it parses as an integer;
    free_text otherwise.
    """
    if choices:
        return AnswerKind.CHOICE
    text = answer.strip()
    if "." in text:
        try:
            float(text)
            return AnswerKind.FLOAT
        except ValueError:
            pass
    try:
        int(text)
        return AnswerKind.INTEGER
    except ValueError:
        return AnswerKind.FREE_TEXT


def load_manifest(manifest_path: Path | str) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestInvalid(f"cannot parse manifest {manifest_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestInvalid("manifest must be a JSON object")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestInvalid(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    if "image_root" not in raw or "datasets" not in raw:
        raise ManifestInvalid("manifest requires image_root and datasets")

    image_root = Path(raw["image_root"])
    if not image_root.is_absolute():
        image_root = manifest_path.parent / image_root

    entries: list[DatasetEntry] = []
    seen_ids: set[str] = set()
    if not isinstance(raw["datasets"], list):
        raise ManifestInvalid("datasets must be a list")
    for pos, item in enumerate(raw["datasets"]):
        if not isinstance(item, dict):
            raise ManifestInvalid(f"datasets[{pos}] must be an object")
        try:
            dataset_id = item["dataset_id"]
            task = TaskType(item["task"])
            records_file = Path(item["records_file"])
        except KeyError as exc:
            raise ManifestInvalid(f"datasets[{pos}] missing field {exc}") from exc
        except ValueError as exc:
            raise ManifestInvalid(f"datasets[{pos}]: {exc}") from exc
        if not dataset_id or not isinstance(dataset_id, str):
            raise ManifestInvalid(f"datasets[{pos}] has an empty dataset_id")
        if dataset_id in seen_ids:
            raise ManifestInvalid(f"duplicate dataset_id {dataset_id!r}")
        seen_ids.add(dataset_id)
        if not records_file.is_absolute():
            records_file = manifest_path.parent / records_file
        if not records_file.is_file():
            raise ManifestInvalid(f"records_file {records_file} for {dataset_id!r} does not exist")
        entries.append(DatasetEntry(dataset_id=dataset_id, task=task, records_file=records_file))

    return DatasetManifest(image_root=image_root, datasets=tuple(entries), schema_version=version)


def _validate_record(
    row: Mapping,
    entry: DatasetEntry,
    line_no: int,
    image_root: Path,
    seen_ids: set[str],
    strict_images: bool,
) -> SourceRecord:
    def fail(reason: str) -> RecordInvalid:
        return RecordInvalid(entry.dataset_id, line_no, reason)

    if not isinstance(row, Mapping):
        raise fail("line is not a JSON object")

    record_id = row.get("record_id")
    if not record_id or not isinstance(record_id, str):
        raise fail("record_id missing or empty")
    if record_id in seen_ids:
        raise fail(f"duplicate record_id {record_id!r}")

    dataset_id = row.get("dataset_id", entry.dataset_id)
    if dataset_id != entry.dataset_id:
        raise fail(f"dataset_id {dataset_id!r} does not match manifest entry {entry.dataset_id!r}")

    task_raw = row.get("task")
    if task_raw is not None:
        try:
            task = TaskType(task_raw)
        except ValueError:
            raise fail(f"unknown task {task_raw!r}") from None
        if task is not entry.task:
            raise fail(f"task {task.value} does not match dataset task {entry.task.value}")

    image_ref = row.get("image_ref")
    if not image_ref or not isinstance(image_ref, str):
        raise fail("image_ref missing or empty")
    resolved = (image_root / image_ref).resolve()
    try:
        resolved.relative_to(image_root.resolve())
    except ValueError:
        raise fail(f"image_ref {image_ref!r} escapes the image root") from None
    if strict_images and not resolved.is_file():
        raise MissingImage(f"{entry.dataset_id}:{line_no}: image {image_ref!r} not found under {image_root}")

    question = (row.get("question") or "").strip()
    if not question:
        raise fail("question empty after whitespace trim")
    answer = (row.get("answer") or "").strip()
    if not answer:
        raise fail("answer empty after whitespace trim")

    kind_raw = row.get("answer_kind")
    if kind_raw is None:
        raise fail("answer_kind missing")
    try:
        answer_kind = AnswerKind(kind_raw)
    except ValueError:
        raise fail(f"unknown answer_kind {kind_raw!r}") from None

    choices_raw = row.get("choices")
    if answer_kind is AnswerKind.CHOICE:
        if not choices_raw or not isinstance(choices_raw, list):
            raise fail("choice record requires a non-empty choices list")
        choices = tuple(str(c) for c in choices_raw)
        if answer not in choices:
            raise fail(f"answer {answer!r} is not among the choices")
    else:
        if choices_raw:
            raise fail("choices present but answer_kind is not choice")
        choices = None

    return SourceRecord(
        record_id=record_id,
        dataset_id=entry.dataset_id,
        task=entry.task,
        image_ref=image_ref,
        question=question,
        answer=answer,
        answer_kind=answer_kind,
        choices=choices,
    )


def load_corpus(manifest_path: Path | str, strict_images: bool = False) -> Corpus:
    """Load and validate every dataset listed in the manifest.

    Raises ManifestInvalid for schema problems, RecordInvalid with
    (dataset_id, line number, reason) for a bad line, and MissingImage when
    strict_images is set and a referenced image is absent.
    """
    manifest = load_manifest(manifest_path)
    records: list[SourceRecord] = []
    seen_ids: set[str] = set()
    for entry in manifest.datasets:
        with open(entry.records_file, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RecordInvalid(entry.dataset_id, line_no, f"invalid JSON: {exc}") from exc
                record = _validate_record(row, entry, line_no, manifest.image_root, seen_ids, strict_images)
                seen_ids.add(record.record_id)
                records.append(record)
    return Corpus(records=tuple(records), image_root=manifest.image_root)


def corpus_stats(corpus: Corpus) -> StatsReport:
    """Exact per-dataset and per-task record counts."""
    by_dataset: dict[str, int] = {}
    by_task: dict[str, int] = {}
    for record in corpus.records:
        by_dataset[record.dataset_id] = by_dataset.get(record.dataset_id, 0) + 1
        by_task[record.task.value] = by_task.get(record.task.value, 0) + 1
    return StatsReport(total=len(corpus.records), by_dataset=by_dataset, by_task=by_task)


def serialize_corpus(corpus: Corpus) -> str:
    """Canonical JSONL rendering; equal corpora serialize byte-identically."""
    return "".join(canonical_dumps(record.to_dict()) + "\n" for record in corpus.records)


def write_corpus(corpus: Corpus, path: Path | str) -> None:
    write_jsonl_atomic(path, (record.to_dict() for record in corpus.records))


def read_corpus(path: Path | str, image_root: Path | str) -> Corpus:
    records = tuple(SourceRecord.from_dict(row) for row in read_jsonl(path))
    return Corpus(records=records, image_root=Path(image_root))
