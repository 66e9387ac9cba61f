"""QA augmentation: mine new pairs from images and transform questions.

Four operators act on each selected seed record:

- AskImg mines n fresh question-answer pairs from the image, steered by the
  task's demonstration pool.
- CompQ rewrites the question into a harder multi-step one (new answer).
- RephQ restates the question in different words; the answer must not change.
- SimpQ shortens the question into an underspecified form that the image
  still resolves to the original answer.

Responses are parsed from a numbered Q/A line format, validated (RephQ and
SimpQ answers must match the parent after normalization; math-word-problem
AskImg answers must be numeric), retried with a reminder on unusable output,
and deduplicated by (image content, normalized question).
"""

from __future__ import annotations

import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .clustering import DemoPool
from .errors import (
    AbortThresholdExceeded,
    EmptyDemoPool,
    ForgeError,
    InvalidKind,
    ParseFailure,
)
from .genclient import VlmClient, VlmRequest
from .ingest import TaskType
from .selection import SelectedSet
from .storage import read_jsonl, sha256_file, write_jsonl_atomic


class AugmentationKind(str, Enum):
    SEED = "Seed"
    ASK_IMG = "AskImg"
    COMP_Q = "CompQ"
    REPH_Q = "RephQ"
    SIMP_Q = "SimpQ"


TRANSFORM_KINDS = (AugmentationKind.COMP_Q, AugmentationKind.REPH_Q, AugmentationKind.SIMP_Q)
ANSWER_PRESERVING = (AugmentationKind.REPH_Q, AugmentationKind.SIMP_Q)

_TERMINAL_PUNCT = ".,;:!?"


def normalize_text(text: str) -> str:
    """Casefold, collapse whitespace, strip terminal punctuation."""
    collapsed = " ".join(text.casefold().split())
    return collapsed.rstrip(_TERMINAL_PUNCT).rstrip()


def parse_number(text: str) -> float | None:
    """Read a text as one number, tolerating commas and stray spaces."""
    cleaned = text.strip().replace(",", "")
    try:
        return float(cleaned)
    except ValueError:
        return None


@dataclass(frozen=True, slots=True)
class GeneratedQA:
    parent_record_id: str
    kind: AugmentationKind
    question: str
    answer: str
    request_id: str | None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        if not self.answer.strip():
            raise ValueError("answer must be non-empty")

    def to_dict(self) -> dict:
        return {
            "parent_record_id": self.parent_record_id,
            "kind": self.kind.value,
            "question": self.question,
            "answer": self.answer,
            "request_id": self.request_id,
        }

    @classmethod
    def from_dict(cls, row: Mapping) -> "GeneratedQA":
        return cls(
            parent_record_id=row["parent_record_id"],
            kind=AugmentationKind(row["kind"]),
            question=row["question"],
            answer=row["answer"],
            request_id=row.get("request_id"),
        )


@dataclass(frozen=True, slots=True)
class AugmentedCorpus:
    """Generated pairs plus each parent's image content hash (dedup key)."""

    pairs: tuple[GeneratedQA, ...]
    image_sha: Mapping[str, str]

    def __len__(self) -> int:
        return len(self.pairs)

    def count_by_kind(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for pair in self.pairs:
            counts[pair.kind.value] = counts.get(pair.kind.value, 0) + 1
        return counts


def write_augmented(corpus: AugmentedCorpus, path) -> None:
    write_jsonl_atomic(path, [pair.to_dict() for pair in corpus.pairs])


def read_augmented(path, image_sha: Mapping[str, str]) -> AugmentedCorpus:
    pairs = tuple(GeneratedQA.from_dict(row) for row in read_jsonl(path))
    return AugmentedCorpus(pairs=pairs, image_sha=image_sha)


@dataclass(frozen=True, slots=True)
class AugmentConfig:
    n_per_image: int = 5
    ops: frozenset[AugmentationKind] = frozenset(
        {AugmentationKind.ASK_IMG, *TRANSFORM_KINDS}
    )
    model_id: str = "gpt-4-vision-preview"
    max_retries: int = 2
    mining_temperature: float = 0.7
    transform_temperature: float = 0.0
    max_tokens: int = 1024
    abort_failure_rate: float = 0.5
    abort_min_calls: int = 25
    max_workers: int = 4

    @staticmethod
    def parse_ops(text: str) -> frozenset[AugmentationKind]:
        names = {
            "askimg": AugmentationKind.ASK_IMG,
            "compq": AugmentationKind.COMP_Q,
            "rephq": AugmentationKind.REPH_Q,
            "simpq": AugmentationKind.SIMP_Q,
        }
        ops = set()
        for piece in text.split(","):
            piece = piece.strip().lower()
            if not piece:
                continue
            if piece not in names:
                raise InvalidKind(f"unknown operator {piece!r}; choose from {sorted(names)}")
            ops.add(names[piece])
        return frozenset(ops)


RETRY_REMINDER = (
    "\n\nReminder: reply only with the numbered pairs, one field per line, "
    "as `Q1: <question>` then `A1: <answer>`."
)


def build_qa_generation_prompt(record, demos: DemoPool, n: int) -> str:
    """Prompt asking for n new QA pairs about the image, shaped by demos."""
    if not demos.demos:
        raise EmptyDemoPool(f"demo pool for task {demos.task.value} is empty")
    lines = [
        "You are writing new training questions for one image from a visual",
        "math dataset. Study the style of these example questions from the",
        f"same task type ({demos.task.value}):",
        "",
    ]
    for i, demo in enumerate(demos.demos, start=1):
        lines.append(f"{i}. {demo.question}")
    lines += [
        "",
        f"The image already has this question: {record.question}",
        "",
        f"Write exactly {n} new, distinct question-answer pairs grounded in",
        "the image, in the style of the examples, and answer each one",
        "yourself from the image content. Do not repeat the existing",
        "question. Reply with exactly this line format and nothing else:",
    ]
    for i in range(1, n + 1):
        lines.append(f"Q{i}: <question {i}>")
        lines.append(f"A{i}: <answer {i}>")
    return "\n".join(lines)


_TRANSFORM_INSTRUCTIONS = {
    AugmentationKind.COMP_Q: (
        "Rewrite the question below into a more complex question about the"
        " same image, raising the reasoning required: add steps such as"
        " extra calculation, comparison, or relations between objects."
        " Answer your new question yourself from the image."
    ),
    AugmentationKind.REPH_Q: (
        "Rephrase the question below so it asks for exactly the same thing"
        " in different words. Do not change the answer: the original answer"
        " must remain correct, word for word."
    ),
    AugmentationKind.SIMP_Q: (
        "Simplify the question below into a shorter, underspecified version."
        " You may drop details that a reader can recover by looking at the"
        " image. Given the image, the original answer must still be the"
        " correct answer to your simplified question."
    ),
}


def build_question_augment_prompt(kind: AugmentationKind, record) -> str:
    """Prompt for one question transform (CompQ, RephQ, or SimpQ)."""
    if kind not in TRANSFORM_KINDS:
        raise InvalidKind(f"{kind!r} is not a question transform")
    return "\n".join(
        [
            _TRANSFORM_INSTRUCTIONS[kind],
            "",
            f"Original question: {record.question}",
            f"Original answer: {record.answer}",
            "",
            "Reply with exactly this line format and nothing else:",
            "Q1: <question>",
            "A1: <answer>",
        ]
    )


_QA_LINE = re.compile(r"^(Q|A)(\d+)\s*:\s*(.*)$", re.IGNORECASE)


def parse_qa_block(text: str, expected_n: int) -> tuple[list[tuple[str, str]], int]:
    """Extract up to expected_n numbered question-answer pairs.

    Lines between markers continue the preceding field, so multi-line
    questions and answers survive. Pairs with an empty side are dropped.
    Returns the pairs in order of appearance plus the shortfall count.
    """
    questions: dict[int, list[str]] = {}
    answers: dict[int, list[str]] = {}
    order: list[int] = []
    current: list[str] | None = None
    for line in text.splitlines():
        marker = _QA_LINE.match(line.strip())
        if marker:
            which, index_s, rest = marker.groups()
            index = int(index_s)
            bucket = questions if which.upper() == "Q" else answers
            if index not in order:
                order.append(index)
            current = bucket.setdefault(index, [])
            if rest:
                current.append(rest)
        elif current is not None and line.strip():
            current.append(line.strip())

    pairs: list[tuple[str, str]] = []
    for index in order:
        if len(pairs) == expected_n:
            break
        question = " ".join(questions.get(index, [])).strip()
        answer = " ".join(answers.get(index, [])).strip()
        if question and answer:
            pairs.append((question, answer))
    if not pairs:
        raise ParseFailure(f"no usable Q/A pairs in response ({len(text)} chars)")
    return pairs, max(0, expected_n - len(pairs))


@dataclass(slots=True)
class SynthesisLog:
    calls: int = 0
    failed_calls: int = 0
    shortfall: int = 0
    rejected_answer_mismatch: int = 0
    rejected_non_numeric: int = 0
    notes: list[str] = field(default_factory=list)
    target: dict[str, int] = field(default_factory=dict)


class _AbortMonitor:
    """Failure-rate circuit breaker shared across worker threads."""

    def __init__(self, rate: float, min_calls: int) -> None:
        self.rate = rate
        self.min_calls = min_calls
        self.calls = 0
        self.failures = 0
        self._lock = threading.Lock()

    def record(self, failed: bool) -> None:
        with self._lock:
            self.calls += 1
            if failed:
                self.failures += 1
            if self.calls >= self.min_calls and self.failures / self.calls >= self.rate:
                raise AbortThresholdExceeded(
                    f"{self.failures}/{self.calls} augmentation calls failed "
                    f"(threshold {self.rate:.0%})"
                )


def _complete_with_retries(
    client: VlmClient,
    prompt: str,
    image: bytes,
    config: AugmentConfig,
    temperature: float,
    expected_n: int,
    validate,
    monitor: _AbortMonitor,
    log: SynthesisLog,
    lock: threading.Lock,
):
    """One operator invocation: call, parse, validate, retry on zero yield.

    Returns (valid pairs, request_id) with pairs possibly short of
    expected_n; an empty list means the operator failed for this record.
    """
    attempt_prompt = prompt
    for attempt in range(config.max_retries + 1):
        request = VlmRequest(
            model_id=config.model_id,
            prompt=attempt_prompt,
            image=image,
            temperature=temperature,
            max_tokens=config.max_tokens,
        )
        failed = True
        pairs: list[tuple[str, str]] = []
        request_id = None
        try:
            response = client.complete(request)
            request_id = response.request_id
            parsed, _ = parse_qa_block(response.text, expected_n)
            pairs = validate(parsed)
            failed = not pairs
        except ForgeError:
            failed = True
        finally:
            with lock:
                log.calls += 1
                if failed:
                    log.failed_calls += 1
        monitor.record(failed)
        if not failed:
            return pairs, request_id
        # A fresh suffix gives the retry its own cache key.
        attempt_prompt = prompt + RETRY_REMINDER * (attempt + 1)
    return [], None


def synthesize(
    selected: SelectedSet,
    client: VlmClient,
    pools: Mapping[TaskType, DemoPool],
    config: AugmentConfig,
    image_root,
) -> tuple[AugmentedCorpus, SynthesisLog]:
    """Run every enabled operator over every seed record.

    Each record yields its Seed pair plus whatever the operators produce;
    per-record failures degrade output (shortfall), never abort the run,
    unless the overall failure rate trips the circuit breaker.
    """
    for task in sorted({r.task for r in selected.records}, key=lambda t: t.value):
        if AugmentationKind.ASK_IMG in config.ops and task not in pools:
            raise EmptyDemoPool(f"no demo pool for task {task.value}")

    log = SynthesisLog()
    monitor = _AbortMonitor(config.abort_failure_rate, config.abort_min_calls)
    lock = threading.Lock()
    n = config.n_per_image
    log.target = {
        AugmentationKind.SEED.value: len(selected.records),
        AugmentationKind.ASK_IMG.value: len(selected.records) * n
        if AugmentationKind.ASK_IMG in config.ops
        else 0,
    }
    for kind in TRANSFORM_KINDS:
        log.target[kind.value] = len(selected.records) if kind in config.ops else 0

    def run_record(record) -> list[GeneratedQA]:
        out = [
            GeneratedQA(
                parent_record_id=record.record_id,
                kind=AugmentationKind.SEED,
                question=record.question,
                answer=record.answer,
                request_id=None,
            )
        ]
        image = (image_root / record.image_ref).read_bytes()

        if AugmentationKind.ASK_IMG in config.ops:
            def validate_mined(parsed: list[tuple[str, str]]) -> list[tuple[str, str]]:
                if record.task is not TaskType.MWP:
                    return parsed
                kept = [(q, a) for q, a in parsed if parse_number(a) is not None]
                with lock:
                    log.rejected_non_numeric += len(parsed) - len(kept)
                return kept

            prompt = build_qa_generation_prompt(record, pools[record.task], n)
            pairs, request_id = _complete_with_retries(
                client, prompt, image, config, config.mining_temperature,
                n, validate_mined, monitor, log, lock,
            )
            with lock:
                log.shortfall += n - len(pairs)
            for question, answer in pairs:
                out.append(
                    GeneratedQA(
                        parent_record_id=record.record_id,
                        kind=AugmentationKind.ASK_IMG,
                        question=question,
                        answer=answer,
                        request_id=request_id,
                    )
                )

        for kind in TRANSFORM_KINDS:
            if kind not in config.ops:
                continue

            def validate_transform(parsed: list[tuple[str, str]], kind=kind) -> list:
                question, answer = parsed[0]
                if kind in ANSWER_PRESERVING:
                    if normalize_text(answer) != normalize_text(record.answer):
                        with lock:
                            log.rejected_answer_mismatch += 1
                        return []
                    # The parent's wording is authoritative once they match.
                    answer = record.answer
                return [(question, answer)]

            prompt = build_question_augment_prompt(kind, record)
            pairs, request_id = _complete_with_retries(
                client, prompt, image, config, config.transform_temperature,
                1, validate_transform, monitor, log, lock,
            )
            if not pairs:
                with lock:
                    log.shortfall += 1
                continue
            out.append(
                GeneratedQA(
                    parent_record_id=record.record_id,
                    kind=kind,
                    question=pairs[0][0],
                    answer=pairs[0][1],
                    request_id=request_id,
                )
            )
        return out

    records = list(selected.records)
    if config.max_workers <= 1 or len(records) <= 1:
        per_record = [run_record(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            per_record = list(pool.map(run_record, records))

    image_sha = {
        r.record_id: sha256_file(image_root / r.image_ref) for r in records
    }
    pairs = tuple(pair for group in per_record for pair in group)
    return AugmentedCorpus(pairs=pairs, image_sha=image_sha), log


def dedup(corpus: AugmentedCorpus) -> AugmentedCorpus:
    """Drop later duplicates of (image content hash, normalized question).

    Seed pairs always win a tie, even against a generated pair that came
    earlier in corpus order; otherwise the first occurrence survives.
    """
    seen: dict[tuple[str, str], AugmentationKind] = {}
    for pair in corpus.pairs:
        key = (corpus.image_sha[pair.parent_record_id], normalize_text(pair.question))
        holder = seen.get(key)
        if holder is None or (holder is not AugmentationKind.SEED and pair.kind is AugmentationKind.SEED):
            seen[key] = pair.kind

    kept: list[GeneratedQA] = []
    emitted: set[tuple[str, str]] = set()
    for pair in corpus.pairs:
        key = (corpus.image_sha[pair.parent_record_id], normalize_text(pair.question))
        if key in emitted:
            continue
        if seen[key] is AugmentationKind.SEED and pair.kind is not AugmentationKind.SEED:
            continue
        kept.append(pair)
        emitted.add(key)
    return AugmentedCorpus(pairs=tuple(kept), image_sha=corpus.image_sha)
