"""Per-image clarity and complexity scoring.

Two routes produce the same ScoreTable shape: a vision-language model
annotates a sampled subset (the labels later train a classifier), or a
scorer backend (live classifier service, or a deterministic mock) scores
every distinct image in the corpus.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .errors import (
    BackendUnavailable,
    InsufficientImages,
    OutOfRange,
    ParseFailure,
)
from .genclient import VlmClient, VlmRequest
from .ingest import Corpus
from .storage import read_jsonl, sha256_bytes, write_jsonl_atomic

VALID_CLARITY = (0, 1)
VALID_COMPLEXITY = (0, 1, 2, 3)
SCORE_SOURCES = ("vlm_annotation", "classifier", "mock")

ANNOTATION_PROMPT = """\
You are rating one image for a dataset curation pipeline. Produce two labels.

Image clarity is binary. Answer 1 when the image is sharp and its contents
are legible; answer 0 when it is blurred or of poor quality.

Image comprehension complexity is an integer from 0 to 3. Rate how hard the
image is to fully interpret, considering: the number of objects shown, the
positional relationships between them, whether understanding requires
mathematical calculations, and the level of detail, texture, and material.
0 means a trivial image with a single plain object; 3 means a dense image
requiring calculation or careful multi-step reading.

Reply with exactly two lines and nothing else:
clarity: <0 or 1>
complexity: <0, 1, 2, or 3>
"""

RETRY_REMINDER = (
    "\n\nReminder: reply with exactly two lines, `clarity: <0 or 1>` and "
    "`complexity: <0, 1, 2, or 3>`, with no other text."
)


@dataclass(frozen=True, slots=True)
class ImageScores:
    """One image's labels plus where they came from."""

    image_ref: str
    sha256: str
    clarity: int
    complexity: int
    source: str
    error: str | None = None

    def __post_init__(self) -> None:
        if self.clarity not in VALID_CLARITY:
            raise OutOfRange(f"clarity {self.clarity} not in {VALID_CLARITY}")
        if self.complexity not in VALID_COMPLEXITY:
            raise OutOfRange(f"complexity {self.complexity} not in {VALID_COMPLEXITY}")
        if self.source not in SCORE_SOURCES:
            raise OutOfRange(f"score source {self.source!r} not in {SCORE_SOURCES}")

    def to_dict(self) -> dict:
        row = {
            "image_ref": self.image_ref,
            "sha256": self.sha256,
            "clarity": self.clarity,
            "complexity": self.complexity,
            "source": self.source,
        }
        if self.error is not None:
            row["error"] = self.error
        return row

    @classmethod
    def from_dict(cls, row: Mapping) -> "ImageScores":
        return cls(
            image_ref=row["image_ref"],
            sha256=row["sha256"],
            clarity=int(row["clarity"]),
            complexity=int(row["complexity"]),
            source=row["source"],
            error=row.get("error"),
        )


@dataclass(frozen=True, slots=True)
class ScoreTable:
    """Scores for a set of images, addressable by path or by content hash.

    Content-hash lookup means a renamed copy of a scored image still
    resolves, so caches survive file moves.
    """

    rows: tuple[ImageScores, ...]
    _by_ref: dict = field(repr=False, hash=False, compare=False, default_factory=dict)
    _by_sha: dict = field(repr=False, hash=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        for row in self.rows:
            self._by_ref[row.image_ref] = row
            self._by_sha.setdefault(row.sha256, row)

    def lookup(self, image_ref: str, sha256: str | None = None) -> ImageScores | None:
        if sha256 is not None and sha256 in self._by_sha:
            return self._by_sha[sha256]
        return self._by_ref.get(image_ref)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


def write_score_table(table: ScoreTable, path: Path | str) -> None:
    write_jsonl_atomic(Path(path), [row.to_dict() for row in table.rows])


def read_score_table(path: Path | str) -> ScoreTable:
    return ScoreTable(rows=tuple(ImageScores.from_dict(row) for row in read_jsonl(Path(path))))


def sample_annotation_set(corpus: Corpus, n: int, seed: int) -> list[str]:
    """Uniform without-replacement draw of n distinct image refs."""
    refs = corpus.distinct_image_refs()
    if n > len(refs):
        raise InsufficientImages(f"requested {n} images but corpus has {len(refs)} distinct")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(refs), size=n, replace=False)
    return [refs[i] for i in picked]


def build_annotation_prompt(image_ref: str | Path) -> str:
    """Fixed labeling prompt; identical text for every image."""
    del image_ref  # the image travels as bytes, the prompt does not vary
    return ANNOTATION_PROMPT


_CLARITY_LINE = re.compile(r"^\s*clarity\s*:\s*(-?\d+)\s*$", re.IGNORECASE | re.MULTILINE)
_COMPLEXITY_LINE = re.compile(r"^\s*complexity\s*:\s*(-?\d+)\s*$", re.IGNORECASE | re.MULTILINE)


def parse_annotation_response(text: str) -> tuple[int, int]:
    """Pull the first clarity/complexity lines out of a model response."""
    clarity_match = _CLARITY_LINE.search(text)
    complexity_match = _COMPLEXITY_LINE.search(text)
    if clarity_match is None or complexity_match is None:
        missing = [
            name
            for name, found in (("clarity", clarity_match), ("complexity", complexity_match))
            if found is None
        ]
        raise ParseFailure(f"no {' or '.join(missing)} line in response")
    clarity = int(clarity_match.group(1))
    complexity = int(complexity_match.group(1))
    if clarity not in VALID_CLARITY:
        raise OutOfRange(f"clarity {clarity} not in {VALID_CLARITY}")
    if complexity not in VALID_COMPLEXITY:
        raise OutOfRange(f"complexity {complexity} not in {VALID_COMPLEXITY}")
    return clarity, complexity


@dataclass(slots=True)
class AnnotationResult:
    table: ScoreTable
    dropped: list[str]


def annotate_images(
    corpus: Corpus,
    refs: Sequence[str],
    client: VlmClient,
    model_id: str,
    max_retries: int = 2,
) -> AnnotationResult:
    """Label each image via the VLM; unparseable images are dropped, not guessed.

    A dropped image simply never enters the labeled set: a wrong label would
    poison classifier training, whereas a missing one only shrinks it.
    """
    rows: list[ImageScores] = []
    dropped: list[str] = []
    for ref in refs:
        image_bytes = (corpus.image_root / ref).read_bytes()
        digest = sha256_bytes(image_bytes)
        prompt = build_annotation_prompt(ref)
        labels: tuple[int, int] | None = None
        for attempt in range(max_retries + 1):
            request = VlmRequest(model_id=model_id, prompt=prompt, image=image_bytes, temperature=0.0)
            response = client.complete(request)
            try:
                labels = parse_annotation_response(response.text)
                break
            except (ParseFailure, OutOfRange):
                prompt = build_annotation_prompt(ref) + RETRY_REMINDER * (attempt + 1)
        if labels is None:
            dropped.append(ref)
            continue
        rows.append(
            ImageScores(
                image_ref=ref,
                sha256=digest,
                clarity=labels[0],
                complexity=labels[1],
                source="vlm_annotation",
            )
        )
    return AnnotationResult(table=ScoreTable(rows=tuple(rows)), dropped=dropped)


class ScorerBackend(Protocol):
    source: str

    def score(self, image_ref: str, image_bytes: bytes) -> tuple[int, int]:
        """Return (clarity, complexity); raise on per-image failure."""


class MockScorer:
    """Deterministic scorer configured by a compact spec string.

    - ``const:<clarity>,<complexity>`` scores every image identically.
    - ``hash`` derives both labels from the image content hash.
    - ``table:<path>`` reads a JSON object mapping image ref, basename, or
      sha256 to ``[clarity, complexity]``; unknown images fail per-image.
    """

    source = "mock"

    def __init__(self, spec: str) -> None:
        self.spec = spec
        self._table: dict | None = None
        if spec.startswith("const:"):
            clarity_s, complexity_s = spec[len("const:"):].split(",")
            self._const = (int(clarity_s), int(complexity_s))
            self._mode = "const"
        elif spec == "hash":
            self._const = (0, 0)
            self._mode = "hash"
        elif spec.startswith("table:"):
            self._table = json.loads(Path(spec[len("table:"):]).read_text(encoding="utf-8"))
            self._const = (0, 0)
            self._mode = "table"
        else:
            raise ValueError(f"unrecognized mock scorer spec {spec!r}")

    def score(self, image_ref: str, image_bytes: bytes) -> tuple[int, int]:
        if self._mode == "const":
            return self._const
        if self._mode == "hash":
            digest = sha256_bytes(image_bytes)
            word = int(digest[:8], 16)
            return (word >> 2) & 1, word & 3
        assert self._table is not None
        digest = sha256_bytes(image_bytes)
        for key in (digest, image_ref, Path(image_ref).name):
            if key in self._table:
                clarity, complexity = self._table[key]
                return int(clarity), int(complexity)
        raise KeyError(f"no table entry for {image_ref}")


class HttpScorer:
    """Client for the classifier service's /score endpoint."""

    source = "classifier"

    def __init__(self, base_url: str, timeout: float = 30.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def ping(self) -> None:
        try:
            resp = requests.get(f"{self.base_url}/healthz", timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendUnavailable(f"scorer at {self.base_url} unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendUnavailable(f"scorer healthz returned {resp.status_code}")

    def score(self, image_ref: str, image_bytes: bytes) -> tuple[int, int]:
        import base64

        payload = {"image_b64": base64.b64encode(image_bytes).decode("ascii")}
        resp = requests.post(f"{self.base_url}/score", json=payload, timeout=self.timeout)
        if resp.status_code != 200:
            raise RuntimeError(f"scorer returned {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        return int(body["clarity"]), int(body["complexity"])


def build_scorer(spec: str) -> ScorerBackend:
    """Scorer selector: ``mock:<spec>`` or the service base URL."""
    if spec.startswith("mock:"):
        return MockScorer(spec[len("mock:"):])
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpScorer(spec)
    raise ValueError(f"unrecognized scorer backend spec {spec!r}")


def score_corpus(corpus: Corpus, backend: ScorerBackend, max_workers: int = 4) -> ScoreTable:
    """Score every distinct corpus image, one row each, in record order.

    A per-image backend failure becomes a clarity-0 row carrying the error
    text (the image is simply excluded downstream); only a dead backend
    aborts the run.
    """
    ping = getattr(backend, "ping", None)
    if callable(ping):
        ping()

    refs = corpus.distinct_image_refs()

    def score_one(ref: str) -> ImageScores:
        image_bytes = (corpus.image_root / ref).read_bytes()
        digest = sha256_bytes(image_bytes)
        try:
            clarity, complexity = backend.score(ref, image_bytes)
            return ImageScores(
                image_ref=ref, sha256=digest, clarity=clarity,
                complexity=complexity, source=backend.source,
            )
        except Exception as exc:
            return ImageScores(
                image_ref=ref, sha256=digest, clarity=0, complexity=0,
                source=backend.source, error=f"{type(exc).__name__}: {exc}",
            )

    if max_workers <= 1:
        rows = [score_one(ref) for ref in refs]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(score_one, refs))
    return ScoreTable(rows=tuple(rows))
