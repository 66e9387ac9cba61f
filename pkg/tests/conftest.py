"""Shared fixture builders: corpora on disk, mock scripts, score tables."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from mathforge.ingest import TaskType


class CorpusBuilder:
    """Assemble a manifest + records files + image files under one root."""

    def __init__(self, root: Path) -> None:
        self.root = root
        self.image_root = root / "images"
        self.image_root.mkdir(parents=True, exist_ok=True)
        self.rows: dict[str, list[dict]] = {}
        self.tasks: dict[str, str] = {}
        self._serial = 0

    def add(
        self,
        dataset_id: str,
        task: str | TaskType,
        question: str,
        answer: str,
        answer_kind: str = "free_text",
        choices: list[str] | None = None,
        image_ref: str | None = None,
        image_bytes: bytes | None = None,
        record_id: str | None = None,
        **extra,
    ) -> str:
        task_value = task.value if isinstance(task, TaskType) else task
        already = self.tasks.setdefault(dataset_id, task_value)
        assert already == task_value, "one task per dataset"
        self._serial += 1
        if record_id is None:
            record_id = f"{dataset_id}-{self._serial:05d}"
        if image_ref is None:
            image_ref = f"{dataset_id}/{self._serial:05d}.png"
        image_path = self.image_root / image_ref
        if not image_path.exists():
            image_path.parent.mkdir(parents=True, exist_ok=True)
            content = image_bytes if image_bytes is not None else f"img::{record_id}".encode()
            image_path.write_bytes(content)
        row = {
            "record_id": record_id,
            "dataset_id": dataset_id,
            "task": task_value,
            "image_ref": image_ref,
            "question": question,
            "answer": answer,
            "answer_kind": answer_kind,
        }
        if choices is not None:
            row["choices"] = choices
        row.update(extra)
        self.rows.setdefault(dataset_id, []).append(row)
        return record_id

    def add_raw(self, dataset_id: str, task: str, row: dict) -> None:
        self.tasks.setdefault(dataset_id, task)
        self.rows.setdefault(dataset_id, []).append(row)

    def write(self) -> Path:
        datasets = []
        for dataset_id in self.rows:
            records_file = self.root / f"{dataset_id}.jsonl"
            with open(records_file, "w", encoding="utf-8") as fh:
                for row in self.rows[dataset_id]:
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            datasets.append(
                {
                    "dataset_id": dataset_id,
                    "task": self.tasks[dataset_id],
                    "records_file": records_file.name,
                }
            )
        manifest_path = self.root / "manifest.json"
        manifest_path.write_text(
            json.dumps(
                {"schema_version": 1, "image_root": "images", "datasets": datasets},
                indent=2,
            ),
            encoding="utf-8",
        )
        return manifest_path


@pytest.fixture
def builder(tmp_path: Path) -> CorpusBuilder:
    return CorpusBuilder(tmp_path / "corpus")


def cooperative_mock_rules(n: int = 5) -> dict:
    """Mock VLM script that plays along with every operator.

    Transform rules echo the original question and answer captured from the
    prompt; mined answers are numeric so they survive MWP validation.
    """
    mined = "\n".join(
        f"Q{i}: Mined question number {i} about this image?\nA{i}: {i}"
        for i in range(1, n + 1)
    )
    return {
        "rules": [
            {
                "match": r"Rephrase the question below[\s\S]*Original question: ([^\n]+)\nOriginal answer: ([^\n]+)",
                "response": r"Q1: In other words: \1\nA1: \2",
            },
            {
                "match": r"Simplify the question below[\s\S]*Original question: ([^\n]+)\nOriginal answer: ([^\n]+)",
                "response": r"Q1: Short version: \1\nA1: \2",
            },
            {
                "match": r"more complex question[\s\S]*Original question: ([^\n]+)\nOriginal answer: ([^\n]+)",
                "response": r"Q1: Two-step variant: \1\nA1: \2",
            },
            {
                "match": rf"Write exactly {n} new",
                "response": mined,
            },
            {
                "match": r"rating one image",
                "response": "clarity: 1\ncomplexity: 2",
            },
        ]
    }


def write_mock_script(path: Path, rules: dict) -> Path:
    path.write_text(json.dumps(rules, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def cooperative_mock(tmp_path: Path) -> Path:
    return write_mock_script(tmp_path / "mock_vlm.json", cooperative_mock_rules())


def write_pipeline_config(path: Path, manifest: Path, **overrides) -> Path:
    """Config JSON for CLI/pipeline tests; relative paths resolve to path's dir."""
    config = {
        "manifest": str(manifest),
        "out_dir": "out",
        "cache_dir": "cache",
        "scorer": "mock:const:1,2",
        "selection": {"ratio": [2, 3, 4, 1], "budget": 100, "take_all_top_stratum": True, "seed": 7},
        "clustering": {"k": 5, "seed": 7},
        "augment": {"n_per_image": 5, "max_workers": 2},
    }
    config.update(overrides)
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path
