import json

import pytest

from mathforge.errors import ManifestInvalid, MissingImage, RecordInvalid
from mathforge.ingest import (
    AnswerKind,
    TaskType,
    corpus_stats,
    infer_answer_kind,
    load_corpus,
    load_manifest,
    read_corpus,
    serialize_corpus,
    write_corpus,
)


def test_load_two_records_preserves_ids(builder):
    builder.add("iconqa", "VQA", "How many dots?", "4", answer_kind="integer", record_id="r1")
    builder.add("iconqa", "VQA", "Which is larger?", "left", record_id="r2")
    corpus = load_corpus(builder.write())
    assert len(corpus) == 2
    assert [r.record_id for r in corpus] == ["r1", "r2"]
    assert corpus.records[0].task is TaskType.VQA
    assert corpus.records[0].answer_kind is AnswerKind.INTEGER


def test_empty_answer_rejected_at_its_line(builder):
    builder.add("geos", "GPS", "Angle?", "30", answer_kind="integer")
    builder.add_raw(
        "geos",
        "GPS",
        {
            "record_id": "bad",
            "image_ref": "geos/00001.png",
            "question": "What?",
            "answer": "   ",
            "answer_kind": "free_text",
        },
    )
    with pytest.raises(RecordInvalid) as err:
        load_corpus(builder.write())
    assert err.value.dataset_id == "geos"
    assert err.value.line_no == 2
    assert "answer" in err.value.reason


def test_full_scale_dataset_load_count(builder):
    for i in range(8535):
        builder.add("docvqa", "FQA", f"What does field {i} say?", f"value {i}")
    corpus = load_corpus(builder.write())
    assert len(corpus) == 8535
    assert corpus_stats(corpus).by_dataset["docvqa"] == 8535


def test_corpus_stats_empty(builder):
    builder.add("iconqa", "VQA", "Q?", "A")
    corpus = load_corpus(builder.write())
    empty = type(corpus)(records=(), image_root=corpus.image_root)
    stats = corpus_stats(empty)
    assert stats.total == 0
    assert stats.by_dataset == {}
    assert stats.by_task == {}


def test_corpus_stats_task_rollup(builder):
    for i in range(18173):
        builder.add("figureqa", "FQA", f"Is bar {i} longer?", "yes")
    builder.add("dvqa", "FQA", "Bar height?", "7", answer_kind="integer")
    corpus = load_corpus(builder.write())
    stats = corpus_stats(corpus)
    assert stats.by_dataset["figureqa"] == 18173
    assert stats.by_task["FQA"] == 18173 + 1
    assert sum(stats.by_dataset.values()) == stats.total


def test_two_records_same_dataset_counts_two(builder):
    builder.add("tabmwp", "MWP", "Total cost?", "12", answer_kind="integer")
    builder.add("tabmwp", "MWP", "Change due?", "3", answer_kind="integer")
    stats = corpus_stats(load_corpus(builder.write()))
    assert stats.by_dataset["tabmwp"] == 2


def test_load_is_deterministic_across_calls(builder):
    for i in range(50):
        builder.add("iconqa", "VQA", f"Q{i}?", f"A{i}")
        builder.add("geos", "GPS", f"G{i}?", str(i), answer_kind="integer")
    manifest = builder.write()
    first = serialize_corpus(load_corpus(manifest))
    second = serialize_corpus(load_corpus(manifest))
    assert first == second


def test_task_must_match_dataset_task(builder):
    builder.add_raw(
        "iconqa",
        "VQA",
        {
            "record_id": "x",
            "image_ref": "iconqa/1.png",
            "question": "Q?",
            "answer": "A",
            "answer_kind": "free_text",
            "task": "GPS",
        },
    )
    (builder.image_root / "iconqa").mkdir(parents=True, exist_ok=True)
    (builder.image_root / "iconqa/1.png").write_bytes(b"img")
    with pytest.raises(RecordInvalid, match="does not match dataset task"):
        load_corpus(builder.write())


def test_duplicate_record_id_rejected(builder):
    builder.add("iconqa", "VQA", "Q1?", "A", record_id="dup")
    builder.add("iconqa", "VQA", "Q2?", "B", record_id="dup")
    with pytest.raises(RecordInvalid, match="duplicate record_id"):
        load_corpus(builder.write())


def test_choice_answer_must_be_among_choices(builder):
    builder.add(
        "mathvqa", "GPS", "Which angle?", "E",
        answer_kind="choice", choices=["A) 30", "B) 60"],
    )
    with pytest.raises(RecordInvalid, match="not among the choices"):
        load_corpus(builder.write())


def test_choices_without_choice_kind_rejected(builder):
    builder.add_raw(
        "iconqa",
        "VQA",
        {
            "record_id": "x",
            "image_ref": "iconqa/1.png",
            "question": "Q?",
            "answer": "A",
            "answer_kind": "free_text",
            "choices": ["A"],
        },
    )
    (builder.image_root / "iconqa").mkdir(parents=True, exist_ok=True)
    (builder.image_root / "iconqa/1.png").write_bytes(b"img")
    with pytest.raises(RecordInvalid, match="choices present"):
        load_corpus(builder.write())


def test_image_ref_escape_rejected(builder):
    builder.add_raw(
        "iconqa",
        "VQA",
        {
            "record_id": "x",
            "image_ref": "../../etc/passwd",
            "question": "Q?",
            "answer": "A",
            "answer_kind": "free_text",
        },
    )
    with pytest.raises(RecordInvalid, match="escapes the image root"):
        load_corpus(builder.write())


def test_strict_images_missing_file(builder):
    builder.add("iconqa", "VQA", "Q?", "A", record_id="r1")
    manifest = builder.write()
    (builder.image_root / "iconqa/00001.png").unlink()
    load_corpus(manifest)  # lax mode tolerates the gap
    with pytest.raises(MissingImage):
        load_corpus(manifest, strict_images=True)


def test_manifest_bad_schema_version(builder, tmp_path):
    builder.add("iconqa", "VQA", "Q?", "A")
    manifest = builder.write()
    raw = json.loads(manifest.read_text())
    raw["schema_version"] = 99
    bad = tmp_path / "bad_manifest.json"
    bad.write_text(json.dumps(raw))
    with pytest.raises(ManifestInvalid, match="schema_version"):
        load_manifest(bad)


def test_manifest_duplicate_dataset_ids(builder):
    builder.add("iconqa", "VQA", "Q?", "A")
    manifest = builder.write()
    raw = json.loads(manifest.read_text())
    raw["datasets"].append(dict(raw["datasets"][0]))
    manifest.write_text(json.dumps(raw))
    with pytest.raises(ManifestInvalid, match="duplicate dataset_id"):
        load_manifest(manifest)


def test_manifest_missing_records_file(builder):
    builder.add("iconqa", "VQA", "Q?", "A")
    manifest = builder.write()
    raw = json.loads(manifest.read_text())
    raw["datasets"][0]["records_file"] = "absent.jsonl"
    manifest.write_text(json.dumps(raw))
    with pytest.raises(ManifestInvalid, match="does not exist"):
        load_manifest(manifest)


def test_corpus_round_trip_file(builder, tmp_path):
    builder.add("iconqa", "VQA", "How many?", "3", answer_kind="integer")
    builder.add(
        "mathvqa", "GPS", "Pick one", "x", answer_kind="choice", choices=["x", "y"]
    )
    corpus = load_corpus(builder.write())
    path = tmp_path / "corpus.jsonl"
    write_corpus(corpus, path)
    loaded = read_corpus(path, image_root=corpus.image_root)
    assert loaded == corpus


@pytest.mark.parametrize(
    "answer,choices,expected",
    [
        ("anything", ["anything", "other"], AnswerKind.CHOICE),
        ("7.5", None, AnswerKind.FLOAT),
        ("7", None, AnswerKind.INTEGER),
        ("-12", None, AnswerKind.INTEGER),
        ("around seven", None, AnswerKind.FREE_TEXT),
        ("3.2.1", None, AnswerKind.FREE_TEXT),
    ],
)
def test_infer_answer_kind(answer, choices, expected):
    assert infer_answer_kind(answer, choices) is expected
