import pytest

from conftest import cooperative_mock_rules
from mathforge.augment import (
    AugmentConfig,
    AugmentationKind,
    AugmentedCorpus,
    GeneratedQA,
    build_qa_generation_prompt,
    build_question_augment_prompt,
    dedup,
    normalize_text,
    parse_number,
    parse_qa_block,
    read_augmented,
    synthesize,
    write_augmented,
)
from mathforge.clustering import Demo, DemoPool
from mathforge.errors import (
    AbortThresholdExceeded,
    EmptyDemoPool,
    InvalidKind,
    ParseFailure,
)
from mathforge.genclient import MockRule, ScriptedVlmBackend, VlmClient
from mathforge.ingest import AnswerKind, SourceRecord, TaskType, load_corpus
from mathforge.selection import SelectedSet


# --- text helpers ---------------------------------------------------------

def test_normalize_text_casefold_whitespace_punctuation():
    assert normalize_text("  How   MANY dots?  ") == "how many dots"
    assert normalize_text("Answer.") == normalize_text("answer")
    assert normalize_text("a, b; c!") == "a, b; c"


def test_parse_number_tolerates_commas_and_rejects_prose():
    assert parse_number("1,234.5") == 1234.5
    assert parse_number(" 42 ") == 42.0
    assert parse_number("-3e2") == -300.0
    assert parse_number("about twelve") is None


def test_generated_qa_rejects_blank_sides_and_round_trips():
    with pytest.raises(ValueError):
        GeneratedQA("p", AugmentationKind.SEED, "  ", "a", None)
    with pytest.raises(ValueError):
        GeneratedQA("p", AugmentationKind.SEED, "q", "", None)
    pair = GeneratedQA("p", AugmentationKind.COMP_Q, "q?", "a", "req-1")
    assert GeneratedQA.from_dict(pair.to_dict()) == pair


def test_parse_ops_accepts_known_names_case_insensitively():
    ops = AugmentConfig.parse_ops("AskImg, compq")
    assert ops == frozenset({AugmentationKind.ASK_IMG, AugmentationKind.COMP_Q})
    assert AugmentConfig.parse_ops("") == frozenset()
    with pytest.raises(InvalidKind):
        AugmentConfig.parse_ops("askimg,mystery")


# --- prompt construction ---------------------------------------------------

def vqa_record(question="How many dots are there?", answer="4", record_id="r1"):
    return SourceRecord(
        record_id=record_id,
        dataset_id="iconqa",
        task=TaskType.VQA,
        image_ref="iconqa/1.png",
        question=question,
        answer=answer,
        answer_kind=AnswerKind.FREE_TEXT,
    )


def small_pool():
    return DemoPool(
        task=TaskType.VQA,
        demos=(
            Demo("iconqa", 0, "What shape is shown?"),
            Demo("iconqa", 1, "How many squares are blue?"),
        ),
    )


def test_generation_prompt_embeds_demos_question_and_skeleton():
    prompt = build_qa_generation_prompt(vqa_record(), small_pool(), n=3)
    assert "1. What shape is shown?" in prompt
    assert "2. How many squares are blue?" in prompt
    assert "The image already has this question: How many dots are there?" in prompt
    assert "Write exactly 3 new" in prompt
    for i in (1, 2, 3):
        assert f"Q{i}: <question {i}>" in prompt
        assert f"A{i}: <answer {i}>" in prompt
    assert "Q4:" not in prompt


def test_generation_prompt_requires_demos():
    with pytest.raises(EmptyDemoPool):
        build_qa_generation_prompt(vqa_record(), DemoPool(task=TaskType.VQA, demos=()), n=5)


def test_transform_prompts_embed_parent_pair():
    record = vqa_record()
    for kind in (AugmentationKind.COMP_Q, AugmentationKind.REPH_Q, AugmentationKind.SIMP_Q):
        prompt = build_question_augment_prompt(kind, record)
        assert "Original question: How many dots are there?" in prompt
        assert "Original answer: 4" in prompt
        assert "Q1: <question>" in prompt
    assert "more complex" in build_question_augment_prompt(AugmentationKind.COMP_Q, record)
    assert "Rephrase" in build_question_augment_prompt(AugmentationKind.REPH_Q, record)
    assert "Simplify" in build_question_augment_prompt(AugmentationKind.SIMP_Q, record)


def test_transform_prompt_rejects_non_transform_kinds():
    for kind in (AugmentationKind.SEED, AugmentationKind.ASK_IMG):
        with pytest.raises(InvalidKind):
            build_question_augment_prompt(kind, vqa_record())


# --- response parsing -------------------------------------------------------

def test_parse_qa_block_full_yield():
    text = "\n".join(f"Q{i}: question {i}?\nA{i}: answer {i}" for i in range(1, 6))
    pairs, shortfall = parse_qa_block(text, expected_n=5)
    assert shortfall == 0
    assert pairs == [(f"question {i}?", f"answer {i}") for i in range(1, 6)]


def test_parse_qa_block_partial_yield_counts_shortfall():
    text = "Q1: one?\nA1: 1\nQ2: two?\nQ3: three?\nA3: 3"
    pairs, shortfall = parse_qa_block(text, expected_n=3)
    assert pairs == [("one?", "1"), ("three?", "3")]
    assert shortfall == 1


def test_parse_qa_block_joins_continuation_lines():
    text = "Q1: What is the total\nacross both rows?\nA1: The total\nis 12."
    pairs, _ = parse_qa_block(text, expected_n=1)
    assert pairs == [("What is the total across both rows?", "The total is 12.")]


def test_parse_qa_block_truncates_extra_pairs():
    text = "\n".join(f"Q{i}: q{i}?\nA{i}: a{i}" for i in range(1, 8))
    pairs, shortfall = parse_qa_block(text, expected_n=5)
    assert len(pairs) == 5
    assert shortfall == 0


def test_parse_qa_block_rejects_prose():
    with pytest.raises(ParseFailure):
        parse_qa_block("Happy to help! The image shows four dots.", expected_n=5)


# --- synthesis with a scripted backend --------------------------------------

def scripted_client(tmp_path, rules=None, **backend_kwargs):
    if rules is None:
        rules = cooperative_mock_rules()
    backend = ScriptedVlmBackend(
        [MockRule(match=r["match"], response=r["response"]) for r in rules["rules"]],
        **backend_kwargs,
    )
    return VlmClient(backend, cache_dir=tmp_path / "cache"), backend


def selected_from(builder, n_records=1, task="VQA", dataset="iconqa", answer="4"):
    for i in range(n_records):
        builder.add(dataset, task, f"How many dots in figure {i}?", answer)
    corpus = load_corpus(builder.write())
    return (
        SelectedSet(
            records=corpus.records,
            complexity={r.record_id: 2 for r in corpus.records},
        ),
        corpus.image_root,
    )


def pools_for(task=TaskType.VQA):
    return {task: small_pool()}


def test_one_seed_record_yields_nine_pairs(builder, tmp_path):
    selected, image_root = selected_from(builder)
    client, _ = scripted_client(tmp_path)
    corpus, log = synthesize(selected, client, pools_for(), AugmentConfig(max_workers=1), image_root)
    assert len(corpus) == 9
    assert corpus.count_by_kind() == {"Seed": 1, "AskImg": 5, "CompQ": 1, "RephQ": 1, "SimpQ": 1}
    assert log.shortfall == 0
    assert log.failed_calls == 0


def test_answer_preserving_transforms_reuse_parent_answer_verbatim(builder, tmp_path):
    selected, image_root = selected_from(builder, answer="Four dots.")
    client, _ = scripted_client(tmp_path)
    corpus, log = synthesize(selected, client, pools_for(), AugmentConfig(max_workers=1), image_root)
    parent = selected.records[0]
    for pair in corpus.pairs:
        if pair.kind in (AugmentationKind.REPH_Q, AugmentationKind.SIMP_Q):
            assert pair.answer == parent.answer
            assert pair.question != parent.question
    assert log.rejected_answer_mismatch == 0


def test_ops_subset_drops_exactly_those_operators(builder, tmp_path):
    selected, image_root = selected_from(builder)
    client, _ = scripted_client(tmp_path)
    config = AugmentConfig(ops=frozenset({AugmentationKind.ASK_IMG}), max_workers=1)
    corpus, _ = synthesize(selected, client, pools_for(), config, image_root)
    assert corpus.count_by_kind() == {"Seed": 1, "AskImg": 5}

    config = AugmentConfig(ops=frozenset(), max_workers=1)
    corpus, _ = synthesize(selected, client, pools_for(), config, image_root)
    assert corpus.count_by_kind() == {"Seed": 1}


def test_mwp_mined_answers_must_be_numeric(builder, tmp_path):
    rules = {
        "rules": [
            {
                "match": r"Write exactly 5 new",
                "response": "Q1: valid?\nA1: 12\nQ2: invalid?\nA2: lots of cats\n"
                "Q3: also valid?\nA3: 3.5\nQ4: nah?\nA4: many\nQ5: ok?\nA5: -7",
            }
        ]
    }
    selected, image_root = selected_from(builder, task="MWP", dataset="tabmwp", answer="12")
    client, _ = scripted_client(tmp_path, rules)
    config = AugmentConfig(ops=frozenset({AugmentationKind.ASK_IMG}), max_workers=1)
    corpus, log = synthesize(selected, client, pools_for(TaskType.MWP), config, image_root)
    mined = [p for p in corpus.pairs if p.kind is AugmentationKind.ASK_IMG]
    assert [p.answer for p in mined] == ["12", "3.5", "-7"]
    assert log.rejected_non_numeric == 2
    assert log.shortfall == 2


def test_non_mwp_mined_answers_are_not_number_filtered(builder, tmp_path):
    rules = {
        "rules": [
            {
                "match": r"Write exactly 5 new",
                "response": "\n".join(f"Q{i}: q{i}?\nA{i}: word{i}" for i in range(1, 6)),
            }
        ]
    }
    selected, image_root = selected_from(builder)
    client, _ = scripted_client(tmp_path, rules)
    config = AugmentConfig(ops=frozenset({AugmentationKind.ASK_IMG}), max_workers=1)
    corpus, log = synthesize(selected, client, pools_for(), config, image_root)
    assert corpus.count_by_kind()["AskImg"] == 5
    assert log.rejected_non_numeric == 0


def test_hostile_rephrase_answers_are_rejected(builder, tmp_path):
    rules = cooperative_mock_rules()
    rules["rules"][0] = {
        "match": r"Rephrase the question below",
        "response": "Q1: Restated question?\nA1: a completely different answer",
    }
    selected, image_root = selected_from(builder)
    client, _ = scripted_client(tmp_path, rules)
    corpus, log = synthesize(selected, client, pools_for(), AugmentConfig(max_workers=1), image_root)
    assert "RephQ" not in corpus.count_by_kind()
    assert log.rejected_answer_mismatch >= 1
    assert log.shortfall >= 1


def test_permanent_backend_failure_degrades_to_seed_only(builder, tmp_path):
    selected, image_root = selected_from(builder)
    client, backend = scripted_client(tmp_path, {"rules": []})  # nothing matches
    corpus, log = synthesize(selected, client, pools_for(), AugmentConfig(max_workers=1), image_root)
    assert corpus.count_by_kind() == {"Seed": 1}
    # 4 operators x (1 + 2 retries), every one a failure
    assert log.calls == 12
    assert log.failed_calls == 12
    assert log.shortfall == 5 + 3


def test_retry_with_reminder_recovers_on_second_attempt(builder, tmp_path):
    rules = {
        "rules": [
            {
                "match": r"Original question: ([^\n]+)\nOriginal answer: ([^\n]+)[\s\S]*Reminder:",
                "response": r"Q1: In other words: \1\nA1: \2",
            },
            {"match": r"Rephrase the question below", "response": "no markers here"},
        ]
    }
    selected, image_root = selected_from(builder)
    client, backend = scripted_client(tmp_path, rules)
    config = AugmentConfig(ops=frozenset({AugmentationKind.REPH_Q}), max_workers=1)
    corpus, log = synthesize(selected, client, pools_for(), config, image_root)
    assert corpus.count_by_kind() == {"Seed": 1, "RephQ": 1}
    assert log.calls == 2
    assert log.failed_calls == 1
    assert len(backend.call_log) == 2  # the retry got its own cache key


def test_abort_threshold_stops_a_failing_run(builder, tmp_path):
    selected, image_root = selected_from(builder, n_records=4)
    client, _ = scripted_client(tmp_path, {"rules": []})
    config = AugmentConfig(max_workers=1, abort_min_calls=6, abort_failure_rate=0.5)
    with pytest.raises(AbortThresholdExceeded):
        synthesize(selected, client, pools_for(), config, image_root)


def test_missing_demo_pool_fails_fast_when_mining_enabled(builder, tmp_path):
    selected, image_root = selected_from(builder)
    client, _ = scripted_client(tmp_path)
    with pytest.raises(EmptyDemoPool):
        synthesize(selected, client, {}, AugmentConfig(max_workers=1), image_root)
    # ...but transforms alone need no pool
    config = AugmentConfig(ops=frozenset({AugmentationKind.REPH_Q}), max_workers=1)
    corpus, _ = synthesize(selected, client, {}, config, image_root)
    assert corpus.count_by_kind() == {"Seed": 1, "RephQ": 1}


def test_parallel_synthesis_matches_serial(builder, tmp_path):
    selected, image_root = selected_from(builder, n_records=6)
    client_a, _ = scripted_client(tmp_path / "a")
    client_b, _ = scripted_client(tmp_path / "b")
    serial, _ = synthesize(selected, client_a, pools_for(), AugmentConfig(max_workers=1), image_root)
    parallel, _ = synthesize(selected, client_b, pools_for(), AugmentConfig(max_workers=4), image_root)
    assert serial.pairs == parallel.pairs
    assert serial.image_sha == parallel.image_sha


def test_augmented_round_trip(builder, tmp_path):
    selected, image_root = selected_from(builder, n_records=2)
    client, _ = scripted_client(tmp_path)
    corpus, _ = synthesize(selected, client, pools_for(), AugmentConfig(max_workers=1), image_root)
    path = tmp_path / "augmented.jsonl"
    write_augmented(corpus, path)
    loaded = read_augmented(path, corpus.image_sha)
    assert loaded == corpus


# --- dedup -------------------------------------------------------------------

def qa(parent, kind, question, answer="a"):
    return GeneratedQA(parent, kind, question, answer, None)


def test_dedup_drops_exact_and_normalized_duplicates_within_an_image():
    corpus = AugmentedCorpus(
        pairs=(
            qa("r1", AugmentationKind.ASK_IMG, "How many dots?"),
            qa("r1", AugmentationKind.ASK_IMG, "How many dots?"),
            qa("r1", AugmentationKind.ASK_IMG, "how many DOTS"),
            qa("r1", AugmentationKind.ASK_IMG, "How many lines?"),
        ),
        image_sha={"r1": "sha-one"},
    )
    kept = dedup(corpus)
    assert [p.question for p in kept.pairs] == ["How many dots?", "How many lines?"]


def test_dedup_keeps_same_question_on_different_images():
    corpus = AugmentedCorpus(
        pairs=(
            qa("r1", AugmentationKind.ASK_IMG, "How many dots?"),
            qa("r2", AugmentationKind.ASK_IMG, "How many dots?"),
        ),
        image_sha={"r1": "sha-one", "r2": "sha-two"},
    )
    assert len(dedup(corpus)) == 2


def test_dedup_seed_wins_even_when_generated_pair_came_first():
    corpus = AugmentedCorpus(
        pairs=(
            qa("r1", AugmentationKind.ASK_IMG, "How many dots?", "5"),
            qa("r2", AugmentationKind.SEED, "How many dots?", "4"),
        ),
        image_sha={"r1": "shared-sha", "r2": "shared-sha"},
    )
    kept = dedup(corpus)
    assert len(kept) == 1
    assert kept.pairs[0].kind is AugmentationKind.SEED
    assert kept.pairs[0].answer == "4"


def test_dedup_first_generated_pair_wins_among_generated():
    corpus = AugmentedCorpus(
        pairs=(
            qa("r1", AugmentationKind.COMP_Q, "How many dots?", "first"),
            qa("r1", AugmentationKind.ASK_IMG, "How many dots?", "second"),
        ),
        image_sha={"r1": "sha-one"},
    )
    kept = dedup(corpus)
    assert len(kept) == 1
    assert kept.pairs[0].answer == "first"


def test_dedup_preserves_referential_integrity(builder, tmp_path):
    selected, image_root = selected_from(builder, n_records=3)
    client, _ = scripted_client(tmp_path)
    corpus, _ = synthesize(selected, client, pools_for(), AugmentConfig(max_workers=1), image_root)
    kept = dedup(corpus)
    parents = {r.record_id for r in selected.records}
    assert all(p.parent_record_id in parents for p in kept.pairs)
    # cooperative mock mines unique questions per image, so nothing collapses
    assert len(kept) == len(corpus)
