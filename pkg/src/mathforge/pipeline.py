"""Orchestration: one config drives all stages, with checksum-based resume.

Every stage writes its artifacts under the output directory and registers
their SHA-256 in the run manifest. A completed stage whose artifacts still
match their checksums is skipped on rerun (unless forced), so interrupted
runs resume where they stopped. The manifest also pins the config hash and
tool version, making a finished run auditable from one file.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

from . import __version__
from .augment import (
    AugmentConfig,
    AugmentationKind,
    AugmentedCorpus,
    dedup,
    read_augmented,
    synthesize,
    write_augmented,
)
from .clustering import DemoPool, build_demo_pool, cluster_questions
from .emit import dataset_report, emit_records, read_dataset, render_report, write_dataset
from .errors import ConfigInvalid, EmptyTask
from .evalkit import evaluate, read_items, read_predictions, render_accuracy
from .genclient import VlmClient, build_backend
from .ingest import Corpus, load_corpus, read_corpus, write_corpus
from .scoring import (
    annotate_images,
    build_scorer,
    read_score_table,
    sample_annotation_set,
    score_corpus,
    write_score_table,
)
from .selection import (
    SelectionConfig,
    compute_availability,
    compute_quotas,
    read_selected,
    stratified_sample,
    write_plan,
    write_selected,
)
from .selection import SelectionPlan
from .storage import canonical_dumps, sha256_file, sha256_text, write_json_atomic

STAGES = ("ingest", "score", "select", "cluster", "augment", "emit")


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    manifest: Path
    out_dir: Path
    cache_dir: Path
    backend: str | None = None
    scorer: str = "mock:hash"
    rpm: float | None = None
    max_concurrency: int = 4
    score_workers: int = 4
    strict_images: bool = False
    selection: SelectionConfig = SelectionConfig()
    clustering_k: int = 5
    clustering_seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    sample_n: int = 10000
    sample_seed: int = 0
    annotation_model: str = "gpt-4-vision-preview"

    def to_dict(self) -> dict:
        return {
            "manifest": str(self.manifest),
            "out_dir": str(self.out_dir),
            "cache_dir": str(self.cache_dir),
            "backend": self.backend,
            "scorer": self.scorer,
            "rpm": self.rpm,
            "max_concurrency": self.max_concurrency,
            "score_workers": self.score_workers,
            "strict_images": self.strict_images,
            "selection": {
                "ratio": list(self.selection.ratio),
                "budget": self.selection.budget,
                "take_all_top_stratum": self.selection.take_all_top_stratum,
                "seed": self.selection.seed,
            },
            "clustering": {"k": self.clustering_k, "seed": self.clustering_seed},
            "augment": {
                "n_per_image": self.augment.n_per_image,
                "ops": sorted(k.value for k in self.augment.ops),
                "model_id": self.augment.model_id,
                "max_retries": self.augment.max_retries,
                "abort_failure_rate": self.augment.abort_failure_rate,
                "abort_min_calls": self.augment.abort_min_calls,
                "max_workers": self.augment.max_workers,
            },
            "sample": {"n": self.sample_n, "seed": self.sample_seed},
            "annotation_model": self.annotation_model,
        }

    def config_hash(self) -> str:
        return sha256_text(canonical_dumps(self.to_dict()))


_KNOWN_KEYS = {
    "manifest", "out_dir", "cache_dir", "backend", "scorer", "rpm",
    "max_concurrency", "score_workers", "strict_images", "selection",
    "clustering", "augment", "sample", "annotation_model",
}


def load_config(path: Path | str, overrides: Mapping | None = None) -> PipelineConfig:
    """Read the pipeline config JSON, applying CLI overrides on top."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a JSON object")
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
    if "manifest" not in raw:
        raise ConfigInvalid("config requires a manifest path")

    base = path.parent

    def resolve(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    selection_raw = dict(raw.get("selection", {}))
    clustering_raw = dict(raw.get("clustering", {}))
    augment_raw = dict(raw.get("augment", {}))
    sample_raw = dict(raw.get("sample", {}))

    try:
        selection = SelectionConfig(
            ratio=tuple(selection_raw.get("ratio", (2, 3, 4, 1))),
            budget=int(selection_raw.get("budget", 40000)),
            take_all_top_stratum=bool(selection_raw.get("take_all_top_stratum", True)),
            seed=int(selection_raw.get("seed", 0)),
        )
        ops = augment_raw.get("ops")
        if isinstance(ops, str):
            ops = AugmentConfig.parse_ops(ops)
        elif isinstance(ops, list):
            ops = AugmentConfig.parse_ops(",".join(ops))
        else:
            ops = AugmentConfig().ops
        augment_cfg = AugmentConfig(
            n_per_image=int(augment_raw.get("n_per_image", 5)),
            ops=ops,
            model_id=augment_raw.get("model_id", AugmentConfig().model_id),
            max_retries=int(augment_raw.get("max_retries", 2)),
            abort_failure_rate=float(augment_raw.get("abort_failure_rate", 0.5)),
            abort_min_calls=int(augment_raw.get("abort_min_calls", 25)),
            max_workers=int(augment_raw.get("max_workers", 4)),
        )
        config = PipelineConfig(
            manifest=resolve(raw["manifest"]),
            out_dir=resolve(raw.get("out_dir", "out")),
            cache_dir=resolve(raw.get("cache_dir", "cache")),
            backend=raw.get("backend"),
            scorer=raw.get("scorer", "mock:hash"),
            rpm=float(raw["rpm"]) if raw.get("rpm") is not None else None,
            max_concurrency=int(raw.get("max_concurrency", 4)),
            score_workers=int(raw.get("score_workers", 4)),
            strict_images=bool(raw.get("strict_images", False)),
            selection=selection,
            clustering_k=int(clustering_raw.get("k", 5)),
            clustering_seed=int(clustering_raw.get("seed", 0)),
            augment=augment_cfg,
            sample_n=int(sample_raw.get("n", 10000)),
            sample_seed=int(sample_raw.get("seed", 0)),
            annotation_model=raw.get("annotation_model", "gpt-4-vision-preview"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad config value: {exc}") from exc

    if overrides:
        config = apply_overrides(config, overrides)
    return config


def apply_overrides(config: PipelineConfig, overrides: Mapping) -> PipelineConfig:
    """Apply flat CLI override values onto a loaded config."""
    updates: dict = {}
    if overrides.get("backend") is not None:
        updates["backend"] = overrides["backend"]
    if overrides.get("scorer") is not None:
        updates["scorer"] = overrides["scorer"]
    if overrides.get("rpm") is not None:
        updates["rpm"] = overrides["rpm"]
    if overrides.get("cache_dir") is not None:
        updates["cache_dir"] = Path(overrides["cache_dir"])
    if overrides.get("out_dir") is not None:
        updates["out_dir"] = Path(overrides["out_dir"])

    selection_updates: dict = {}
    for key in ("ratio", "budget", "take_all_top_stratum"):
        if overrides.get(key) is not None:
            selection_updates[key] = overrides[key]
    if overrides.get("selection_seed") is not None:
        selection_updates["seed"] = overrides["selection_seed"]
    if selection_updates:
        updates["selection"] = replace(config.selection, **selection_updates)

    if overrides.get("k") is not None:
        updates["clustering_k"] = overrides["k"]
    if overrides.get("clustering_seed") is not None:
        updates["clustering_seed"] = overrides["clustering_seed"]

    augment_updates: dict = {}
    if overrides.get("ops") is not None:
        augment_updates["ops"] = AugmentConfig.parse_ops(overrides["ops"])
    if overrides.get("n_per_image") is not None:
        augment_updates["n_per_image"] = overrides["n_per_image"]
    if augment_updates:
        updates["augment"] = replace(config.augment, **augment_updates)

    if overrides.get("sample_n") is not None:
        updates["sample_n"] = overrides["sample_n"]
    if overrides.get("sample_seed") is not None:
        updates["sample_seed"] = overrides["sample_seed"]
    return replace(config, **updates) if updates else config


class RunState:
    """The run manifest: stage checksums, config hash, outcome."""

    def __init__(self, config: PipelineConfig) -> None:
        self.config = config
        self.path = config.out_dir / "run_manifest.json"
        self.data: dict = {
            "tool_version": __version__,
            "config_hash": config.config_hash(),
            "demo_pools": "one seeded pool per task per run",
            "stages": {},
        }
        if self.path.is_file():
            try:
                previous = json.loads(self.path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                previous = None
            if (
                isinstance(previous, dict)
                and previous.get("config_hash") == self.data["config_hash"]
                and previous.get("tool_version") == __version__
            ):
                self.data["stages"] = previous.get("stages", {})

    def artifacts_valid(self, stage: str) -> bool:
        entry = self.data["stages"].get(stage)
        if not entry or entry.get("status") != "completed":
            return False
        for name, digest in entry.get("artifacts", {}).items():
            artifact = self.config.out_dir / name
            if not artifact.is_file() or sha256_file(artifact) != digest:
                return False
        return True

    def record(self, stage: str, artifacts: list[Path], status: str = "completed",
               error: str | None = None, extra: Mapping | None = None) -> None:
        entry: dict = {
            "status": status,
            "artifacts": {
                p.relative_to(self.config.out_dir).as_posix(): sha256_file(p) for p in artifacts
            },
        }
        if error is not None:
            entry["error"] = error
        if extra:
            entry.update(extra)
        self.data["stages"][stage] = entry
        self.save()

    def save(self) -> None:
        self.config.out_dir.mkdir(parents=True, exist_ok=True)
        write_json_atomic(self.path, self.data)


def _paths(config: PipelineConfig) -> dict[str, Path]:
    out = config.out_dir
    return {
        "corpus": out / "corpus.jsonl",
        "scores": out / "scores.jsonl",
        "plan": out / "plan.json",
        "selected": out / "selected.jsonl",
        "pools": out / "demo_pools.json",
        "clusters": out / "clusters.jsonl",
        "augmented": out / "augmented.jsonl",
        "synthesis_log": out / "synthesis_log.json",
        "dataset": out / "dataset.jsonl",
        "dataset_manifest": out / "dataset_manifest.json",
        "report": out / "report.json",
        "report_text": out / "report.txt",
    }


def stage_ingest(config: PipelineConfig) -> list[Path]:
    corpus = load_corpus(config.manifest, strict_images=config.strict_images)
    p = _paths(config)
    write_corpus(corpus, p["corpus"])
    return [p["corpus"]]


def stage_score(config: PipelineConfig) -> list[Path]:
    p = _paths(config)
    corpus = read_corpus(p["corpus"], image_root=_image_root(config))
    backend = build_scorer(config.scorer)
    table = score_corpus(corpus, backend, max_workers=config.score_workers)
    write_score_table(table, p["scores"])
    return [p["scores"]]


def stage_select(config: PipelineConfig) -> list[Path]:
    p = _paths(config)
    corpus = read_corpus(p["corpus"], image_root=_image_root(config))
    scores = read_score_table(p["scores"])
    availability = compute_availability(corpus, scores)
    plan = compute_quotas(availability, config.selection)
    selected = stratified_sample(corpus, scores, plan, seed=config.selection.seed)
    write_plan(plan, p["plan"])
    write_selected(selected, p["selected"])
    return [p["plan"], p["selected"]]


def stage_cluster(config: PipelineConfig) -> list[Path]:
    from .storage import write_jsonl_atomic

    p = _paths(config)
    selected = read_selected(p["selected"])
    tasks = sorted({r.task for r in selected.records}, key=lambda t: t.value)
    pools: dict[str, dict] = {}
    assignment_rows: list[dict] = []
    for task in tasks:
        pool = build_demo_pool(selected, task, seed=config.clustering_seed, k=config.clustering_k)
        pools[task.value] = pool.to_dict()
        clustered = cluster_questions(selected, task, k=config.clustering_k, seed=config.clustering_seed)
        for dataset_id in sorted(clustered):
            model, _, record_ids = clustered[dataset_id]
            for record_id, cluster in zip(record_ids, model.assignment):
                assignment_rows.append(
                    {"dataset_id": dataset_id, "question_id": record_id, "cluster": cluster}
                )
    write_json_atomic(p["pools"], pools)
    write_jsonl_atomic(p["clusters"], assignment_rows)
    return [p["pools"], p["clusters"]]


def stage_augment(config: PipelineConfig) -> list[Path]:
    if not config.backend:
        raise ConfigInvalid("augment stage needs a VLM backend (config key 'backend')")
    p = _paths(config)
    selected = read_selected(p["selected"])
    pools_raw = json.loads(p["pools"].read_text(encoding="utf-8"))
    pools = {pool.task: pool for pool in (DemoPool.from_dict(v) for v in pools_raw.values())}
    client = VlmClient(
        backend=build_backend(config.backend),
        cache_dir=config.cache_dir,
        rpm=config.rpm,
        max_concurrency=config.max_concurrency,
    )
    corpus, log = synthesize(selected, client, pools, config.augment, _image_root(config))
    corpus = dedup(corpus)
    write_augmented(corpus, p["augmented"])
    write_json_atomic(
        p["synthesis_log"],
        {
            "calls": log.calls,
            "failed_calls": log.failed_calls,
            "shortfall": log.shortfall,
            "rejected_answer_mismatch": log.rejected_answer_mismatch,
            "rejected_non_numeric": log.rejected_non_numeric,
            "target": log.target,
            "notes": log.notes,
            "cache_hits": client.stats.cache_hits,
            "upstream_calls": client.stats.upstream_calls,
        },
    )
    return [p["augmented"], p["synthesis_log"]]


def stage_emit(config: PipelineConfig) -> list[Path]:
    p = _paths(config)
    selected = read_selected(p["selected"])
    image_root = _image_root(config)
    image_sha = {
        r.record_id: sha256_file(image_root / r.image_ref) for r in selected.records
    }
    corpus = read_augmented(p["augmented"], image_sha)
    records = emit_records(corpus, selected, image_root)
    write_dataset(records, config.out_dir, name="dataset")
    target = json.loads(p["synthesis_log"].read_text(encoding="utf-8"))["target"]
    report = dataset_report(records, target=target)
    write_json_atomic(p["report"], report)
    p["report_text"].write_text(render_report(report), encoding="utf-8")
    return [p["dataset"], p["dataset_manifest"], p["report"], p["report_text"]]


_STAGE_FUNCTIONS: dict[str, Callable[[PipelineConfig], list[Path]]] = {
    "ingest": stage_ingest,
    "score": stage_score,
    "select": stage_select,
    "cluster": stage_cluster,
    "augment": stage_augment,
    "emit": stage_emit,
}


def _image_root(config: PipelineConfig) -> Path:
    from .ingest import load_manifest

    return load_manifest(config.manifest).image_root


def run_all(config: PipelineConfig, force: bool = False, log=None) -> dict:
    """Run every stage in order, skipping those with valid checksums."""
    state = RunState(config)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    for stage in STAGES:
        if not force and state.artifacts_valid(stage):
            if log:
                log(f"[{stage}] up to date, skipped")
            continue
        if log:
            log(f"[{stage}] running")
        try:
            artifacts = _STAGE_FUNCTIONS[stage](config)
        except Exception as exc:
            state.record(stage, [], status="failed", error=f"{type(exc).__name__}: {exc}")
            if exc.args:
                exc.args = (f"[stage {stage}] {exc.args[0]}",) + exc.args[1:]
            else:
                exc.args = (f"[stage {stage}]",)
            raise
        state.record(stage, artifacts)
    dataset_path = _paths(config)["dataset"]
    if dataset_path.is_file():
        state.data["final_dataset_sha256"] = sha256_file(dataset_path)
    state.data["elapsed_seconds"] = round(time.monotonic() - started, 3)
    state.save()
    return state.data


def run_annotate(config: PipelineConfig, n: int | None = None, seed: int | None = None) -> Path:
    """Sample images and label them with the VLM; write the score table."""
    if not config.backend:
        raise ConfigInvalid("annotate needs a VLM backend (config key 'backend')")
    corpus = load_corpus(config.manifest, strict_images=True)
    refs = sample_annotation_set(
        corpus,
        n if n is not None else config.sample_n,
        seed if seed is not None else config.sample_seed,
    )
    client = VlmClient(
        backend=build_backend(config.backend),
        cache_dir=config.cache_dir,
        rpm=config.rpm,
        max_concurrency=config.max_concurrency,
    )
    result = annotate_images(corpus, refs, client, model_id=config.annotation_model)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = config.out_dir / "annotations.jsonl"
    write_score_table(result.table, out_path)
    if result.dropped:
        write_json_atomic(config.out_dir / "annotation_dropped.json", result.dropped)
    return out_path


def run_eval(items_path: Path, predictions_path: Path, out_path: Path | None = None) -> tuple[dict, str]:
    """Score predictions against items; return (accuracy dict, text table)."""
    items = read_items(items_path)
    predictions = read_predictions(predictions_path)
    accuracy, rows = evaluate(items, predictions)
    text = render_accuracy(accuracy)
    payload = {"accuracy": accuracy.to_dict(), "items": rows}
    if out_path is not None:
        write_json_atomic(out_path, payload)
    return payload, text
