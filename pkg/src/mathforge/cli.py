"""Command-line entry point: one subcommand per stage plus run-all.

Each error class maps to its own exit code so callers can branch on
failures without parsing messages:

  3 invalid manifest, record, or config
  4 missing image / not enough images
  5 backend unreachable, rate limited, upstream failure, timeout
  6 missing score / plan out of date
  7 parse or validation failure (responses, documents, tasks, operators)
  8 augmentation failure rate tripped the abort threshold
  9 dangling parent reference / file write failure
 10 any other pipeline error
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import __version__
from .errors import (
    AbortThresholdExceeded,
    BackendUnavailable,
    ConfigInvalid,
    DanglingParent,
    EmptyDemoPool,
    EmptyDocument,
    EmptyTask,
    ForgeError,
    InsufficientImages,
    InvalidKind,
    IoError,
    ManifestInvalid,
    MissingImage,
    MissingScore,
    NoVectors,
    OutOfRange,
    ParseFailure,
    PlanMismatch,
    RateLimited,
    RecordInvalid,
    Timeout,
    UpstreamError,
)
from .pipeline import PipelineConfig, load_config, run_all, run_annotate, run_eval
from .pipeline import (
    stage_augment,
    stage_cluster,
    stage_emit,
    stage_ingest,
    stage_score,
    stage_select,
)

_EXIT_CODES: tuple[tuple[type[ForgeError], ...], ...] = (
    (ManifestInvalid, RecordInvalid, ConfigInvalid),
    (MissingImage, InsufficientImages),
    (BackendUnavailable, RateLimited, UpstreamError, Timeout),
    (MissingScore, PlanMismatch),
    (ParseFailure, OutOfRange, EmptyDocument, NoVectors, EmptyTask, EmptyDemoPool, InvalidKind),
    (AbortThresholdExceeded,),
    (DanglingParent, IoError),
)


def exit_code_for(exc: ForgeError) -> int:
    for offset, classes in enumerate(_EXIT_CODES):
        if isinstance(exc, classes):
            return 3 + offset
    return 10


def forge_errors(fn):
    """Translate pipeline exceptions into messages and exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ForgeError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exit_code_for(exc))

    return wrapper


def config_option(fn):
    return click.option(
        "--config",
        "config_path",
        required=True,
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="Pipeline config JSON.",
    )(fn)


@click.group()
@click.version_option(version=__version__, prog_name="forge")
def main() -> None:
    """Build and evaluate multimodal math instruction-tuning data."""


@main.command()
@config_option
@click.option("--strict-images", is_flag=True, help="Fail on missing image files.")
@forge_errors
def ingest(config_path: Path, strict_images: bool) -> None:
    """Load and validate source datasets into one corpus file."""
    config = load_config(config_path)
    if strict_images:
        from dataclasses import replace

        config = replace(config, strict_images=True)
    artifacts = stage_ingest(config)
    click.echo(f"wrote {artifacts[0]}")


@main.command()
@config_option
@click.option("--n", type=int, default=None, help="Sample size (default from config).")
@click.option("--seed", type=int, default=None, help="Sampling seed (default from config).")
@click.option("--backend", default=None, help="VLM backend: mock:<script.json> or URL.")
@forge_errors
def annotate(config_path: Path, n: int | None, seed: int | None, backend: str | None) -> None:
    """Label a uniform image sample with the VLM annotator."""
    config = load_config(config_path, overrides={"backend": backend})
    out = run_annotate(config, n=n, seed=seed)
    click.echo(f"wrote {out}")


@main.command()
@config_option
@click.option("--backend", default=None, help="Scorer: mock:<spec> or service URL.")
@forge_errors
def score(config_path: Path, backend: str | None) -> None:
    """Score every corpus image for clarity and complexity."""
    config = load_config(config_path, overrides={"scorer": backend})
    artifacts = stage_score(config)
    click.echo(f"wrote {artifacts[0]}")


def _parse_ratio(text: str | None) -> tuple[int, int, int, int] | None:
    if text is None:
        return None
    try:
        parts = tuple(int(p) for p in text.split(":"))
    except ValueError:
        raise ConfigInvalid(f"ratio {text!r} must be colon-separated integers") from None
    if len(parts) != 4:
        raise ConfigInvalid(f"ratio {text!r} must have 4 parts")
    return parts


@main.command()
@config_option
@click.option("--ratio", default=None, help="Stratum ratio, e.g. 2:3:4:1.")
@click.option("--budget", type=int, default=None)
@click.option("--seed", "selection_seed", type=int, default=None)
@forge_errors
def select(config_path: Path, ratio: str | None, budget: int | None, selection_seed: int | None) -> None:
    """Filter to clear images and draw the stratified seed set."""
    config = load_config(
        config_path,
        overrides={
            "ratio": _parse_ratio(ratio),
            "budget": budget,
            "selection_seed": selection_seed,
        },
    )
    artifacts = stage_select(config)
    click.echo(f"wrote {artifacts[0]} and {artifacts[1]}")


@main.command()
@config_option
@click.option("--k", type=int, default=None, help="Clusters per dataset.")
@click.option("--seed", "clustering_seed", type=int, default=None)
@forge_errors
def cluster(config_path: Path, k: int | None, clustering_seed: int | None) -> None:
    """Cluster seed questions and sample demonstration pools."""
    config = load_config(config_path, overrides={"k": k, "clustering_seed": clustering_seed})
    artifacts = stage_cluster(config)
    click.echo(f"wrote {artifacts[0]} and {artifacts[1]}")


@main.command()
@config_option
@click.option("--ops", default=None, help="Comma list: askimg,compq,rephq,simpq.")
@click.option("--n-per-image", type=int, default=None)
@click.option("--backend", default=None, help="VLM backend override.")
@click.option("--rpm", type=float, default=None, help="Requests-per-minute limit.")
@click.option("--cache-dir", default=None, type=click.Path(path_type=Path))
@forge_errors
def augment(
    config_path: Path,
    ops: str | None,
    n_per_image: int | None,
    backend: str | None,
    rpm: float | None,
    cache_dir: Path | None,
) -> None:
    """Generate new QA pairs with the configured operators."""
    config = load_config(
        config_path,
        overrides={
            "ops": ops,
            "n_per_image": n_per_image,
            "backend": backend,
            "rpm": rpm,
            "cache_dir": cache_dir,
        },
    )
    artifacts = stage_augment(config)
    click.echo(f"wrote {artifacts[0]}")


@main.command()
@config_option
@forge_errors
def emit(config_path: Path) -> None:
    """Serialize the augmented corpus into instruction-tuning JSONL."""
    config = load_config(config_path)
    artifacts = stage_emit(config)
    click.echo(f"wrote {artifacts[0]}")


@main.command()
@config_option
@forge_errors
def report(config_path: Path) -> None:
    """Print the dataset composition report."""
    config = load_config(config_path)
    report_text = config.out_dir / "report.txt"
    if not report_text.is_file():
        raise IoError(f"no report at {report_text}; run emit first")
    click.echo(report_text.read_text(encoding="utf-8"), nl=False)


@main.command("eval")
@click.option("--items", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--predictions", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", default=None, type=click.Path(dir_okay=False, path_type=Path),
              help="Also write accuracy JSON here.")
@forge_errors
def eval_command(items: Path, predictions: Path, out: Path | None) -> None:
    """Score model predictions against benchmark items."""
    _, text = run_eval(items, predictions, out_path=out)
    click.echo(text, nl=False)


@main.command("run-all")
@config_option
@click.option("--force", is_flag=True, help="Rerun every stage, ignoring checksums.")
@forge_errors
def run_all_command(config_path: Path, force: bool) -> None:
    """Run ingest, score, select, cluster, augment, and emit in order."""
    config = load_config(config_path)
    manifest = run_all(config, force=force, log=lambda msg: click.echo(msg))
    final = manifest.get("final_dataset_sha256")
    click.echo(f"run complete in {manifest['elapsed_seconds']}s")
    if final:
        click.echo(f"dataset sha256: {final}")


if __name__ == "__main__":
    main()
