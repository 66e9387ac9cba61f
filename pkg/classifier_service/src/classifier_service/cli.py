"""Command line entry points: train, serve, score, demo-data."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import __version__
from .data import generate_demo_corpus, load_annotations
from .errors import ServiceError
from .training import TrainConfig, load_artifacts, train_classifiers
from .vit import DEFAULT_BACKBONE


def service_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ServiceError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


@click.group()
@click.version_option(version=__version__, prog_name="classifier-service")
def main() -> None:
    """Train and serve image clarity/complexity classifiers."""


@main.command()
@click.option("--annotations", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--image-root", default=None, type=click.Path(file_okay=False, path_type=Path),
              help="Root for relative image_ref entries.")
@click.option("--artifacts", required=True, type=click.Path(file_okay=False, path_type=Path),
              help="Root directory for versioned artifact output.")
@click.option("--backbone", default=DEFAULT_BACKBONE, show_default=True)
@click.option("--lr", "learning_rate", type=float, default=2e-4, show_default=True)
@click.option("--epochs", type=int, default=5, show_default=True)
@click.option("--resolution", type=int, default=None, help="Input resolution override.")
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@service_errors
def train(annotations: Path, image_root: Path | None, artifacts: Path, backbone: str,
          learning_rate: float, epochs: int, resolution: int | None,
          batch_size: int, seed: int) -> None:
    """Train both classifiers on an annotations JSONL file."""
    rows = load_annotations(annotations, image_root)
    config = TrainConfig(
        learning_rate=learning_rate,
        epochs=epochs,
        backbone=backbone,
        input_resolution=resolution,
        seed=seed,
        batch_size=batch_size,
    )
    result = train_classifiers(rows, config, artifacts)
    click.echo(f"artifacts: {result.directory}")
    for name, value in result.metrics["held_out"].items():
        click.echo(f"held-out {name}: {value:.4f}")


@main.command()
@click.option("--artifacts", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Artifact version directory (e.g. artifacts/v001).")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@service_errors
def serve(artifacts: Path, host: str, port: int) -> None:
    """Serve /score and /healthz for a trained artifact version."""
    import uvicorn

    from .service import create_app

    app = create_app(load_artifacts(artifacts))
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@click.option("--artifacts", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@service_errors
def score(artifacts: Path, images: tuple[Path, ...]) -> None:
    """Batch inference: print one JSON row per image."""
    classifiers = load_artifacts(artifacts)
    for image in images:
        result = classifiers.score_file(image)
        click.echo(json.dumps({"image": str(image), **result.to_dict()}))


@main.command("demo-data")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--n", type=int, default=240, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@service_errors
def demo_data(out: Path, n: int, seed: int) -> None:
    """Generate the synthetic sharp-vs-blurred corpus with labels."""
    annotations, image_root = generate_demo_corpus(out, n=n, seed=seed)
    click.echo(f"annotations: {annotations}")
    click.echo(f"image root: {image_root}")


if __name__ == "__main__":
    main()
