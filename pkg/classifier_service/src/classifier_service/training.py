"""Train the clarity and complexity classifiers; save/load versioned artifacts.

Two vision transformers are trained independently with cross-entropy, one
binary head for clarity and one 4-way head for complexity, on the same
fixed-seed 90/10 split. Artifacts land in a fresh ``vNNN`` directory with
a metadata JSON describing exactly how to rebuild the models, so loading
never guesses.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from . import __version__
from .data import AnnotatedImage, load_batch, preprocess
from .errors import ArtifactLoadError, DegenerateLabels, UnreadableImage
from .vit import DEFAULT_BACKBONE, backbone_spec, build_classifier

METADATA_FILE = "metadata.json"
METRICS_FILE = "metrics.json"
TASKS = {"clarity": 2, "complexity": 4}


@dataclass(frozen=True, slots=True)
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 5
    backbone: str = DEFAULT_BACKBONE
    input_resolution: int | None = None  # None: the backbone's native size
    seed: int = 0
    batch_size: int = 16
    held_out_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        backbone_spec(self.backbone)  # fail fast on unknown names
        if not 0.0 < self.held_out_fraction < 1.0:
            raise ValueError("held_out_fraction must be in (0, 1)")

    @property
    def resolution(self) -> int:
        if self.input_resolution is not None:
            return self.input_resolution
        return backbone_spec(self.backbone).image_size

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "backbone": self.backbone,
            "input_resolution": self.resolution,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "held_out_fraction": self.held_out_fraction,
        }


@dataclass(frozen=True, slots=True)
class ScoreResult:
    clarity: int
    complexity: int
    clarity_prob: float
    complexity_probs: tuple[float, float, float, float]

    def to_dict(self) -> dict:
        return {
            "clarity": self.clarity,
            "complexity": self.complexity,
            "clarity_prob": self.clarity_prob,
            "complexity_probs": list(self.complexity_probs),
        }


@dataclass(slots=True)
class Classifiers:
    """Loaded clarity + complexity models ready for inference."""

    clarity_model: nn.Module
    complexity_model: nn.Module
    resolution: int
    metadata: dict = field(default_factory=dict)

    def score_tensor(self, batch: torch.Tensor) -> list[ScoreResult]:
        with torch.inference_mode():
            clarity_probs = torch.softmax(self.clarity_model(batch), dim=1)
            complexity_probs = torch.softmax(self.complexity_model(batch), dim=1)
        results = []
        for cl_row, cx_row in zip(clarity_probs, complexity_probs):
            results.append(
                ScoreResult(
                    clarity=int(cl_row.argmax()),
                    complexity=int(cx_row.argmax()),
                    clarity_prob=float(cl_row[1]),
                    complexity_probs=tuple(float(v) for v in cx_row),
                )
            )
        return results

    def score_bytes(self, image_bytes: bytes) -> ScoreResult:
        return self.score_tensor(preprocess(image_bytes, self.resolution).unsqueeze(0))[0]

    def score_file(self, path: Path | str) -> ScoreResult:
        try:
            payload = Path(path).read_bytes()
        except OSError as exc:
            raise UnreadableImage(f"cannot read {path}: {exc}") from exc
        return self.score_bytes(payload)

    def score_many(self, payloads: list[bytes], batch_size: int = 32) -> list[ScoreResult]:
        results: list[ScoreResult] = []
        for start in range(0, len(payloads), batch_size):
            chunk = payloads[start : start + batch_size]
            batch = torch.stack([preprocess(p, self.resolution) for p in chunk])
            results.extend(self.score_tensor(batch))
        return results


def _split_indices(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    held = max(1, int(round(n * fraction)))
    if held >= n:
        raise ValueError(f"{n} annotations are too few for a {fraction:.0%} held-out split")
    return order[held:], order[:held]


def _check_classes(labels: list[int], task: str, where: str) -> None:
    if len(set(labels)) < 2:
        raise DegenerateLabels(f"{task} labels in the {where} set have a single class")


def _train_one(
    task: str,
    n_classes: int,
    images: torch.Tensor,
    labels: torch.Tensor,
    train_idx: list[int],
    held_idx: list[int],
    config: TrainConfig,
) -> tuple[nn.Module, float]:
    torch.manual_seed(config.seed)
    model = build_classifier(config.backbone, n_classes, config.resolution)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    shuffler = torch.Generator().manual_seed(config.seed + 1)

    model.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(train_idx), generator=shuffler).tolist()
        for start in range(0, len(order), config.batch_size):
            rows = [train_idx[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            loss = loss_fn(model(images[rows]), labels[rows])
            loss.backward()
            optimizer.step()

    model.eval()
    with torch.inference_mode():
        predictions = model(images[held_idx]).argmax(dim=1)
    accuracy = float((predictions == labels[held_idx]).float().mean())
    return model, accuracy


@dataclass(frozen=True, slots=True)
class ModelArtifacts:
    directory: Path
    metadata: dict
    metrics: dict


def _next_version(root: Path) -> str:
    existing = []
    if root.is_dir():
        for entry in root.iterdir():
            if entry.is_dir() and entry.name.startswith("v") and entry.name[1:].isdigit():
                existing.append(int(entry.name[1:]))
    return f"v{(max(existing) + 1) if existing else 1:03d}"


def train_classifiers(
    annotations: list[AnnotatedImage],
    config: TrainConfig,
    artifacts_root: Path | str,
) -> ModelArtifacts:
    """Train both classifiers and write a new artifact version directory."""
    if not annotations:
        raise DegenerateLabels("no annotations given")
    _check_classes([a.clarity for a in annotations], "clarity", "annotation")
    _check_classes([a.complexity for a in annotations], "complexity", "annotation")

    images = load_batch([a.image_path for a in annotations], config.resolution)
    train_idx, held_idx = _split_indices(
        len(annotations), config.held_out_fraction, config.seed
    )
    labels = {
        "clarity": torch.tensor([a.clarity for a in annotations]),
        "complexity": torch.tensor([a.complexity for a in annotations]),
    }
    for task in TASKS:
        _check_classes([int(labels[task][i]) for i in train_idx], task, "training")

    models: dict[str, nn.Module] = {}
    metrics = {
        "held_out": {},
        "split": {"train": len(train_idx), "held_out": len(held_idx)},
        "seed": config.seed,
    }
    for task, n_classes in TASKS.items():
        model, accuracy = _train_one(
            task, n_classes, images, labels[task], train_idx, held_idx, config
        )
        models[task] = model
        metrics["held_out"][f"{task}_accuracy"] = accuracy

    root = Path(artifacts_root)
    version = _next_version(root)
    directory = root / version
    directory.mkdir(parents=True)
    metadata = {
        "format_version": 1,
        "version": version,
        "service_version": __version__,
        "backbone": config.backbone,
        "input_resolution": config.resolution,
        "tasks": dict(TASKS),
        "train_config": config.to_dict(),
        "annotations": len(annotations),
        "torch_version": torch.__version__,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    for task in TASKS:
        torch.save(models[task].state_dict(), directory / f"{task}.pt")
    (directory / METADATA_FILE).write_text(json.dumps(metadata, indent=2), encoding="utf-8")
    (directory / METRICS_FILE).write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    return ModelArtifacts(directory=directory, metadata=metadata, metrics=metrics)


def load_artifacts(directory: Path | str) -> Classifiers:
    """Rebuild both models from a version directory; validate everything."""
    directory = Path(directory)
    metadata_path = directory / METADATA_FILE
    if not metadata_path.is_file():
        raise ArtifactLoadError(f"no {METADATA_FILE} in {directory}")
    try:
        metadata = json.loads(metadata_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactLoadError(f"cannot read {metadata_path}: {exc}") from exc

    try:
        backbone = metadata["backbone"]
        resolution = int(metadata["input_resolution"])
        tasks = metadata["tasks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactLoadError(f"metadata incomplete in {directory}: {exc}") from exc

    models: dict[str, nn.Module] = {}
    for task, n_classes in tasks.items():
        weights_path = directory / f"{task}.pt"
        if not weights_path.is_file():
            raise ArtifactLoadError(f"missing weights file {weights_path}")
        try:
            model = build_classifier(backbone, int(n_classes), resolution)
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        except Exception as exc:
            # A corrupt file can fail anywhere inside the deserializer, with
            # no bounded exception set; all of it means the same thing here.
            raise ArtifactLoadError(f"cannot load {weights_path}: {exc}") from exc
        model.eval()
        models[task] = model

    if set(models) != set(TASKS):
        raise ArtifactLoadError(f"artifact tasks {sorted(models)} != {sorted(TASKS)}")
    return Classifiers(
        clarity_model=models["clarity"],
        complexity_model=models["complexity"],
        resolution=resolution,
        metadata=metadata,
    )
