"""Shared fixtures: one trained model pair reused across the suite.

Training is the expensive step (a few seconds), so the demo corpus, the
trained artifacts, the loaded classifiers, and the HTTP test client are
all session-scoped. Tests that need to train with different settings use
the much smaller `small_corpus`.
"""

from dataclasses import dataclass
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from classifier_service.data import AnnotatedImage, generate_demo_corpus, load_annotations
from classifier_service.service import create_app
from classifier_service.training import (
    Classifiers,
    ModelArtifacts,
    TrainConfig,
    load_artifacts,
    train_classifiers,
)

BACKBONE = "vit-tiny-patch8-32"


@dataclass(frozen=True)
class DemoCorpus:
    annotations_path: Path
    image_root: Path
    rows: list[AnnotatedImage]

    def image_path(self, index: int) -> Path:
        return self.rows[index].image_path


def build_demo_corpus(root: Path, n: int, seed: int) -> DemoCorpus:
    annotations_path, image_root = generate_demo_corpus(root, n=n, seed=seed)
    rows = load_annotations(annotations_path, image_root)
    return DemoCorpus(annotations_path=annotations_path, image_root=image_root, rows=rows)


@pytest.fixture(scope="session")
def demo_corpus(tmp_path_factory) -> DemoCorpus:
    return build_demo_corpus(tmp_path_factory.mktemp("demo-corpus"), n=480, seed=0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> DemoCorpus:
    return build_demo_corpus(tmp_path_factory.mktemp("small-corpus"), n=48, seed=1)


@pytest.fixture(scope="session")
def train_config() -> TrainConfig:
    # Defaults for learning rate and epochs; small backbone for test speed.
    return TrainConfig(backbone=BACKBONE, batch_size=16, seed=0)


@pytest.fixture(scope="session")
def small_config() -> TrainConfig:
    return TrainConfig(backbone=BACKBONE, epochs=2, batch_size=8, seed=0)


@pytest.fixture(scope="session")
def trained(demo_corpus, train_config, tmp_path_factory) -> ModelArtifacts:
    root = tmp_path_factory.mktemp("artifacts")
    return train_classifiers(demo_corpus.rows, train_config, root)


@pytest.fixture(scope="session")
def classifiers(trained) -> Classifiers:
    return load_artifacts(trained.directory)


@pytest.fixture(scope="session")
def client(classifiers) -> TestClient:
    return TestClient(create_app(classifiers))
