"""Question vectorization and clustering for demonstration mining.

Seed questions are vectorized with TF-IDF and clustered per source dataset
with K-Means (k=5 by default); one question sampled per cluster forms the
per-task demonstration pool embedded in generation prompts.

Both algorithms are implemented here in full so the exact variant is pinned:
smoothed idf with L2-normalized rows, and Lloyd's iteration with k-means++
seeding. Tests hold them to hand-computed and exhaustive-search oracles.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyDocument, EmptyTask, NoVectors
from .ingest import TaskType
from .selection import SelectedSet

DEFAULT_K = 5
MAX_ITERATIONS = 300
CONVERGENCE_TOL = 1e-6
_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True, slots=True)
class TfidfModel:
    vocabulary: Mapping[str, int]
    idf: np.ndarray
    doc_vectors: np.ndarray


def tfidf_fit(questions: Sequence[str]) -> TfidfModel:
    """Fit TF-IDF over the questions and return their vectors.

    tf is the raw in-document count; idf(t) = ln((1+N)/(1+df(t))) + 1, which
    stays positive for every term; rows are L2-normalized. A question with
    no tokens cannot be represented and is rejected with its index.
    """
    token_lists = []
    for index, text in enumerate(questions):
        tokens = tokenize(text)
        if not tokens:
            raise EmptyDocument(index)
        token_lists.append(tokens)
    if not token_lists:
        raise EmptyDocument(0)

    vocabulary = {term: i for i, term in enumerate(sorted({t for doc in token_lists for t in doc}))}
    n_docs = len(token_lists)
    df = np.zeros(len(vocabulary))
    for tokens in token_lists:
        for term in set(tokens):
            df[vocabulary[term]] += 1
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0

    vectors = np.zeros((n_docs, len(vocabulary)))
    for row, tokens in enumerate(token_lists):
        for term in tokens:
            vectors[row, vocabulary[term]] += 1.0
    vectors *= idf
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors /= norms
    return TfidfModel(vocabulary=vocabulary, idf=idf, doc_vectors=vectors)


@dataclass(frozen=True, slots=True)
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignment: tuple[int, ...]
    inertia: float
    n_iterations: int
    inertia_history: tuple[float, ...]
    reduced_from: int | None = None


def _squared_distances(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, points x centroids."""
    diff = vectors[:, None, :] - centroids[None, :, :]
    return np.einsum("pkd,pkd->pk", diff, diff)


def _kmeans_plus_plus(distinct: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seed centroids over the distinct rows, D^2-weighted."""
    first = rng.integers(len(distinct))
    centroids = [distinct[first]]
    for _ in range(1, k):
        d2 = _squared_distances(distinct, np.asarray(centroids)).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            # All remaining rows coincide with chosen centroids; cannot happen
            # once k is capped at the distinct count, but guard anyway.
            probabilities = np.full(len(distinct), 1.0 / len(distinct))
        else:
            probabilities = d2 / total
        centroids.append(distinct[rng.choice(len(distinct), p=probabilities)])
    return np.asarray(centroids)


def _repair_empty_clusters(
    vectors: np.ndarray, centroids: np.ndarray, assignment: np.ndarray
) -> np.ndarray:
    """Move the globally farthest point into each empty cluster."""
    k = len(centroids)
    for cluster in range(k):
        if np.any(assignment == cluster):
            continue
        d2 = _squared_distances(vectors, centroids)
        point_d2 = d2[np.arange(len(vectors)), assignment]
        counts = np.bincount(assignment, minlength=k)
        movable = counts[assignment] > 1
        if not movable.any():
            continue
        candidates = np.where(movable)[0]
        donor = candidates[np.argmax(point_d2[candidates])]
        assignment[donor] = cluster
        centroids[cluster] = vectors[donor]
    return assignment


def kmeans(vectors: np.ndarray, k: int, seed: int) -> ClusterModel:
    """Lloyd's algorithm with k-means++ initialization.

    Runs to convergence (max centroid shift below 1e-6) or 300 iterations.
    When fewer distinct vectors than k exist, k drops to the distinct count
    and the original k is kept in `reduced_from`. Empty clusters are repaired
    by donating the point farthest from its centroid. The final assignment is
    recomputed from the final centroids, so nearest-centroid membership holds
    exactly on the returned model.
    """
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim != 2 or len(vectors) == 0:
        raise NoVectors("kmeans needs a non-empty 2D array of vectors")
    if k < 1:
        raise ValueError("k must be at least 1")

    distinct = np.unique(vectors, axis=0)
    reduced_from = None
    if len(distinct) < k:
        reduced_from = k
        k = len(distinct)

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(distinct, k, rng).copy()

    history: list[float] = []
    iterations = 0
    for iterations in range(1, MAX_ITERATIONS + 1):
        d2 = _squared_distances(vectors, centroids)
        assignment = d2.argmin(axis=1)
        assignment = _repair_empty_clusters(vectors, centroids, assignment)
        inertia = float(
            _squared_distances(vectors, centroids)[np.arange(len(vectors)), assignment].sum()
        )
        if history:
            # Lloyd's never worsens the objective; allow only float noise.
            assert inertia <= history[-1] * (1.0 + 1e-9) + 1e-12, (
                f"inertia rose from {history[-1]} to {inertia}"
            )
        history.append(inertia)

        new_centroids = centroids.copy()
        for cluster in range(k):
            members = vectors[assignment == cluster]
            if len(members):
                new_centroids[cluster] = members.mean(axis=0)
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < CONVERGENCE_TOL:
            break

    d2 = _squared_distances(vectors, centroids)
    assignment = d2.argmin(axis=1)
    assignment = _repair_empty_clusters(vectors, centroids, assignment)
    final_d2 = _squared_distances(vectors, centroids)
    inertia = float(final_d2[np.arange(len(vectors)), assignment].sum())

    return ClusterModel(
        k=k,
        centroids=centroids,
        assignment=tuple(int(a) for a in assignment),
        inertia=inertia,
        n_iterations=iterations,
        inertia_history=tuple(history),
        reduced_from=reduced_from,
    )


@dataclass(frozen=True, slots=True)
class Demo:
    dataset_id: str
    cluster: int
    question: str


@dataclass(frozen=True, slots=True)
class DemoPool:
    task: TaskType
    demos: tuple[Demo, ...]
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "demos": [
                {"dataset_id": d.dataset_id, "cluster": d.cluster, "question": d.question}
                for d in self.demos
            ],
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "DemoPool":
        return cls(
            task=TaskType(raw["task"]),
            demos=tuple(
                Demo(dataset_id=d["dataset_id"], cluster=d["cluster"], question=d["question"])
                for d in raw["demos"]
            ),
            notes=tuple(raw.get("notes", ())),
        )


def cluster_questions(
    selected: SelectedSet, task: TaskType, k: int = DEFAULT_K, seed: int = 0
) -> dict[str, tuple[ClusterModel, list[str], list[str]]]:
    """Cluster each source dataset's questions for one task.

    Returns dataset_id -> (model, questions clustered, record ids aligned
    with the model's assignment). Questions with no tokens are skipped;
    their record ids are simply absent from the output.
    """
    by_task = selected.by_task()
    if task not in by_task or not by_task[task]:
        raise EmptyTask(f"no selected records of task {task.value}")

    by_dataset: dict[str, list] = {}
    for record in by_task[task]:
        by_dataset.setdefault(record.dataset_id, []).append(record)

    out: dict[str, tuple[ClusterModel, list[str], list[str]]] = {}
    for d_index, dataset_id in enumerate(sorted(by_dataset)):
        records = [r for r in by_dataset[dataset_id] if tokenize(r.question)]
        if not records:
            continue
        questions = [r.question for r in records]
        model = tfidf_fit(questions)
        cluster_seed = np.random.SeedSequence(seed, spawn_key=(d_index,))
        clusters = kmeans(model.doc_vectors, k, np.random.default_rng(cluster_seed).integers(2**32))
        out[dataset_id] = (clusters, questions, [r.record_id for r in records])
    return out


def build_demo_pool(
    selected: SelectedSet, task: TaskType, seed: int = 0, k: int = DEFAULT_K
) -> DemoPool:
    """One uniformly drawn question per cluster per source dataset."""
    clustered = cluster_questions(selected, task, k=k, seed=seed)
    demos: list[Demo] = []
    notes: list[str] = []
    for d_index, dataset_id in enumerate(sorted(clustered)):
        model, questions, _ = clustered[dataset_id]
        if model.reduced_from is not None:
            notes.append(
                f"{dataset_id}: k reduced {model.reduced_from} -> {model.k} "
                f"(only {model.k} distinct question vectors)"
            )
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(d_index, 1)))
        for cluster in range(model.k):
            members = [q for q, a in zip(questions, model.assignment) if a == cluster]
            demos.append(
                Demo(
                    dataset_id=dataset_id,
                    cluster=cluster,
                    question=members[int(rng.integers(len(members)))],
                )
            )
    return DemoPool(task=task, demos=tuple(demos), notes=tuple(notes))
