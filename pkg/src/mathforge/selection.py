"""Clear-image filtering and stratified seed selection.

Images scored clarity 0 are dropped; the remainder is sampled to a budget
with per-complexity-stratum quotas following a configurable ratio
(default 2:3:4:1), uniformly across source datasets within each stratum.
All integer splits use largest-remainder (Hamilton) apportionment over
exact fractions, so plans are deterministic and sum exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigInvalid, MissingScore, PlanMismatch
from .ingest import Corpus, SourceRecord
from .scoring import ImageScores, ScoreTable
from .storage import read_jsonl, sha256_file, write_json_atomic, write_jsonl_atomic

N_STRATA = 4
DEFAULT_RATIO = (2, 3, 4, 1)
DEFAULT_BUDGET = 40000


@dataclass(frozen=True, slots=True)
class SelectionConfig:
    ratio: tuple[int, int, int, int] = DEFAULT_RATIO
    budget: int = DEFAULT_BUDGET
    take_all_top_stratum: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.ratio) != N_STRATA:
            raise ConfigInvalid(f"ratio needs {N_STRATA} entries, got {len(self.ratio)}")
        if any(r < 0 for r in self.ratio):
            raise ConfigInvalid("ratio entries must be non-negative")
        if not any(self.ratio):
            raise ConfigInvalid("ratio must not be all zero")
        if self.budget < 1:
            raise ConfigInvalid("budget must be at least 1")


@dataclass(frozen=True, slots=True)
class SelectionPlan:
    """Per-dataset, per-stratum quotas plus the availability they were cut from."""

    quota: Mapping[str, tuple[int, int, int, int]]
    stratum_totals: tuple[int, int, int, int]
    availability: Mapping[str, tuple[int, int, int, int]]
    shortfall_log: tuple[str, ...]
    config: SelectionConfig

    def total(self) -> int:
        return sum(self.stratum_totals)

    def to_dict(self) -> dict:
        return {
            "quota": {d: list(q) for d, q in sorted(self.quota.items())},
            "stratum_totals": list(self.stratum_totals),
            "availability": {d: list(a) for d, a in sorted(self.availability.items())},
            "shortfall_log": list(self.shortfall_log),
            "config": {
                "ratio": list(self.config.ratio),
                "budget": self.config.budget,
                "take_all_top_stratum": self.config.take_all_top_stratum,
                "seed": self.config.seed,
            },
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SelectionPlan":
        cfg = raw["config"]
        return cls(
            quota={d: tuple(q) for d, q in raw["quota"].items()},
            stratum_totals=tuple(raw["stratum_totals"]),
            availability={d: tuple(a) for d, a in raw["availability"].items()},
            shortfall_log=tuple(raw["shortfall_log"]),
            config=SelectionConfig(
                ratio=tuple(cfg["ratio"]),
                budget=cfg["budget"],
                take_all_top_stratum=cfg["take_all_top_stratum"],
                seed=cfg["seed"],
            ),
        )


def hamilton(total: int, weights: Sequence[Fraction | int], tie_order: Sequence[int] | None = None) -> list[int]:
    """Largest-remainder apportionment of `total` units over `weights`.

    Floors the exact proportional shares, then hands the leftover units to
    the largest fractional remainders; remainder ties go to the smallest
    tie_order key (positional by default). Exact Fraction arithmetic keeps
    the result scale-equivariant in the weights.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    weight_sum = sum(Fraction(w) for w in weights)
    if weight_sum <= 0:
        raise ValueError("weights must sum to a positive value")
    order = tie_order if tie_order is not None else range(len(weights))
    shares = [Fraction(total) * Fraction(w) / weight_sum for w in weights]
    floors = [int(s) for s in shares]
    leftover = total - sum(floors)
    remainders = sorted(
        range(len(weights)),
        key=lambda i: (-(shares[i] - floors[i]), order[i]),
    )
    for i in remainders[:leftover]:
        floors[i] += 1
    return floors


def apportion_capped(
    total: int,
    weights: Sequence[int],
    caps: Sequence[int],
    shortfall_log: list[str] | None = None,
    label: str = "stratum",
) -> list[int]:
    """Hamilton apportionment under per-entry capacity caps, to fixpoint.

    Each round apportions the outstanding units over the still-unsaturated
    positive-weight entries, clips to capacity, and repeats with the
    overflow. If every weighted entry saturates with units left, the rest
    spills to zero-weight entries with spare room (capacity-weighted), so
    the result always sums to min(total, sum(caps)).
    """
    n = len(weights)
    alloc = [0] * n
    remaining = min(total, sum(caps))
    if remaining < total and shortfall_log is not None:
        shortfall_log.append(
            f"budget {total} exceeds total availability {sum(caps)}; taking everything"
        )
    active = [i for i in range(n) if weights[i] > 0 and caps[i] > alloc[i]]
    while remaining > 0 and active:
        shares = hamilton(remaining, [weights[i] for i in active], tie_order=active)
        overflow = 0
        for pos, i in enumerate(active):
            granted = min(shares[pos], caps[i] - alloc[i])
            alloc[i] += granted
            overflow += shares[pos] - granted
        remaining = overflow
        next_active = [i for i in active if caps[i] > alloc[i]]
        if next_active == active and remaining > 0:
            break
        active = next_active
    if remaining > 0:
        spare = [i for i in range(n) if caps[i] > alloc[i]]
        while remaining > 0 and spare:
            if shortfall_log is not None:
                shortfall_log.append(
                    f"{label} spillover: {remaining} units moved to zero-weight entries"
                )
                shortfall_log = None  # log the spill once
            shares = hamilton(remaining, [caps[i] - alloc[i] for i in spare], tie_order=spare)
            overflow = 0
            for pos, i in enumerate(spare):
                granted = min(shares[pos], caps[i] - alloc[i])
                alloc[i] += granted
                overflow += shares[pos] - granted
            remaining = overflow
            spare = [i for i in spare if caps[i] > alloc[i]]
    return alloc


class ScoreResolver:
    """Find a record's score row by path, falling back to content hash.

    The hash fallback keeps score tables valid across image renames; file
    hashes are computed lazily and memoized per ref.
    """

    def __init__(self, corpus: Corpus, scores: ScoreTable) -> None:
        self._corpus = corpus
        self._scores = scores
        self._hashes: dict[str, str | None] = {}

    def _hash(self, image_ref: str) -> str | None:
        if image_ref not in self._hashes:
            path = self._corpus.image_root / image_ref
            self._hashes[image_ref] = sha256_file(path) if path.is_file() else None
        return self._hashes[image_ref]

    def for_record(self, record: SourceRecord) -> ImageScores:
        row = self._scores.lookup(record.image_ref)
        if row is None:
            row = self._scores.lookup(record.image_ref, self._hash(record.image_ref))
        if row is None:
            raise MissingScore(f"no score for image {record.image_ref!r}")
        return row


def filter_clear(corpus: Corpus, scores: ScoreTable) -> Corpus:
    """Keep exactly the records whose image was scored clarity 1."""
    resolver = ScoreResolver(corpus, scores)
    kept = [r for r in corpus.records if resolver.for_record(r).clarity == 1]
    return Corpus(records=tuple(kept), image_root=corpus.image_root)


def compute_availability(corpus: Corpus, scores: ScoreTable) -> dict[str, tuple[int, int, int, int]]:
    """Count clear records per (dataset, complexity stratum)."""
    resolver = ScoreResolver(corpus, scores)
    counts: dict[str, list[int]] = {}
    for record in corpus.records:
        row = resolver.for_record(record)
        if row.clarity != 1:
            continue
        counts.setdefault(record.dataset_id, [0] * N_STRATA)[row.complexity] += 1
    return {d: tuple(c) for d, c in counts.items()}


def compute_quotas(
    availability: Mapping[str, Sequence[int]],
    config: SelectionConfig,
) -> SelectionPlan:
    """Split the budget into per-dataset, per-stratum quotas.

    The top stratum is taken whole by default (capped at the budget); the
    rest of the budget goes to strata 0-2 in ratio proportion. Within each
    stratum, dataset quotas follow dataset availability. Every split uses
    capped Hamilton apportionment, so quotas never exceed availability and
    the plan sums to min(budget, total availability).
    """
    for dataset_id, cells in availability.items():
        if len(cells) != N_STRATA or any(c < 0 for c in cells):
            raise ConfigInvalid(f"availability for {dataset_id!r} must be 4 non-negative counts")

    shortfalls: list[str] = []
    stratum_avail = [
        sum(cells[s] for cells in availability.values()) for s in range(N_STRATA)
    ]
    total_avail = sum(stratum_avail)
    effective = min(config.budget, total_avail)
    if config.budget > total_avail:
        shortfalls.append(
            f"budget {config.budget} exceeds total availability {total_avail}; taking everything"
        )

    if config.take_all_top_stratum:
        top = min(stratum_avail[3], effective)
        lower = apportion_capped(
            effective - top,
            list(config.ratio[:3]) + [0],
            stratum_avail[:3] + [0],
            shortfall_log=shortfalls,
        )
        stratum_quota = lower[:3] + [top]
    else:
        stratum_quota = apportion_capped(
            effective, list(config.ratio), stratum_avail, shortfall_log=shortfalls
        )
    assert sum(stratum_quota) == effective

    dataset_ids = sorted(availability)
    quota: dict[str, list[int]] = {d: [0] * N_STRATA for d in dataset_ids}
    for s in range(N_STRATA):
        cell_avail = [availability[d][s] for d in dataset_ids]
        if stratum_quota[s] == 0 or sum(cell_avail) == 0:
            continue
        split = hamilton(stratum_quota[s], cell_avail)
        for d, q in zip(dataset_ids, split):
            quota[d][s] = q

    return SelectionPlan(
        quota={d: tuple(q) for d, q in quota.items()},
        stratum_totals=tuple(stratum_quota),
        availability={d: tuple(a) for d, a in availability.items()},
        shortfall_log=tuple(shortfalls),
        config=config,
    )


@dataclass(frozen=True, slots=True)
class SelectedSet:
    """Seed records retained by sampling, with each record's stratum."""

    records: tuple[SourceRecord, ...]
    complexity: Mapping[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def by_task(self) -> dict:
        groups: dict = {}
        for record in self.records:
            groups.setdefault(record.task, []).append(record)
        return groups

    def to_rows(self) -> list[dict]:
        rows = []
        for record in self.records:
            row = record.to_dict()
            row["complexity"] = self.complexity[record.record_id]
            rows.append(row)
        return rows

    @classmethod
    def from_rows(cls, rows) -> "SelectedSet":
        records = []
        complexity = {}
        for row in rows:
            stratum = row.pop("complexity")
            record = SourceRecord.from_dict(row)
            records.append(record)
            complexity[record.record_id] = stratum
        return cls(records=tuple(records), complexity=complexity)


def write_selected(selected: SelectedSet, path) -> None:
    write_jsonl_atomic(path, selected.to_rows())


def read_selected(path) -> SelectedSet:
    return SelectedSet.from_rows(list(read_jsonl(path)))


def write_plan(plan: SelectionPlan, path) -> None:
    write_json_atomic(path, plan.to_dict())


def stratified_sample(
    corpus: Corpus,
    scores: ScoreTable,
    plan: SelectionPlan,
    seed: int,
) -> SelectedSet:
    """Draw each cell's quota uniformly without replacement.

    Cell pools are sorted by record_id before drawing and each cell gets its
    own child RNG stream, so the draw depends only on (cell contents, seed),
    not on input order or on other cells.
    """
    current = compute_availability(corpus, scores)
    for dataset_id, quotas in plan.quota.items():
        have = current.get(dataset_id, (0,) * N_STRATA)
        for s in range(N_STRATA):
            if quotas[s] > have[s]:
                raise PlanMismatch(
                    f"dataset {dataset_id!r} stratum {s}: quota {quotas[s]} "
                    f"exceeds current availability {have[s]}"
                )

    pools: dict[tuple[str, int], list[SourceRecord]] = {}
    strata: dict[str, int] = {}
    resolver = ScoreResolver(corpus, scores)
    for record in corpus.records:
        row = resolver.for_record(record)
        if row.clarity != 1:
            continue
        pools.setdefault((record.dataset_id, row.complexity), []).append(record)
        strata[record.record_id] = row.complexity

    picked: list[SourceRecord] = []
    dataset_ids = sorted(plan.quota)
    for d_index, dataset_id in enumerate(dataset_ids):
        for s in range(N_STRATA):
            want = plan.quota[dataset_id][s]
            if want == 0:
                continue
            pool = sorted(pools.get((dataset_id, s), []), key=lambda r: r.record_id)
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(d_index, s)))
            chosen = rng.choice(len(pool), size=want, replace=False)
            picked.extend(pool[i] for i in chosen)

    picked.sort(key=lambda r: r.record_id)
    return SelectedSet(
        records=tuple(picked),
        complexity={r.record_id: strata[r.record_id] for r in picked},
    )
