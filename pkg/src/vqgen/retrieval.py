"""Nearest-neighbor question retrieval over image feature vectors.

A query either shortcut-hits (a training image within ``min_distance``
answers alone), gathers a dynamically sized pool of up to ``k`` neighbors
within ``max_distance``, or falls back to the unconditional nearest
neighbor when nothing qualifies. The emitted question is the pool member
whose per-image consensus question agrees most with the rest of the pool.

Distances are cosine distances on the raw feature vectors. All ties are
broken by ascending distance then lexicographic image id, which keeps
queries deterministic across runs and thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import EmbeddingTable, ImageRecord, Tokens
from .errors import DataError
from .metrics import embedding_similarity, sentence_bleu_smoothed

SELECTION_METRICS = ("smoothed_bleu", "avg_embedding")


@dataclass(frozen=True)
class PoolConfig:
    """Pool size cap and the feature-space distance thresholds."""

    k: int = 30
    max_distance: float = 0.35
    min_distance: float = 0.1
    selection_metric: str = "smoothed_bleu"

    def __post_init__(self):
        if self.k < 1:
            raise DataError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.min_distance <= self.max_distance:
            raise DataError(
                f"need 0 <= min_distance <= max_distance, got "
                f"{self.min_distance} / {self.max_distance}")
        if self.selection_metric not in SELECTION_METRICS:
            raise DataError(f"unknown selection metric {self.selection_metric!r}")


@dataclass(frozen=True)
class PoolMember:
    image_id: str
    distance: float
    question: Tokens


@dataclass(frozen=True)
class CandidatePool:
    """Neighbors eligible to answer one query, sorted by ascending distance."""

    members: tuple[PoolMember, ...]
    shortcut_hit: bool = False
    fallback_used: bool = False


def cosine_distance(a, b) -> float:
    """1 - cos(a, b); zero for identical directions, two for opposite."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DataError("cosine distance undefined for zero-norm vectors")
    return 1.0 - float(np.dot(a, b)) / (norm_a * norm_b)


def one_best_index(refs: Sequence[Tokens]) -> int:
    """Index of the reference most similar to the others (smoothed BLEU).

    Each reference is scored against the remaining ones as a single
    multi-reference set; ties go to the lowest index. A single reference
    is its own consensus.
    """
    if not refs:
        raise DataError("one_best: no references")
    if len(refs) == 1:
        return 0
    best_idx = 0
    best_score = -1.0
    for i, ref in enumerate(refs):
        others = [r for j, r in enumerate(refs) if j != i]
        score = sentence_bleu_smoothed(ref, others)
        if score > best_score:
            best_idx, best_score = i, score
    return best_idx


def one_best(refs: Sequence[Tokens]) -> Tokens:
    return tuple(refs[one_best_index(refs)])


@dataclass(frozen=True)
class IndexEntry:
    image_id: str
    features: np.ndarray
    one_best: Tokens
    all_refs: tuple[Tokens, ...]


class RetrievalIndex:
    """Immutable scan index: features, per-image consensus questions."""

    def __init__(self, entries: Sequence[IndexEntry]):
        if not entries:
            raise DataError("retrieval index is empty")
        self.entries: tuple[IndexEntry, ...] = tuple(entries)
        self.dimension = int(self.entries[0].features.shape[0])
        for e in self.entries:
            if e.features.shape[0] != self.dimension:
                raise DataError(
                    f"index entry {e.image_id!r} has dimension "
                    f"{e.features.shape[0]}, expected {self.dimension}")
        self._matrix = np.stack([e.features for e in self.entries])
        self._norms = np.linalg.norm(self._matrix, axis=1)
        if np.any(self._norms == 0.0):
            raise DataError("index contains a zero-norm feature vector")

    def __len__(self) -> int:
        return len(self.entries)

    def distances(self, query) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dimension,):
            raise DataError(
                f"query dimension {query.shape} does not match index ({self.dimension},)")
        qnorm = float(np.linalg.norm(query))
        if qnorm == 0.0:
            raise DataError("query feature vector has zero norm")
        return 1.0 - (self._matrix @ query) / (self._norms * qnorm)


def build_index(records: Sequence[ImageRecord]) -> RetrievalIndex:
    """Build the index from the train-split records, precomputing one-bests."""
    train = [rec for rec in records if rec.split == "train"]
    if not train:
        raise DataError("no train-split records to index")
    entries = []
    for rec in train:
        questions = rec.questions
        entries.append(IndexEntry(
            image_id=rec.image_id,
            features=rec.features,
            one_best=questions[one_best_index(questions)],
            all_refs=questions,
        ))
    return RetrievalIndex(entries)


def query_pool(index: RetrievalIndex, query, cfg: PoolConfig) -> CandidatePool:
    """Select the candidate pool for one query feature vector.

    The single nearest neighbor answers alone when it lies within
    ``min_distance``; otherwise up to ``k`` neighbors within
    ``max_distance`` qualify, and if none do, the unconditional nearest
    neighbor is used as a fallback so a question is always available.
    """
    dists = index.distances(query)
    order = sorted(range(len(index)),
                   key=lambda i: (dists[i], index.entries[i].image_id))

    def member(i: int) -> PoolMember:
        e = index.entries[i]
        return PoolMember(e.image_id, float(dists[i]), e.one_best)

    nearest = order[0]
    if dists[nearest] <= cfg.min_distance:
        return CandidatePool(members=(member(nearest),), shortcut_hit=True)
    within = [i for i in order if dists[i] <= cfg.max_distance][:cfg.k]
    if not within:
        return CandidatePool(members=(member(nearest),), fallback_used=True)
    return CandidatePool(members=tuple(member(i) for i in within))


def retrieve_question(index: RetrievalIndex, query, cfg: PoolConfig,
                      table: EmbeddingTable | None = None,
                      cache: dict | None = None) -> tuple[Tokens, CandidatePool]:
    """Emit the pool question with the highest mean similarity to the rest.

    With ``k`` = 1 this reduces to the plain nearest-neighbor model. The
    ``avg_embedding`` selection metric needs an embedding table. ``cache``
    optionally memoizes pairwise scores across queries (keyed by member
    image-id pairs; consensus questions are fixed per index).
    """
    if cfg.selection_metric == "avg_embedding" and table is None:
        raise DataError("avg_embedding selection needs an embedding table")
    pool = query_pool(index, query, cfg)
    members = pool.members
    if len(members) == 1:
        return members[0].question, pool

    def pair_score(i: int, j: int) -> float:
        key = (members[i].image_id, members[j].image_id)
        if cache is not None and key in cache:
            return cache[key]
        if cfg.selection_metric == "smoothed_bleu":
            value = sentence_bleu_smoothed(members[i].question, [members[j].question])
        else:
            value = embedding_similarity(members[i].question, members[j].question, table)
        if cache is not None:
            cache[key] = value
        return value

    best_idx = 0
    best_score = -np.inf
    for i in range(len(members)):
        total = 0.0
        for j in range(len(members)):
            if j != i:
                total += pair_score(i, j)
        score = total / (len(members) - 1)
        if score > best_score:
            best_idx, best_score = i, score
    return members[best_idx].question, pool


@dataclass(frozen=True)
class RetrievalDiagnostics:
    """Aggregate pool behavior over a batch of queries."""

    n_queries: int
    shortcut_hits: int
    fallbacks: int
    mean_pool_size: float

    @property
    def shortcut_rate(self) -> float:
        return self.shortcut_hits / self.n_queries

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / self.n_queries


def summarize_pools(pools: Sequence[CandidatePool]) -> RetrievalDiagnostics:
    if not pools:
        raise DataError("no pools to summarize")
    return RetrievalDiagnostics(
        n_queries=len(pools),
        shortcut_hits=sum(1 for p in pools if p.shortcut_hit),
        fallbacks=sum(1 for p in pools if p.fallback_used),
        mean_pool_size=sum(len(p.members) for p in pools) / len(pools),
    )
