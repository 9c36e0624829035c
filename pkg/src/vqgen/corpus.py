"""Corpus data model: tokenization, vocabulary, dataset and embedding I/O.

All types here are immutable after construction and safe to share across
concurrent readers.

Dataset files are UTF-8 JSON lines, one image record per line:

    {"image_id": "img00042",
     "source": "coco" | "flickr" | "bing" | "custom",
     "features": [0.1, ...]  or  "features_ref": "<id in companion file>",
     "questions": ["was anyone hurt ?", ...],          # 1..5 strings
     "ratings": [[3, 3, 2], ...],                      # optional, 3 per question
     "split": "train" | "val" | "test"}                # optional

A companion feature file uses the same line format with only ``image_id``
and ``features``. Embedding files are plain text, one token followed by
its vector components per line, space separated.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CoverageError, DataError

logger = logging.getLogger(__name__)

Tokens = tuple[str, ...]

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2
SPECIALS = (BOS, EOS, UNK)

SOURCES = ("coco", "flickr", "bing", "custom")
SPLITS = ("train", "val", "test", "unassigned")

DEFAULT_VOCAB_THRESHOLD = 3
DEFAULT_FEATURE_DIM = 4096

# Weight table for turning a majority rating into a reference weight.
DEFAULT_RATING_WEIGHTS: dict[int, float] = {1: -1.0, 2: 0.0, 3: 1.0}

_PUNCT = set(".,?!'\":;()")


def tokenize(text: str) -> Tokens:
    """Lowercase ``text`` and split it into tokens.

    Whitespace runs separate tokens; the punctuation characters
    ``. , ? ! ' " : ; ( )`` always become standalone tokens, so
    ``"don't stop"`` yields ``(don, ', t, stop)``.

    Raises:
        DataError: if the input is blank or whitespace-only.
    """
    out: list[str] = []
    for chunk in text.lower().split():
        word: list[str] = []
        for ch in chunk:
            if ch in _PUNCT:
                if word:
                    out.append("".join(word))
                    word = []
                out.append(ch)
            else:
                word.append(ch)
        if word:
            out.append("".join(word))
    if not out:
        raise DataError("cannot tokenize blank text")
    return tuple(out)


def majority_rating(ratings: Sequence[int]) -> int:
    """Majority of three 1-3 ratings; three distinct values give the median.

    Both rules collapse to the middle element of the sorted triple, which
    makes the result invariant under permutation of the raters.
    """
    if len(ratings) != 3 or any(r not in (1, 2, 3) for r in ratings):
        raise DataError(f"ratings must be three integers in 1..3, got {ratings!r}")
    return sorted(ratings)[1]


def rating_to_weight(rating: int, table: Mapping[int, float] | None = None) -> float:
    """Map a majority rating to a reference weight in [-1, 1]."""
    table = DEFAULT_RATING_WEIGHTS if table is None else table
    try:
        weight = float(table[rating])
    except KeyError:
        raise DataError(f"no weight configured for rating {rating!r}") from None
    if not -1.0 <= weight <= 1.0:
        raise DataError(f"weight {weight} for rating {rating} outside [-1, 1]")
    return weight


def as_feature_vector(values: Iterable[float], context: str = "") -> np.ndarray:
    """Validate and freeze a dense image feature vector.

    Entries must be finite and the norm non-zero (cosine distance needs
    it). The returned array is read-only.
    """
    where = f" ({context})" if context else ""
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"feature vector must be a non-empty 1-d array{where}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"feature vector has non-finite entries{where}")
    if not np.any(arr):
        raise DataError(f"feature vector has zero norm{where}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RatedReference:
    """One reference question, optionally with its three human ratings."""

    question: Tokens
    raw_ratings: tuple[int, int, int] | None = None
    majority: int | None = None
    weight: float | None = None

    @classmethod
    def build(cls, question: Sequence[str],
              raw_ratings: Sequence[int] | None = None,
              weight_table: Mapping[int, float] | None = None) -> "RatedReference":
        question = tuple(question)
        if not question:
            raise DataError("reference question is empty")
        if raw_ratings is None:
            return cls(question)
        maj = majority_rating(raw_ratings)
        return cls(question, tuple(raw_ratings), maj, rating_to_weight(maj, weight_table))


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One image: id, feature vector, rated reference questions, split tag."""

    image_id: str
    source: str
    features: np.ndarray
    references: tuple[RatedReference, ...]
    split: str = "unassigned"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DataError(f"unknown source {self.source!r} (expected one of {SOURCES})")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r} (expected one of {SPLITS})")
        if not self.references:
            raise DataError(f"record {self.image_id!r} has no references")

    @property
    def questions(self) -> tuple[Tokens, ...]:
        return tuple(ref.question for ref in self.references)


class Vocabulary:
    """Token-id bijection over training questions, with a count threshold.

    Ids are contiguous: ``<s>`` = 0, ``</s>`` = 1, ``<unk>`` = 2, then every
    token seen at least ``threshold`` times, ordered by descending count
    with alphabetical tie-breaks. Tokens below the threshold stay out of
    the map and encode to ``<unk>``.
    """

    def __init__(self, counts: Mapping[str, int], threshold: int = DEFAULT_VOCAB_THRESHOLD):
        if threshold < 1:
            raise DataError(f"threshold must be >= 1, got {threshold}")
        self.threshold = int(threshold)
        self.counts: dict[str, int] = dict(counts)
        kept = sorted(
            (t for t, c in self.counts.items() if c >= threshold and t not in SPECIALS),
            key=lambda t: (-self.counts[t], t),
        )
        self.id_to_token: tuple[str, ...] = (BOS, EOS, UNK, *kept)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def from_sequences(cls, sequences: Iterable[Sequence[str]],
                       threshold: int = DEFAULT_VOCAB_THRESHOLD) -> "Vocabulary":
        counts: Counter[str] = Counter()
        empty = True
        for seq in sequences:
            empty = False
            counts.update(seq)
        if empty:
            raise DataError("cannot build a vocabulary from no sequences")
        return cls(counts, threshold)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "counts": self.counts}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocabulary":
        return cls(data["counts"], data["threshold"])


def build_vocabulary(records: Sequence[ImageRecord],
                     threshold: int = DEFAULT_VOCAB_THRESHOLD) -> Vocabulary:
    """Build the vocabulary from the reference questions of train-split records."""
    train = [rec for rec in records if rec.split == "train"]
    if not train:
        raise DataError("no train-split records to build a vocabulary from")
    return Vocabulary.from_sequences(
        (ref.question for rec in train for ref in rec.references), threshold)


def encode(seq: Sequence[str], vocab: Vocabulary, add_sentinels: bool = False) -> list[int]:
    """Map tokens to ids, sending out-of-vocabulary tokens to ``<unk>``.

    With ``add_sentinels`` the result is wrapped as ``<s> ... </s>``.
    """
    ids = [vocab.id(t) for t in seq]
    if add_sentinels:
        return [BOS_ID, *ids, EOS_ID]
    return ids


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def _line_error(path, lineno: int, message: str) -> DataError:
    return DataError(f"{path}:{lineno}: {message}")


def _load_feature_file(path) -> dict[str, list]:
    table: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _line_error(path, lineno, f"invalid JSON: {exc}") from None
            if "image_id" not in obj or "features" not in obj:
                raise _line_error(path, lineno, "feature line needs image_id and features")
            if obj["image_id"] in table:
                raise _line_error(path, lineno, f"duplicate image_id {obj['image_id']!r}")
            table[obj["image_id"]] = obj["features"]
    return table


def load_dataset(path, features_path=None,
                 weight_table: Mapping[int, float] | None = None) -> list[ImageRecord]:
    """Parse a line-delimited dataset file into validated image records.

    Every malformed line raises a :class:`DataError` naming the line.
    Feature dimensions must be uniform across the dataset; majority
    ratings and weights are derived whenever raw ratings are present.
    """
    feature_table = _load_feature_file(features_path) if features_path else None
    records: list[ImageRecord] = []
    seen: set[str] = set()
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _line_error(path, lineno, f"invalid JSON: {exc}") from None
            try:
                record = _parse_record(obj, feature_table, weight_table)
            except DataError as exc:
                raise _line_error(path, lineno, str(exc)) from None
            if record.image_id in seen:
                raise _line_error(path, lineno, f"duplicate image_id {record.image_id!r}")
            seen.add(record.image_id)
            if dim is None:
                dim = record.features.shape[0]
            elif record.features.shape[0] != dim:
                raise _line_error(
                    path, lineno,
                    f"feature dimension {record.features.shape[0]} != {dim} seen earlier")
            records.append(record)
    if not records:
        raise DataError(f"{path}: dataset file contains no records")
    return records


def _parse_record(obj: Mapping, feature_table, weight_table) -> ImageRecord:
    for key in ("image_id", "source", "questions"):
        if key not in obj:
            raise DataError(f"missing field {key!r}")
    image_id = obj["image_id"]
    if not isinstance(image_id, str) or not image_id:
        raise DataError("image_id must be a non-empty string")

    if "features" in obj:
        features = obj["features"]
    elif "features_ref" in obj:
        if feature_table is None:
            raise DataError("features_ref used but no companion feature file given")
        key = obj["features_ref"]
        if key not in feature_table:
            raise DataError(f"features_ref {key!r} not found in companion file")
        features = feature_table[key]
    else:
        raise DataError("record needs either features or features_ref")

    questions = obj["questions"]
    if (not isinstance(questions, list) or not 1 <= len(questions) <= 5
            or not all(isinstance(q, str) for q in questions)):
        raise DataError("questions must be a list of 1..5 strings")

    ratings = obj.get("ratings")
    if ratings is not None:
        if not isinstance(ratings, list) or len(ratings) != len(questions):
            raise DataError("ratings must parallel questions")
        for entry in ratings:
            if not isinstance(entry, list) or len(entry) != 3:
                raise DataError(f"each rating entry needs exactly 3 values, got {entry!r}")

    references = tuple(
        RatedReference.build(tokenize(q), ratings[i] if ratings else None, weight_table)
        for i, q in enumerate(questions))

    return ImageRecord(
        image_id=image_id,
        source=obj["source"],
        features=as_feature_vector(features, context=image_id),
        references=references,
        split=obj.get("split", "unassigned"),
    )


def save_dataset(records: Sequence[ImageRecord], path) -> None:
    """Write records as JSON lines; questions are stored as joined tokens."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj: dict = {
                "image_id": rec.image_id,
                "source": rec.source,
                "features": [float(v) for v in rec.features],
                "questions": [" ".join(ref.question) for ref in rec.references],
            }
            if all(ref.raw_ratings is not None for ref in rec.references):
                obj["ratings"] = [list(ref.raw_ratings) for ref in rec.references]
            if rec.split != "unassigned":
                obj["split"] = rec.split
            fh.write(json.dumps(obj) + "\n")


def split_dataset(records: Sequence[ImageRecord], seed: int) -> list[ImageRecord]:
    """Assign 50/25/25 train/val/test tags by a seed-deterministic shuffle.

    Bucket sizes are ``(floor(n/2), floor(n/4), rest)``. Records are
    returned in their original order with new split tags.
    """
    n = len(records)
    if n < 4:
        raise DataError(f"need at least 4 records to split, got {n}")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_train, n_val = n // 2, n // 4
    out: list[ImageRecord | None] = [None] * n
    for pos, idx in enumerate(order):
        if pos < n_train:
            tag = "train"
        elif pos < n_train + n_val:
            tag = "val"
        else:
            tag = "test"
        out[idx] = replace(records[idx], split=tag)
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Word embeddings
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EmbeddingTable:
    """Token to dense-vector map with a uniform declared dimension."""

    dimension: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    n_duplicates: int = 0

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def average_vector(self, tokens: Sequence[str]) -> tuple[np.ndarray, int]:
        """Mean of the vectors of covered tokens, plus the miss count.

        Raises:
            CoverageError: if no token of the sequence is in the table.
        """
        hits = [self.vectors[t] for t in tokens if t in self.vectors]
        misses = len(tokens) - len(hits)
        if not hits:
            raise CoverageError(f"none of {len(tokens)} tokens covered by embedding table")
        return np.mean(hits, axis=0), misses


def load_embedding_table(path) -> EmbeddingTable:
    """Read a plain-text embedding file (``token v1 v2 ... vd`` per line).

    The dimension is inferred from the first line and enforced afterwards.
    Duplicate tokens overwrite earlier entries; the table records how many
    and a warning is logged.
    """
    vectors: dict[str, np.ndarray] = {}
    dimension: int | None = None
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, raw = parts[0], parts[1:]
            if not raw:
                raise _line_error(path, lineno, f"token {token!r} has no vector")
            try:
                vec = np.array([float(v) for v in raw], dtype=np.float64)
            except ValueError:
                raise _line_error(path, lineno, "non-numeric vector component") from None
            if dimension is None:
                dimension = vec.size
            elif vec.size != dimension:
                raise _line_error(
                    path, lineno, f"vector has {vec.size} components, expected {dimension}")
            if token in vectors:
                duplicates += 1
            vec.setflags(write=False)
            vectors[token] = vec
    if dimension is None:
        raise DataError(f"{path}: embedding file is empty")
    if duplicates:
        logger.warning("%s: %d duplicate tokens, last occurrence wins", path, duplicates)
    return EmbeddingTable(dimension=dimension, vectors=vectors, n_duplicates=duplicates)


def load_lexicon(path) -> frozenset[str]:
    """Read a one-token-per-line lexicon file (abstract terms, function words)."""
    with open(path, encoding="utf-8") as fh:
        tokens = frozenset(line.strip().lower() for line in fh if line.strip())
    if not tokens:
        raise DataError(f"{path}: lexicon file is empty")
    return tokens
