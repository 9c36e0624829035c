"""N-gram machinery and textual similarity metrics.

Implements corpus-level BLEU with equal weights up to 4-grams, a
sentence-level smoothed BLEU (add-one smoothing on the orders >= 2 only,
so exact matches still score 1.0), a weighted-reference BLEU variant
where every reference carries a quality weight in [-1, 1], an
exact-match approximation of METEOR, and averaged-embedding cosine
similarity.

All functions are pure: identical inputs give bit-identical outputs, and
corpus aggregation is a fixed left-to-right reduction.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import EmbeddingTable
from .errors import DataError

MAX_BLEU_ORDER = 4
MAX_NGRAM_ORDER = 6

# Exact-match METEOR parameters (published defaults of the metric family).
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

# Beyond this many memoized states the exact chunk-minimizing aligner
# falls back to a deterministic greedy alignment (same match count,
# possibly more chunks). Unreachable for question-length sentences.
_ALIGN_STATE_LIMIT = 200_000

Tokens = Sequence[str]


def extract_ngrams(seq: Tokens, n: int) -> Counter:
    """Sliding-window n-gram counts; empty when the sequence is shorter than n."""
    if not 1 <= n <= MAX_NGRAM_ORDER:
        raise ValueError(f"ngram order must be in 1..{MAX_NGRAM_ORDER}, got {n}")
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _closest_ref_length(hyp_len: int, ref_lens: Sequence[int]) -> int:
    """Reference length closest to the hypothesis length, ties to the shorter."""
    best = ref_lens[0]
    for rl in ref_lens[1:]:
        diff, best_diff = abs(rl - hyp_len), abs(best - hyp_len)
        if diff < best_diff or (diff == best_diff and rl < best):
            best = rl
    return best


def _brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    if hyp_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def _geometric_mean_score(precisions: Sequence[float], bp: float) -> float:
    if any(p <= 0.0 for p in precisions):
        return 0.0
    log_sum = 0.0
    for p in precisions:
        log_sum += math.log(p)
    return bp * math.exp(log_sum / len(precisions))


@dataclass(frozen=True)
class BleuReport:
    """Corpus BLEU with its per-order precisions and length bookkeeping."""

    score: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _check_parallel(hyps, refsets, what: str):
    if len(hyps) == 0:
        raise DataError(f"{what}: empty corpus")
    if len(hyps) != len(refsets):
        raise DataError(f"{what}: {len(hyps)} hypotheses vs {len(refsets)} reference sets")


def corpus_bleu(hyps: Sequence[Tokens], refsets: Sequence[Sequence[Tokens]]) -> BleuReport:
    """Corpus BLEU, equal weights over 1..4-grams, clipped modified precision.

    The brevity penalty compares the total hypothesis length with the sum
    of per-item reference lengths closest to each hypothesis (ties going
    to the shorter reference). A zero aggregate precision at any order
    zeroes the score. Empty hypotheses contribute zero counts but are not
    an error.
    """
    _check_parallel(hyps, refsets, "corpus_bleu")
    num = [0] * MAX_BLEU_ORDER
    den = [0] * MAX_BLEU_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hyps, refsets):
        if not refs:
            raise DataError("corpus_bleu: empty reference set")
        hyp = tuple(hyp)
        hyp_len += len(hyp)
        ref_len += _closest_ref_length(len(hyp), [len(r) for r in refs])
        for n in range(1, MAX_BLEU_ORDER + 1):
            hyp_counts = extract_ngrams(hyp, n)
            if not hyp_counts:
                continue
            max_ref: Counter = Counter()
            for ref in refs:
                for gram, count in extract_ngrams(ref, n).items():
                    if count > max_ref[gram]:
                        max_ref[gram] = count
            num[n - 1] += sum(min(c, max_ref[g]) for g, c in hyp_counts.items())
            den[n - 1] += sum(hyp_counts.values())
    precisions = tuple(num[i] / den[i] if den[i] else 0.0 for i in range(MAX_BLEU_ORDER))
    bp = _brevity_penalty(hyp_len, ref_len)
    return BleuReport(
        score=_geometric_mean_score(precisions, bp),
        precisions=precisions,  # type: ignore[arg-type]
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
    )


def sentence_bleu_smoothed(hyp: Tokens, refs: Sequence[Tokens]) -> float:
    """Sentence-level BLEU with add-one smoothing on the orders >= 2.

    The unigram precision is left unsmoothed, so the score is zero exactly
    when no unigram matches and 1.0 for a verbatim match of a reference.
    """
    if not refs:
        raise DataError("sentence_bleu_smoothed: no references")
    hyp = tuple(hyp)
    if not hyp:
        return 0.0
    log_sum = 0.0
    for n in range(1, MAX_BLEU_ORDER + 1):
        hyp_counts = extract_ngrams(hyp, n)
        max_ref: Counter = Counter()
        for ref in refs:
            for gram, count in extract_ngrams(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        matches = sum(min(c, max_ref[g]) for g, c in hyp_counts.items())
        total = sum(hyp_counts.values())
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1) / (total + 1)
        log_sum += math.log(p)
    bp = _brevity_penalty(len(hyp), _closest_ref_length(len(hyp), [len(r) for r in refs]))
    return bp * math.exp(log_sum / MAX_BLEU_ORDER)


WeightedRefs = Sequence[tuple[Tokens, float]]


def delta_bleu(hyps: Sequence[Tokens], refsets: Sequence[WeightedRefs]) -> float:
    """Corpus BLEU over references that carry quality weights in [-1, 1].

    Per order, every hypothesis n-gram earns the best weighted clipped
    credit over the references containing it, while the denominator pays
    the item's maximum reference weight per hypothesis n-gram. Aggregated
    numerators are floored at zero, and a non-positive precision at any
    order zeroes the score. With all weights 1.0 this reduces exactly to
    :func:`corpus_bleu`.

    The brevity penalty uses the closest reference length over all
    references of an item, regardless of weight.
    """
    _check_parallel(hyps, refsets, "delta_bleu")
    num = [0.0] * MAX_BLEU_ORDER
    den = [0.0] * MAX_BLEU_ORDER
    hyp_len = 0
    ref_len = 0
    for item, (hyp, refs) in enumerate(zip(hyps, refsets)):
        if not refs:
            raise DataError(f"delta_bleu: item {item} has no references")
        for ref, weight in refs:
            if not -1.0 <= weight <= 1.0:
                raise DataError(f"delta_bleu: item {item} weight {weight} outside [-1, 1]")
            if not len(ref):
                raise DataError(f"delta_bleu: item {item} has an empty reference")
        w_max = max(w for _, w in refs)
        if w_max <= 0.0:
            raise DataError(f"delta_bleu: item {item} has no positively weighted reference")
        hyp = tuple(hyp)
        hyp_len += len(hyp)
        ref_len += _closest_ref_length(len(hyp), [len(r) for r, _ in refs])
        for n in range(1, MAX_BLEU_ORDER + 1):
            hyp_counts = extract_ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_tables = [(extract_ngrams(ref, n), w) for ref, w in refs]
            for gram, count in hyp_counts.items():
                credit = None
                for table, w in ref_tables:
                    if gram in table:
                        value = w * min(count, table[gram])
                        if credit is None or value > credit:
                            credit = value
                if credit is not None:
                    num[n - 1] += credit
                den[n - 1] += w_max * count
    precisions = [max(num[i], 0.0) / den[i] if den[i] > 0.0 else 0.0
                  for i in range(MAX_BLEU_ORDER)]
    bp = _brevity_penalty(hyp_len, ref_len)
    return _geometric_mean_score(precisions, bp)


# ---------------------------------------------------------------------------
# Exact-match METEOR approximation
# ---------------------------------------------------------------------------

def _greedy_alignment(hyp: tuple, ref: tuple) -> tuple[int, int]:
    # Deterministic fallback: left-to-right, prefer continuing the current
    # chunk, otherwise take the smallest unused ref position.
    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    used: set[int] = set()
    matches = 0
    chunks = 0
    prev_j = None
    for tok in hyp:
        cands = [j for j in positions.get(tok, ()) if j not in used]
        if not cands:
            prev_j = None
            continue
        if prev_j is not None and prev_j + 1 in cands:
            j = prev_j + 1
        else:
            j = cands[0]
            chunks += 1
        used.add(j)
        matches += 1
        prev_j = j
    return matches, chunks


def _align_exact(hyp: tuple, ref: tuple) -> tuple[int, int]:
    """Maximum exact unigram matching with the minimum chunk count.

    Searches all alignments achieving the maximum number of matches and
    returns ``(matches, chunks)`` with the fewest chunks, a chunk being a
    maximal run of matched hypothesis tokens mapped to consecutive
    reference positions. Falls back to a greedy alignment past the state
    limit.
    """
    hyp_counts = Counter(hyp)
    ref_counts = Counter(ref)
    max_matches = sum(min(c, ref_counts[t]) for t, c in hyp_counts.items())
    if max_matches == 0:
        return 0, 0

    shared = set(hyp_counts) & set(ref_counts)
    cand_positions = [j for j, tok in enumerate(ref) if tok in shared]
    slot_of = {j: s for s, j in enumerate(cand_positions)}
    by_token: dict[str, list[int]] = {}
    for j in cand_positions:
        by_token.setdefault(ref[j], []).append(j)

    memo: dict[tuple[int, int, int], tuple[int, int]] = {}
    overflow = False

    def search(i: int, mask: int, prev_j: int) -> tuple[int, int]:
        # Best (matches, continuations) from hypothesis position i on;
        # prev_j = ref position matched at i-1, or -1.
        nonlocal overflow
        if overflow or i == len(hyp):
            return (0, 0)
        key = (i, mask, prev_j)
        hit = memo.get(key)
        if hit is not None:
            return hit
        if len(memo) > _ALIGN_STATE_LIMIT:
            overflow = True
            return (0, 0)
        # Leave position i unmatched.
        best = search(i + 1, mask, -1)
        for j in by_token.get(hyp[i], ()):
            bit = 1 << slot_of[j]
            if mask & bit:
                continue
            sub_m, sub_c = search(i + 1, mask | bit, j)
            cont = 1 if j == prev_j + 1 and prev_j >= 0 else 0
            cand = (sub_m + 1, sub_c + cont)
            if cand > best:
                best = cand
        memo[key] = best
        return best

    matches, continuations = search(0, 0, -1)
    if overflow or matches != max_matches:
        # matches != max_matches only via overflow mid-search
        return _greedy_alignment(hyp, ref)
    return matches, matches - continuations


def meteor_exact(hyp: Tokens, refs: Sequence[Tokens],
                 alpha: float = METEOR_ALPHA, beta: float = METEOR_BETA,
                 gamma: float = METEOR_GAMMA) -> float:
    """Exact-match harmonic-mean score with a fragmentation penalty.

    For each reference the maximum unigram exact-match alignment is found
    (ties broken to minimize the chunk count), giving precision P = m/|hyp|
    and recall R = m/|ref| combined as F = PR / (alpha P + (1-alpha) R),
    discounted by gamma * (chunks/m)^beta. The best reference wins.

    This deliberately drops the stem/synonym/paraphrase stages of the full
    metric, hence the ``_exact`` suffix.
    """
    if not refs:
        raise DataError("meteor_exact: no references")
    hyp = tuple(hyp)
    if not hyp:
        return 0.0
    best = 0.0
    for ref in refs:
        ref = tuple(ref)
        m, chunks = _align_exact(hyp, ref)
        if m == 0:
            continue
        p = m / len(hyp)
        r = m / len(ref)
        f = p * r / (alpha * p + (1.0 - alpha) * r)
        penalty = gamma * (chunks / m) ** beta
        score = f * (1.0 - penalty)
        if score > best:
            best = score
    return best


def embedding_similarity(a: Tokens, b: Tokens, table: EmbeddingTable) -> float:
    """Cosine similarity of the mean embedding vectors of two sequences.

    Tokens absent from the table are skipped (their count is available via
    :meth:`EmbeddingTable.average_vector`); a side with no covered tokens
    raises a coverage error, a zero-norm mean a data error.
    """
    mean_a, _ = table.average_vector(a)
    mean_b, _ = table.average_vector(b)
    norm_a = math.sqrt(float(np.dot(mean_a, mean_a)))
    norm_b = math.sqrt(float(np.dot(mean_b, mean_b)))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DataError("embedding_similarity: zero-norm mean vector")
    return float(np.dot(mean_a, mean_b)) / (norm_a * norm_b)
