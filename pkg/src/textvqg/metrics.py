"""Text-generation metrics: corpus BLEU, ROUGE-L, and exact-match METEOR.

All scorers work on pre-tokenized word sequences and map into [0, 1].
They are implemented from scratch so that scores stay reproducible and
auditable; no third-party scorer is consulted.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

ROUGE_BETA = 1.2
SLICE_BUCKETS = ("1", "2", "3", ">3")


@dataclass(frozen=True)
class EvalPair:
    """One candidate sequence with its reference sequence(s)."""

    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("EvalPair requires at least one reference")


def _ngram_counts(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def lcs_length(a, b) -> int:
    """Length of the longest common subsequence of two word sequences."""
    if not a or not b:
        return 0
    # Rolling single-row DP; O(|a|*|b|) time, O(|b|) space.
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _closest_ref_length(cand_len, references):
    # Ties between a shorter and a longer reference go to the shorter one.
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


def bleu_corpus(pairs, max_n: int = 4) -> float:
    """Corpus-level BLEU with reference-clipped n-gram precision.

    Modified precisions are pooled over the whole corpus for n = 1..max_n,
    combined by geometric mean, and multiplied by the brevity penalty
    exp(1 - r/c) when the candidate corpus is shorter than the closest
    references.  No smoothing: a zero pooled precision at any order zeroes
    the score.
    """
    if not pairs:
        raise ValueError("bleu_corpus needs at least one pair")
    clipped = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for pair in pairs:
        cand = pair.candidate
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), pair.references)
        for n in range(1, max_n + 1):
            counts = _ngram_counts(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for ref in pair.references:
                for gram, c in _ngram_counts(ref, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())
    if cand_len == 0:
        warnings.warn("empty candidate corpus; BLEU reported as 0")
        return 0.0
    if any(t == 0 or c == 0 for c, t in zip(clipped, total)):
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, total)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return min(1.0, bp * math.exp(log_precision))


def bleu_sentence(candidate, references, max_n: int = 4) -> float:
    """Sentence-level BLEU with add-one smoothing for n >= 2.

    Used only for per-sample report rows; corpus scores come from
    bleu_corpus, which is unsmoothed.
    """
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        counts = _ngram_counts(candidate, n)
        max_ref = Counter()
        for ref in references:
            for gram, c in _ngram_counts(ref, n).items():
                if c > max_ref[gram]:
                    max_ref[gram] = c
        clip = sum(min(c, max_ref[g]) for g, c in counts.items())
        tot = sum(counts.values())
        if n >= 2:
            clip, tot = clip + 1, tot + 1
        if clip == 0 or tot == 0:
            return 0.0
        log_sum += math.log(clip / tot)
    ref_len = _closest_ref_length(len(candidate), references)
    bp = 1.0 if len(candidate) > ref_len else math.exp(1.0 - ref_len / len(candidate))
    return min(1.0, bp * math.exp(log_sum / max_n))


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-score: P = LCS/|c|, R = LCS/|r|, F weighted by beta."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def _meteor_alignment(candidate, reference):
    """Exact-match unigram alignment as (matches, chunks).

    Repeatedly takes the longest still-unmatched contiguous fragment common
    to both sequences (leftmost on ties), each taken fragment counting as
    one chunk.  This maximizes matched unigrams and keeps chunks minimal
    for the short sequences handled here.
    """
    cand_free = [True] * len(candidate)
    ref_free = [True] * len(reference)
    matches = 0
    chunks = 0
    while True:
        best_len, best = 0, None
        for i in range(len(candidate)):
            for j in range(len(reference)):
                k = 0
                while (i + k < len(candidate) and j + k < len(reference)
                       and cand_free[i + k] and ref_free[j + k]
                       and candidate[i + k] == reference[j + k]):
                    k += 1
                if k > best_len:
                    best_len, best = k, (i, j)
        if best is None:
            return matches, chunks
        i, j = best
        for k in range(best_len):
            cand_free[i + k] = False
            ref_free[j + k] = False
        matches += best_len
        chunks += 1


def meteor(candidate, reference) -> float:
    """Unigram-alignment METEOR with the classic constants.

    F = 10PR / (R + 9P); fragmentation penalty 0.5 * (chunks/matches)^3;
    exact string matching only (no stemming or synonym stages).
    """
    if not candidate or not reference:
        return 0.0
    matches, chunks = _meteor_alignment(candidate, reference)
    if matches == 0:
        return 0.0
    p = matches / len(candidate)
    r = matches / len(reference)
    f = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f * (1.0 - penalty)


@dataclass
class EvalReport:
    """Corpus scores plus the per-sample data they were computed from."""

    bleu: float
    meteor: float
    rouge_l: float
    bleu_by_n: dict[str, float]
    n_pairs: int
    samples: list[dict] = field(default_factory=list)
    slices: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "meteor": self.meteor,
            "rouge_l": self.rouge_l,
            "bleu_by_n": dict(self.bleu_by_n),
            "n_pairs": self.n_pairs,
            "slices": self.slices,
            "samples": self.samples,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            bleu=data["bleu"],
            meteor=data["meteor"],
            rouge_l=data["rouge_l"],
            bleu_by_n=dict(data["bleu_by_n"]),
            n_pairs=data["n_pairs"],
            samples=list(data.get("samples", [])),
            slices=dict(data.get("slices", {})),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _bucket(count: int) -> str:
    return str(count) if count <= 3 else ">3"


def evaluate_corpus(pairs, answer_word_counts=None) -> EvalReport:
    """Score a corpus of candidate/reference pairs.

    Returns corpus BLEU-1..4 (headline = BLEU-4), mean sentence-level
    METEOR and ROUGE-L, per-sample rows, and score slices keyed by answer
    word count buckets 1 / 2 / 3 / >3 when counts are supplied.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_corpus needs at least one pair")
    if answer_word_counts is not None and len(answer_word_counts) != len(pairs):
        raise ValueError("answer_word_counts must parallel pairs")

    samples = []
    meteor_sum = 0.0
    rouge_sum = 0.0
    for pair in pairs:
        m = max(meteor(pair.candidate, ref) for ref in pair.references)
        r = max(rouge_l(pair.candidate, ref) for ref in pair.references)
        meteor_sum += m
        rouge_sum += r
        samples.append({
            "candidate": " ".join(pair.candidate),
            "references": [" ".join(ref) for ref in pair.references],
            "bleu": bleu_sentence(pair.candidate, pair.references),
            "meteor": m,
            "rouge_l": r,
            "exact_match": any(pair.candidate == ref for ref in pair.references),
        })

    bleu_by_n = {str(n): bleu_corpus(pairs, max_n=n) for n in range(1, 5)}

    slices = {}
    if answer_word_counts is not None:
        grouped: dict[str, list[int]] = {b: [] for b in SLICE_BUCKETS}
        for idx, count in enumerate(answer_word_counts):
            grouped[_bucket(count)].append(idx)
            samples[idx]["answer_word_count"] = int(count)
        for bucket in SLICE_BUCKETS:
            idxs = grouped[bucket]
            if not idxs:
                slices[bucket] = {"count": 0, "fraction": 0.0}
                continue
            sub = [pairs[i] for i in idxs]
            slices[bucket] = {
                "count": len(idxs),
                "fraction": len(idxs) / len(pairs),
                "bleu": bleu_corpus(sub),
                "meteor": sum(samples[i]["meteor"] for i in idxs) / len(idxs),
                "rouge_l": sum(samples[i]["rouge_l"] for i in idxs) / len(idxs),
            }

    return EvalReport(
        bleu=bleu_by_n["4"],
        meteor=meteor_sum / len(pairs),
        rouge_l=rouge_sum / len(pairs),
        bleu_by_n=bleu_by_n,
        n_pairs=len(pairs),
        samples=samples,
        slices=slices,
    )
