"""Caption and detection metrics: CIDEr-D reward, AUROC, accuracy.

CIDEr-D here follows the consensus-metric convention: TF-IDF n-gram vectors
(n=1..4) with counts normalized per order, per-reference min-clipped cosine,
a gaussian length penalty (sigma=6), averaged over references then orders,
scaled by 10. The plain (un-clipped, no length penalty) variant is kept
switchable. AUROC is the rank statistic with midranks for ties.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, InputError

MAX_N = 4
SIGMA = 6.0


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class IdfTable:
    """Document frequencies of n-grams over a reference corpus."""

    df: list[dict] = field(default_factory=lambda: [dict() for _ in range(MAX_N)])
    corpus_size: int = 0

    def idf(self, ngram: tuple) -> float:
        """ln(corpus size / df); an unseen n-gram counts as df=1."""
        d = self.df[len(ngram) - 1].get(ngram, 1)
        return math.log(self.corpus_size / d)


def compute_idf(reference_corpora: list[list[list[str]]]) -> IdfTable:
    """Build the IDF table: df counts images whose reference set uses the n-gram.

    ``reference_corpora[i]`` is the list of tokenized references of image i.
    """
    if not reference_corpora:
        raise InputError("cannot build an IDF table from an empty corpus")
    table = IdfTable(corpus_size=len(reference_corpora))
    for refs in reference_corpora:
        for n in range(1, MAX_N + 1):
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(ref, n).keys())
            bucket = table.df[n - 1]
            for g in seen:
                bucket[g] = bucket.get(g, 0) + 1
    return table


def _tfidf_vector(counts: Counter, idf: IdfTable) -> tuple[dict, float]:
    """(vector, norm) with TF normalized by the total n-gram count."""
    total = sum(counts.values())
    if total == 0:
        return {}, 0.0
    vec = {g: (c / total) * idf.idf(g) for g, c in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_d(candidate: list[str], references: list[list[str]], idf: IdfTable,
            sigma: float = SIGMA, variant: str = "cider-d") -> float:
    """Consensus score of one candidate against its references, in [0, 10].

    Any zero-norm vector (empty candidate, degenerate idf) zeroes its term.
    """
    if variant not in ("cider-d", "cider"):
        raise InputError(f"unknown cider variant '{variant}'")
    if not references:
        raise InputError("cider requires at least one reference")
    score_over_n = 0.0
    for n in range(1, MAX_N + 1):
        cand_vec, cand_norm = _tfidf_vector(ngram_counts(candidate, n), idf)
        ref_sum = 0.0
        for ref in references:
            ref_vec, ref_norm = _tfidf_vector(ngram_counts(ref, n), idf)
            if cand_norm == 0.0 or ref_norm == 0.0:
                continue
            if variant == "cider-d":
                dot = sum(min(v, ref_vec.get(g, 0.0)) * ref_vec.get(g, 0.0)
                          for g, v in cand_vec.items())
                delta = float(len(candidate) - len(ref))
                penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            else:
                dot = sum(v * ref_vec.get(g, 0.0) for g, v in cand_vec.items())
                penalty = 1.0
            ref_sum += (dot / (cand_norm * ref_norm)) * penalty
        score_over_n += ref_sum / len(references)
    return 10.0 * score_over_n / MAX_N


def corpus_cider_d(candidates: list[list[str]], reference_corpora: list[list[list[str]]],
                   idf: IdfTable | None = None, variant: str = "cider-d") -> float:
    """Mean per-image score; builds the IDF table from the references if absent."""
    if len(candidates) != len(reference_corpora):
        raise InputError("candidate/reference counts differ")
    if idf is None:
        idf = compute_idf(reference_corpora)
    scores = [cider_d(c, r, idf, variant=variant)
              for c, r in zip(candidates, reference_corpora)]
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    """Scored samples: parallel ids, probabilities in [0,1], binary labels."""

    ids: list[str]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.ids) == self.scores.size == self.labels.size):
            raise InputError("ids, scores, and labels must have equal lengths")
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise InputError("scores must lie in [0, 1]")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise InputError("labels must be 0 or 1")

    @classmethod
    def from_rows(cls, rows: list[tuple[str, float, int]]) -> "ScoreSet":
        return cls([r[0] for r in rows],
                   np.array([r[1] for r in rows], dtype=np.float64),
                   np.array([r[2] for r in rows], dtype=np.int64))


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties replaced by the mean rank of the tied group."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores: ScoreSet) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    pos = int(scores.labels.sum())
    neg = int(scores.labels.size - pos)
    if pos == 0 or neg == 0:
        raise EvaluationError(
            f"AUROC needs both classes, got {pos} positives and {neg} negatives")
    ranks = _midranks(scores.scores)
    rank_sum_pos = float(ranks[scores.labels == 1].sum())
    return (rank_sum_pos - pos * (pos + 1) / 2.0) / (pos * neg)


def accuracy(scores: ScoreSet, threshold: float = 0.5) -> float:
    """Fraction correct; a score equal to the threshold predicts positive."""
    if scores.labels.size == 0:
        raise EvaluationError("accuracy of an empty score set is undefined")
    predicted = (scores.scores >= threshold).astype(np.int64)
    return float((predicted == scores.labels).mean())


# ---------------------------------------------------------------------------
# prediction files (challenge-style submissions)
# ---------------------------------------------------------------------------

def write_predictions(path, rows: list[tuple[str, float, int]]) -> None:
    """Write `id,proba,label` CSV with probabilities at 6 decimal places."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("id,proba,label\n")
        for sample_id, proba, label in rows:
            f.write(f"{sample_id},{proba:.6f},{int(label)}\n")


def read_predictions(path) -> ScoreSet:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "id,proba,label":
            raise InputError(f"unexpected prediction header: {header!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise InputError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            rows.append((parts[0], float(parts[1]), int(parts[2])))
    return ScoreSet.from_rows(rows)
