"""WordPiece tokenization, vocabulary construction, and paraphrase augmentation.

The vocabulary builder is a greedy frequency merger over character n-grams
(continuations carry the "##" prefix). Tokenization is total: any word that
cannot be pieced maps to [UNK]. The paraphraser stands in for
back-translation: a seeded, label-preserving text diversifier with the same
interface a neural paraphraser would plug into.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

from .data import MemeSample
from .errors import InputError
from .numerics.rng import STREAM_AUGMENT, RngState

PAD, UNK, CLS, SEP, BOS, EOS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"
RESERVED = [PAD, UNK, CLS, SEP, BOS, EOS]
PAD_ID, UNK_ID, CLS_ID, SEP_ID, BOS_ID, EOS_ID = range(6)

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def normalize(text: str) -> str:
    """Lowercase, split punctuation into standalone words, collapse spaces."""
    return " ".join(_WORD_RE.findall(text.lower()))


class Vocab:
    """Bijective token<->id table; reserved tokens occupy ids 0..5."""

    def __init__(self, tokens: list[str]):
        if tokens[:len(RESERVED)] != RESERVED:
            raise InputError(f"vocab must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            dupes = sorted({t for t in tokens if tokens.count(t) > 1})
            raise InputError(f"vocab has duplicate tokens: {dupes[:5]}")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id[token]

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise IndexError(f"token id {token_id} out of range for vocab of {len(self)}")
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for t in self.id_to_token:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(corpus: list[str], target_size: int,
                min_char_coverage: float = 1.0) -> Vocab:
    """Greedy frequency-based subword merges up to ``target_size`` entries.

    Every covered character gets both its word-initial and "##" continuation
    form, which makes tokenization of covered text total. Deterministic
    given the corpus order (ties break lexicographically).
    """
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    words: dict[str, int] = {}
    for line in corpus:
        for w in normalize(line).split():
            words[w] = words.get(w, 0) + 1

    char_freq: dict[str, int] = {}
    for w, c in words.items():
        for ch in w:
            char_freq[ch] = char_freq.get(ch, 0) + c
    total_chars = sum(char_freq.values())
    ranked = sorted(char_freq.items(), key=lambda kv: (-kv[1], kv[0]))
    covered, mass = [], 0
    for ch, cnt in ranked:
        if min_char_coverage < 1.0 and mass / total_chars >= min_char_coverage:
            break
        covered.append(ch)
        mass += cnt
    covered_set = set(covered)

    base = len(RESERVED) + 2 * len(covered)
    if target_size < base:
        raise InputError(
            f"target_size {target_size} cannot hold {len(RESERVED)} reserved tokens "
            f"plus both forms of {len(covered)} characters (need >= {base})")

    tokens = list(RESERVED)
    for ch in sorted(covered_set):
        tokens.append(ch)
    for ch in sorted(covered_set):
        tokens.append("##" + ch)

    # words as symbol sequences: first char bare, rest with "##"
    seqs: list[tuple[list[str], int]] = []
    for w, c in words.items():
        if any(ch not in covered_set for ch in w):
            continue
        seqs.append(([w[0]] + ["##" + ch for ch in w[1:]], c))

    vocab_set = set(tokens)
    while len(tokens) < target_size:
        pair_counts: dict[tuple[str, str], int] = {}
        for seq, c in seqs:
            for i in range(len(seq) - 1):
                p = (seq[i], seq[i + 1])
                pair_counts[p] = pair_counts.get(p, 0) + c
        candidates = [(cnt, p) for p, cnt in pair_counts.items()
                      if cnt >= 2 and (p[0] + p[1][2:]) not in vocab_set]
        if not candidates:
            break
        best = min(candidates, key=lambda kv: (-kv[0], kv[1]))[1]
        merged = best[0] + best[1][2:]
        tokens.append(merged)
        vocab_set.add(merged)
        for k, (seq, c) in enumerate(seqs):
            i, out = 0, []
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[k] = (out, c)
    return Vocab(tokens)


@dataclass
class TokenizedText:
    """Token ids plus the original text and word->token span map."""

    ids: list[int]
    text: str
    spans: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ids)


def wordpiece_tokenize(text: str, vocab: Vocab, max_len: int) -> TokenizedText:
    """Greedy longest-match-first piecing; unknown characters sink the word to [UNK]."""
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    for word in normalize(text).split():
        start_tok = len(ids)
        pieces: list[int] = []
        pos = 0
        while pos < len(word):
            end = len(word)
            found = None
            while pos < end:
                sub = word[pos:end]
                if pos > 0:
                    sub = "##" + sub
                if sub in vocab:
                    found = sub
                    break
                end -= 1
            if found is None:
                pieces = [UNK_ID]
                break
            pieces.append(vocab.id(found))
            pos = end
        ids.extend(pieces)
        spans.append((start_tok, len(ids)))
    if len(ids) > max_len:
        ids = ids[:max_len]
        spans = [(a, min(b, max_len)) for a, b in spans if a < max_len]
    return TokenizedText(ids=ids, text=text, spans=spans)


def detokenize(ids: list[int], vocab: Vocab) -> str:
    """Join pieces, attaching "##" continuations to the previous word."""
    words: list[str] = []
    for i in ids:
        tok = vocab.token(int(i))
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok[2:] if tok.startswith("##") else tok)
    return " ".join(words)


# ---------------------------------------------------------------------------
# paraphrase augmentation (back-translation stand-in)
# ---------------------------------------------------------------------------

MODE_SYNONYM = "synonym-substitution"
MODE_REORDER = "clause-reorder"
MODE_BOTH = "both"
DIVERSITY_LEVELS = (2, 5, 10)


@dataclass
class ParaphraseConfig:
    """Seeded rule-based paraphraser settings.

    ``diversity`` mirrors the decoding beam sizes of a translation-based
    augmenter; ``protected`` words (the planted label-relevant triggers)
    are never substituted.
    """

    mode: str = MODE_BOTH
    diversity: int = 2
    seed: int = 0
    synonyms: dict = field(default_factory=dict)
    protected: frozenset = frozenset()

    def __post_init__(self):
        if self.mode not in (MODE_SYNONYM, MODE_REORDER, MODE_BOTH):
            raise InputError(f"unknown paraphrase mode '{self.mode}'")
        if self.diversity not in DIVERSITY_LEVELS:
            raise InputError(f"diversity must be one of {DIVERSITY_LEVELS}")
        self.protected = frozenset(w.lower() for w in self.protected)
        for word, syns in self.synonyms.items():
            bad = set(s.lower() for s in syns) & self.protected
            if bad:
                raise InputError(f"synonyms of '{word}' include protected words {sorted(bad)}")


@dataclass
class AugmentResult:
    samples: list
    warning: str | None = None


def _core(word: str) -> str:
    """The alphanumeric core of a word (punctuation may cling to it)."""
    m = re.search(r"[a-z0-9]+", word.lower())
    return m.group(0) if m else ""


def _substitute(words: list[str], cfg: ParaphraseConfig, rng) -> list[str]:
    out = []
    for w in words:
        core = _core(w)
        syns = cfg.synonyms.get(core)
        if syns and core not in cfg.protected and rng.random() < 0.5:
            repl = syns[rng.integers(0, len(syns))]
            out.append(w.lower().replace(core, repl, 1))
        else:
            out.append(w)
    return out


def _reorder(words: list[str], rng) -> list[str]:
    # rotate comma-delimited clauses when present, else swap halves
    clauses, cur = [], []
    for w in words:
        cur.append(w)
        if w.endswith(","):
            clauses.append(cur)
            cur = []
    if cur:
        clauses.append(cur)
    if len(clauses) >= 2:
        k = int(rng.integers(1, len(clauses)))
        rotated = clauses[k:] + clauses[:k]
        flat = [w for cl in rotated for w in cl]
        # keep the comma off the new final clause end
        if flat and flat[-1].endswith(","):
            flat[-1] = flat[-1][:-1]
        return flat
    if len(words) >= 2:
        cut = int(rng.integers(1, len(words)))
        return words[cut:] + words[:cut]
    return list(words)


def paraphrase_augment(sample: MemeSample, cfg: ParaphraseConfig) -> AugmentResult:
    """Up to ``diversity`` distinct text variants; label and regions untouched."""
    if not sample.text.strip():
        return AugmentResult([sample], warning="empty text; sample returned unchanged")
    base = RngState(cfg.seed ^ zlib.crc32(sample.id.encode()), STREAM_AUGMENT)
    variants: list[str] = []
    seen = set()
    attempts = 0
    max_attempts = cfg.diversity * 10
    while len(variants) < cfg.diversity and attempts < max_attempts:
        rng = base.at(attempts)
        attempts += 1
        words = sample.text.split()
        if cfg.mode in (MODE_SYNONYM, MODE_BOTH):
            words = _substitute(words, cfg, rng)
        if cfg.mode in (MODE_REORDER, MODE_BOTH):
            words = _reorder(words, rng)
        text = " ".join(words)
        if text not in seen:
            seen.add(text)
            variants.append(text)
    warning = None
    if len(variants) < cfg.diversity:
        warning = (f"lexicon only permits {len(variants)} distinct variants "
                   f"of sample {sample.id} (requested {cfg.diversity})")
    samples = [MemeSample(id=f"{sample.id}~aug{i}", text=v, label=sample.label,
                          regions=sample.regions, caption=sample.caption)
               for i, v in enumerate(variants)]
    return AugmentResult(samples, warning=warning)
