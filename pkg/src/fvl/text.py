"""Tokenization, whole-word masking, and attribute mining.

The synthetic vocabulary is closed, so the subword model degenerates to
whole-word tokens plus [UNK]; word-span bookkeeping is kept anyway so the
whole-word masking contract is exercised exactly as it would be with real
subwords.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .lexicon import AttributeLexicon

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")
N_SPECIALS = len(SPECIAL_TOKENS)

# Label value at positions that carry no masking target. Real targets are
# always >= N_SPECIALS, so 0 is unambiguous.
IGNORE_LABEL = 0


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass
class Vocabulary:
    """Dense, stable token-id table: specials first, then corpus words."""

    id_to_token: list

    def __post_init__(self):
        if list(self.id_to_token[:N_SPECIALS]) != list(SPECIAL_TOKENS):
            raise ConfigError("vocabulary must start with the special tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def encode_word(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"tokens": self.id_to_token}, f)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f)["tokens"])


def build_vocab(corpus) -> Vocabulary:
    """Vocabulary over every word in the corpus, in first-seen order."""
    words = []
    seen = set()
    for text in corpus:
        for w in normalize_text(text).split():
            if w not in seen:
                seen.add(w)
                words.append(w)
    if not words:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(list(SPECIAL_TOKENS) + words)


@dataclass
class TokenSequence:
    ids: np.ndarray  # (T_max,) int64, [CLS] first, [PAD] tail
    word_spans: list  # (start, end) subword spans, [CLS]/[PAD] excluded
    attention_mask: np.ndarray  # (T_max,) int64

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())


def tokenize(vocab: Vocabulary, text: str, t_max: int) -> TokenSequence:
    """[CLS] + whole-word tokens, truncated at a word boundary, padded to t_max."""
    if t_max < 1:
        raise ConfigError("t_max must be >= 1")
    words = normalize_text(text).split()
    ids = [CLS_ID]
    spans = []
    for w in words:
        pieces = [vocab.encode_word(w)]  # closed vocabulary: one piece per word
        if len(ids) + len(pieces) > t_max:
            break  # never split a word at the budget boundary
        spans.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
    out = np.full(t_max, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(t_max, dtype=np.int64)
    mask[: len(ids)] = 1
    return TokenSequence(ids=out, word_spans=spans, attention_mask=mask)


def detokenize(vocab: Vocabulary, ids) -> str:
    words = [vocab.id_to_token[int(i)] for i in ids if int(i) >= N_SPECIALS]
    return " ".join(words)


@dataclass
class MaskedText:
    ids: np.ndarray
    labels: np.ndarray  # original id at selected positions, IGNORE_LABEL elsewhere
    masked_spans: list


def mask_tokens(seq: TokenSequence, p: float, rng: np.random.Generator, vocab: Vocabulary) -> MaskedText:
    """Whole-word Bernoulli(p) selection with the 80/10/10 replacement rule.

    Selected words are replaced atomically: 80% -> [MASK] at every subword,
    10% -> random non-special tokens, 10% -> left unchanged. Labels carry the
    original ids at every subword of a selected word. Specials are immune.
    """
    ids = seq.ids.copy()
    labels = np.full_like(ids, IGNORE_LABEL)
    masked_spans = []
    for start, end in seq.word_spans:
        if rng.random() >= p:
            continue
        masked_spans.append((start, end))
        labels[start:end] = seq.ids[start:end]
        action = rng.random()
        if action < 0.8:
            ids[start:end] = MASK_ID
        elif action < 0.9:
            ids[start:end] = rng.integers(N_SPECIALS, len(vocab), size=end - start)
        # else: leave the word unchanged
    return MaskedText(ids=ids, labels=labels, masked_spans=masked_spans)


@dataclass
class PseudoAttributeSet:
    """Frequent content words, ordered by descending count then lexicographic."""

    attributes: list
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {a: i for i, a in enumerate(self.attributes)}

    def __len__(self):
        return len(self.attributes)

    def indices_for(self, caption: str, lexicon: AttributeLexicon) -> list:
        found = {self.index[w] for w in normalize_text(caption).split() if w in self.index}
        return sorted(found)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"attributes": self.attributes, "counts": self.counts}, f)

    @classmethod
    def load(cls, path) -> "PseudoAttributeSet":
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        return cls(d["attributes"], d.get("counts", {}))


def mine_pseudo_attributes(corpus, lexicon: AttributeLexicon, min_count: int) -> PseudoAttributeSet:
    """Nouns/adjectives appearing strictly more than min_count times."""
    counter = Counter()
    for text in corpus:
        for w in normalize_text(text).split():
            if lexicon.is_content_word(w):
                counter[w] += 1
    kept = [(w, c) for w, c in counter.items() if c > min_count]
    kept.sort(key=lambda wc: (-wc[1], wc[0]))
    return PseudoAttributeSet([w for w, _ in kept], {w: c for w, c in kept})


def smooth_targets(gt_labels, n_attributes: int) -> np.ndarray:
    """Uniform mass 1/k over the k ground-truth labels; all-zero when empty."""
    target = np.zeros(n_attributes, dtype=np.float32)
    labels = sorted(set(int(i) for i in gt_labels))
    if not labels:
        return target
    if labels[0] < 0 or labels[-1] >= n_attributes:
        raise DataError(f"attribute index out of range for |A|={n_attributes}")
    target[labels] = 1.0 / len(labels)
    return target
