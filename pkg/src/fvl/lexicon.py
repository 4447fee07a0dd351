"""Closed attribute lexicon for the synthetic catalog.

Every word the caption generator can emit is listed here with its
part-of-speech tag, so content-word statistics and attribute mining
need no external tagger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

NOUN = "noun"
ADJECTIVE = "adjective"
VERB = "verb"
FUNCTION = "function"

CONTENT_POS = frozenset({NOUN, ADJECTIVE})

# Slots that describe the product; "filler" holds glue words only.
ATTRIBUTE_SLOTS = ("color", "pattern", "garment", "sleeve", "material", "style")
FILLER_SLOT = "filler"


@dataclass(frozen=True)
class LexiconEntry:
    word: str
    pos: str
    slot: str


@dataclass
class AttributeLexicon:
    """Word list partitioned into attribute slots.

    Invariants checked at construction: words are unique, non-filler
    slots contain only nouns/adjectives, the filler slot contains only
    verbs/function words.
    """

    entries: list[LexiconEntry] = field(default_factory=list)

    def __post_init__(self):
        words = [e.word for e in self.entries]
        if len(set(words)) != len(words):
            raise ConfigError("lexicon words must be unique")
        for e in self.entries:
            if e.slot == FILLER_SLOT:
                if e.pos not in (VERB, FUNCTION):
                    raise ConfigError(f"filler word {e.word!r} must be a verb/function word")
            else:
                if e.pos not in CONTENT_POS:
                    raise ConfigError(f"attribute word {e.word!r} must be a noun or adjective")
        self._by_slot: dict[str, list[str]] = {}
        self._pos: dict[str, str] = {}
        for e in self.entries:
            self._by_slot.setdefault(e.slot, []).append(e.word)
            self._pos[e.word] = e.pos

    def slot_words(self, slot: str) -> list[str]:
        words = self._by_slot.get(slot, [])
        if not words:
            raise ConfigError(f"lexicon slot {slot!r} is empty")
        return words

    def pos_of(self, word: str) -> str | None:
        return self._pos.get(word)

    def is_content_word(self, word: str) -> bool:
        return self._pos.get(word) in CONTENT_POS

    @property
    def words(self) -> list[str]:
        return [e.word for e in self.entries]


# Category tree: silhouette family -> garment nouns (one noun per subcategory).
DEFAULT_CATEGORIES: dict[str, list[str]] = {
    "tops": ["tshirt", "blouse", "hoodie", "sweater"],
    "bottoms": ["jeans", "skirt", "shorts", "trousers"],
    "outerwear": ["jacket", "coat", "vest", "blazer"],
}

_COLORS = ["red", "blue", "green", "black", "white", "yellow", "purple", "orange"]
_PATTERNS = ["striped", "dotted", "checked", "plain", "floral", "zigzag"]
_SLEEVES = ["sleeveless", "short", "long", "cropped"]
_MATERIALS = ["cotton", "denim", "wool", "silk", "leather", "linen"]
_STYLES = ["casual", "formal", "sporty", "vintage", "modern", "boho"]
_FILLERS = [
    ("features", VERB),
    ("has", VERB),
    ("looks", VERB),
    ("with", FUNCTION),
    ("a", FUNCTION),
    ("in", FUNCTION),
    ("this", FUNCTION),
]


def default_lexicon(categories: dict[str, list[str]] | None = None) -> AttributeLexicon:
    cats = categories if categories is not None else DEFAULT_CATEGORIES
    entries = []
    entries += [LexiconEntry(w, ADJECTIVE, "color") for w in _COLORS]
    entries += [LexiconEntry(w, ADJECTIVE, "pattern") for w in _PATTERNS]
    for subs in cats.values():
        entries += [LexiconEntry(w, NOUN, "garment") for w in subs]
    entries += [LexiconEntry(w, ADJECTIVE, "sleeve") for w in _SLEEVES]
    entries += [LexiconEntry(w, NOUN, "material") for w in _MATERIALS]
    entries += [LexiconEntry(w, ADJECTIVE, "style") for w in _STYLES]
    entries += [LexiconEntry(w, pos, FILLER_SLOT) for w, pos in _FILLERS]
    return AttributeLexicon(entries)


# Sentence frames with 0..3 filler words. Attribute words appear exactly once
# per caption; the filler budget keeps the corpus content-word share >= 0.8.
CAPTION_FRAMES = (
    "{style} {sleeve} {color} {pattern} {material} {garment}",
    "a {style} {sleeve} {color} {pattern} {material} {garment}",
    "{color} {pattern} {material} {garment} with {sleeve} {style}",
    "this {garment} features {color} {pattern} {material} in {sleeve} {style}",
)
