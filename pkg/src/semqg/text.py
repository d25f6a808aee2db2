"""Tokenization, vocabularies, BIO answer tags and rule/lexicon POS+NER tagging."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

BIO_TAGS = (PAD, "O", "B", "I")
POS_TAGS = (PAD, "NOUN", "PROPN", "VERB", "AUX", "ADP", "DET", "NUM", "PUNCT", "PRON", "ADV", "ADJ", "CCONJ", "X")
NER_TAGS = (PAD, "O", "PERSON", "LOCATION", "DATE")

_TOKEN_RE = re.compile(r"\d+(?:[.,]\d+)*|\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class Token:
    text: str       # lowercased
    raw: str        # as written
    start: int
    end: int        # exclusive


def tokenize(text: str) -> list[Token]:
    """Lowercased word/number/punctuation tokens with character offsets."""
    return [Token(m.group().lower(), m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def char_span_to_token_span(tokens: Sequence[Token], start: int, end: int) -> tuple[int, int, bool]:
    """Smallest token span covering chars [start, end); flag says whether it had to snap outward."""
    covering = [i for i, t in enumerate(tokens) if t.end > start and t.start < end]
    if not covering:
        raise ValueError(f"character span [{start}, {end}) covers no token")
    s, e = covering[0], covering[-1]
    snapped = tokens[s].start != start or tokens[e].end != end
    return s, e, snapped


def bio_tag(n_tokens: int, span: tuple[int, int]) -> list[str]:
    start, end = span
    if not (0 <= start <= end < n_tokens):
        raise ValueError(f"answer span {span} out of range for {n_tokens} tokens")
    tags = ["O"] * n_tokens
    tags[start] = "B"
    for i in range(start + 1, end + 1):
        tags[i] = "I"
    return tags


class Vocabulary:
    """Token <-> id map; ids 0..3 are PAD, UNK, BOS, EOS."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for seq in sequences:
            for t in seq:
                counts[t] = counts.get(t, 0) + 1
        keep = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                      key=lambda t: (-counts[t], t))
        return cls(keep)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        v = cls()
        for t in itos[4:]:
            if t in v.stoi:
                raise ValueError(f"duplicate vocabulary entry {t!r}")
            v.add(t)
        return v


class TagSet:
    def __init__(self, tags: Sequence[str]):
        self.tags = tuple(tags)
        self.index = {t: i for i, t in enumerate(self.tags)}

    def __len__(self):
        return len(self.tags)

    def encode(self, tags: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tags]
        except KeyError as exc:
            raise ValueError(f"unknown tag {exc.args[0]!r}") from None


BIO = TagSet(BIO_TAGS)
POS = TagSet(POS_TAGS)
NER = TagSet(NER_TAGS)

# Closed-class words for the built-in tagger. Template vocabularies can extend it.
FUNCTION_WORDS = {
    "the": "DET", "a": "DET", "an": "DET", "this": "DET", "that": "PRON", "which": "PRON",
    "who": "PRON", "whom": "PRON", "what": "PRON", "when": "ADV", "where": "ADV", "why": "ADV",
    "how": "ADV", "in": "ADP", "on": "ADP", "at": "ADP", "to": "ADP", "for": "ADP", "of": "ADP",
    "by": "ADP", "from": "ADP", "with": "ADP", "and": "CCONJ", "or": "CCONJ", "but": "CCONJ",
    "was": "AUX", "were": "AUX", "is": "AUX", "are": "AUX", "did": "AUX", "does": "AUX", "do": "AUX",
    "he": "PRON", "she": "PRON", "it": "PRON", "they": "PRON",
}


class Tagger:
    """Pluggable tagger interface: raw (cased) tokens -> (pos_tags, ner_tags)."""

    def tag(self, raw_tokens: Sequence[str]) -> tuple[list[str], list[str]]:
        raise NotImplementedError


@dataclass
class RuleTagger(Tagger):
    """Rules + lexicons. Exact on the toy language when built from its spec."""

    persons: frozenset = frozenset()
    locations: frozenset = frozenset()
    nouns: frozenset = frozenset()
    lexicon: dict = field(default_factory=lambda: dict(FUNCTION_WORDS))

    def tag_one(self, raw: str, sentence_initial: bool = False) -> tuple[str, str]:
        w = raw.lower()
        if re.fullmatch(r"\d+(?:[.,]\d+)*", w):
            is_year = re.fullmatch(r"\d{4}", w) is not None and 1000 <= int(w) <= 2100
            return "NUM", ("DATE" if is_year else "O")
        if re.fullmatch(r"[^\w\s]", w):
            return "PUNCT", "O"
        if w in self.persons:
            return "PROPN", "PERSON"
        if w in self.locations:
            return "PROPN", "LOCATION"
        if w in self.nouns:
            return "NOUN", "O"
        if w in self.lexicon:
            return self.lexicon[w], "O"
        if raw[:1].isupper() and not sentence_initial:
            return "PROPN", "O"
        if w.endswith("ed"):
            return "VERB", "O"
        return "NOUN", "O"

    def tag(self, raw_tokens: Sequence[str]) -> tuple[list[str], list[str]]:
        pos, ner = [], []
        prev = "."
        for raw in raw_tokens:
            p, n = self.tag_one(raw, sentence_initial=prev in {".", "?", "!"})
            pos.append(p)
            ner.append(n)
            prev = raw
        return pos, ner


@dataclass
class TokenizedExample:
    id: str
    context_tokens: list[str]
    answer_span: tuple[int, int]
    bio_tags: list[str]
    pos_tags: list[str]
    ner_tags: list[str]
    question_tokens: Optional[list[str]] = None

    def __post_init__(self):
        m = len(self.context_tokens)
        s, e = self.answer_span
        if not (0 <= s <= e < m):
            raise ValueError(f"{self.id}: answer span {self.answer_span} invalid for {m} tokens")
        if not (len(self.bio_tags) == len(self.pos_tags) == len(self.ner_tags) == m):
            raise ValueError(f"{self.id}: tag sequences must all have length {m}")
        if self.bio_tags.count("B") != 1:
            raise ValueError(f"{self.id}: BIO tags need exactly one B")
        for i, t in enumerate(self.bio_tags):
            if t == "I" and (i == 0 or self.bio_tags[i - 1] not in ("B", "I")):
                raise ValueError(f"{self.id}: I tag at {i} does not follow B/I")

    @property
    def answer_tokens(self) -> list[str]:
        s, e = self.answer_span
        return self.context_tokens[s:e + 1]
