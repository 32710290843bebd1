"""Entity spans, normalization and pluggable recognizers."""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .corpus import TableExample, TokenSequence, split_tokens

_ARTICLES = ("the", "a", "an")


def normalize_entity(surface: str) -> str:
    """Casefold, collapse whitespace, drop leading articles and trailing punctuation.

    Applied to a fixed point so the result is idempotent.
    """
    text = " ".join(surface.casefold().split())
    while True:
        before = text
        while text and unicodedata.category(text[-1]).startswith("P"):
            text = text[:-1].rstrip()
        words = text.split(" ")
        while len(words) > 1 and words[0] in _ARTICLES:
            words = words[1:]
        text = " ".join(words).strip()
        if text == before:
            return text


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int
    surface: str
    normalized: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    @classmethod
    def of(cls, sentence: TokenSequence, start: int, end: int) -> "EntitySpan":
        if end > len(sentence):
            raise ValueError("span exceeds sentence length")
        surface = " ".join(sentence.surface[start:end])
        return cls(start, end, surface, normalize_entity(surface))


class EntityRecognizer(Protocol):
    name: str

    def extract(self, sentence: TokenSequence, context: TableExample | None = None) -> list[EntitySpan]:
        ...


def _cell_patterns(example: TableExample) -> set[tuple[str, ...]]:
    patterns = set()
    for _, _, value in example.cells():
        for text in (value, normalize_entity(value)):
            toks = tuple(t.lower() for t in split_tokens(text))
            if toks:
                patterns.add(toks)
    return patterns


class TableRecognizer:
    """Leftmost-longest exact matching of table cell values inside a sentence."""

    name = "table"

    def extract(self, sentence: TokenSequence, context: TableExample | None = None) -> list[EntitySpan]:
        if context is None:
            return []
        patterns = _cell_patterns(context)
        if not patterns:
            return []
        longest = max(len(p) for p in patterns)
        words = sentence.lowered()
        spans = []
        i = 0
        while i < len(words):
            for n in range(min(longest, len(words) - i), 0, -1):
                if tuple(words[i : i + n]) in patterns:
                    spans.append(EntitySpan.of(sentence, i, i + n))
                    i += n
                    break
            else:
                i += 1
        return spans


class PreExtractedRecognizer:
    """Serves spans read from a line-delimited file of ``{"id", "spans": [[start, end], ...]}``.

    Sentences are looked up by the ``table_id`` of the context example, so
    external NER output can be injected exactly.
    """

    name = "file"

    def __init__(self, path: str | Path):
        self._spans: dict[str, list[tuple[int, int]]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                try:
                    self._spans[str(rec["id"])] = [(int(s), int(e)) for s, e in rec["spans"]]
                except (KeyError, TypeError, ValueError):
                    raise ValueError(f"{path}:{lineno}: expected fields 'id' and 'spans'") from None

    def extract(self, sentence: TokenSequence, context: TableExample | None = None) -> list[EntitySpan]:
        if context is None or context.table_id not in self._spans:
            return []
        return [EntitySpan.of(sentence, s, e) for s, e in sorted(self._spans[context.table_id])]


_RECOGNIZERS: dict[str, Callable[..., EntityRecognizer]] = {
    "table": TableRecognizer,
    "file": PreExtractedRecognizer,
}


def register_recognizer(name: str, factory: Callable[..., EntityRecognizer]) -> None:
    _RECOGNIZERS[name] = factory


def load_recognizer(name: str, **kwargs) -> EntityRecognizer:
    try:
        factory = _RECOGNIZERS[name]
    except KeyError:
        raise ValueError(f"unknown recognizer '{name}'; available: {sorted(_RECOGNIZERS)}") from None
    return factory(**kwargs)


def check_spans(spans: Sequence[EntitySpan], length: int) -> None:
    """Raise if spans overlap, are unsorted or fall outside the sentence."""
    prev_end = 0
    for span in spans:
        if span.start < prev_end or span.end > length:
            raise ValueError(f"recognizer returned invalid span layout: {spans}")
        prev_end = span.end


def extract_entities(
    sentence: TokenSequence,
    context: TableExample | None = None,
    recognizer: EntityRecognizer | None = None,
) -> list[EntitySpan]:
    recognizer = recognizer or TableRecognizer()
    spans = list(recognizer.extract(sentence, context))
    check_spans(spans, len(sentence))
    return spans


def entity_set(
    sentence: TokenSequence, context: TableExample | None, recognizer: EntityRecognizer | None = None
) -> set[str]:
    return {s.normalized for s in extract_entities(sentence, context, recognizer)}


def table_entity_sets(example: TableExample, highlighted_only: bool = False) -> dict[int, set[str]]:
    """Column index -> deduplicated normalized cell values.

    Covers the full table unless ``highlighted_only``; replacement candidates
    always use the full table.
    """
    sets: dict[int, set[str]] = {c: set() for c in range(len(example.header))}
    keep = set(example.highlighted_cells or ()) if highlighted_only else None
    for r, c, value in example.cells():
        if keep is not None and (r, c) not in keep:
            continue
        norm = normalize_entity(value)
        if norm:
            sets[c].add(norm)
    return sets


def table_entities(example: TableExample) -> set[str]:
    return set().union(*table_entity_sets(example).values()) if example.header else set()


def surface_lookup(example: TableExample) -> dict[str, str]:
    """normalized entity -> first cell surface that produced it (row-major)."""
    lookup: dict[str, str] = {}
    for _, _, value in example.cells():
        lookup.setdefault(normalize_entity(value), value)
    return lookup
