"""Contradictory-sentence sampling by entity replacement."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import TableExample, TokenSequence, Vocabulary, detokenize, tokenize
from .entities import (
    EntityRecognizer,
    EntitySpan,
    TableRecognizer,
    extract_entities,
    normalize_entity,
    surface_lookup,
    table_entity_sets,
)

log = logging.getLogger(__name__)

SIZE_CAPS = {"xsmall": 1, "small": 3, "medium": 5, "large": 10, "full": None}
METHODS = ("knowledge", "model")
LABEL_SCHEMES = ("prefix", "replaced")


class NoEntitiesError(ValueError):
    pass


class NotGroundedError(ValueError):
    pass


@dataclass(frozen=True)
class SizePolicy:
    name: str

    def __post_init__(self):
        if self.name not in SIZE_CAPS:
            raise ValueError(f"unknown size policy '{self.name}'; expected one of {list(SIZE_CAPS)}")

    @property
    def cap(self) -> int | None:
        return SIZE_CAPS[self.name]


def token_labels(length: int, span: tuple[int, int], scheme: str = "prefix") -> tuple[int, ...]:
    """Per-token faithfulness labels for a sentence with a replaced span.

    ``prefix``: 1 strictly before the span, 0 from the span start on.
    ``replaced``: 0 only inside the span (ELECTRA style).
    """
    start, end = span
    if scheme == "prefix":
        return tuple(1 if t < start else 0 for t in range(length))
    if scheme == "replaced":
        return tuple(0 if start <= t < end else 1 for t in range(length))
    raise ValueError(f"unknown label scheme '{scheme}'")


@dataclass(frozen=True)
class PerturbedSentence:
    source_example_id: str
    tokens: TokenSequence
    replaced_span: tuple[int, int]
    original_entity: str
    replacement_entity: str
    method: str
    token_labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "replaced_span", tuple(self.replaced_span))
        object.__setattr__(self, "token_labels", tuple(self.token_labels))
        start, end = self.replaced_span
        if self.replacement_entity == self.original_entity:
            raise ValueError("replacement equals the original entity")
        if not 0 <= start < end <= len(self.tokens):
            raise ValueError(f"replaced span {self.replaced_span} out of range")
        if len(self.token_labels) != len(self.tokens):
            raise ValueError("token_labels length differs from token count")
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'")

    @property
    def text(self) -> str:
        return detokenize(self.tokens)

    def span_mask(self) -> tuple[int, ...]:
        start, end = self.replaced_span
        return tuple(1 if start <= t < end else 0 for t in range(len(self.tokens)))

    def to_record(self) -> dict:
        return {
            "source_id": self.source_example_id,
            "text": self.text,
            "tokens": list(self.tokens.surface),
            "replaced_span": list(self.replaced_span),
            "original_entity": self.original_entity,
            "replacement_entity": self.replacement_entity,
            "method": self.method,
            "labels_rle": run_length_encode(self.token_labels),
        }

    @classmethod
    def from_record(cls, rec: dict, vocab: Vocabulary) -> "PerturbedSentence":
        surface = rec.get("tokens")
        if surface is None:
            seq = tokenize(rec["text"], vocab)
        else:
            seq = TokenSequence([vocab.id(s.lower()) for s in surface], surface)
        return cls(
            source_example_id=rec["source_id"],
            tokens=seq,
            replaced_span=tuple(rec["replaced_span"]),
            original_entity=rec["original_entity"],
            replacement_entity=rec["replacement_entity"],
            method=rec["method"],
            token_labels=run_length_decode(rec["labels_rle"]),
        )


def run_length_encode(labels: Sequence[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for lab in labels:
        if runs and runs[-1][0] == lab:
            runs[-1][1] += 1
        else:
            runs.append([int(lab), 1])
    return runs


def run_length_decode(runs: Iterable[Sequence[int]]) -> tuple[int, ...]:
    out: list[int] = []
    for lab, n in runs:
        out.extend([int(lab)] * int(n))
    return tuple(out)


def example_rng(seed: int, example_id: str) -> np.random.Generator:
    """Independent stream per example so parallel and serial runs agree."""
    digest = hashlib.sha256(example_id.encode("utf-8")).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


def selection_weights(spans: Sequence[EntitySpan]) -> np.ndarray:
    w = np.array([s.start + 1 for s in spans], dtype=np.float64)
    return w / w.sum()


def select_target_entity(spans: Sequence[EntitySpan], rng: np.random.Generator) -> EntitySpan:
    """Draw one span with probability proportional to ``start + 1`` (favours late entities)."""
    if not spans:
        raise NoEntitiesError("no entities to select from")
    return spans[_draw_index(spans, rng)]


def _draw_index(spans: Sequence[EntitySpan], rng: np.random.Generator) -> int:
    if len(spans) == 1:
        return 0
    return int(rng.choice(len(spans), p=selection_weights(spans)))


def knowledge_candidates(example: TableExample, target: EntitySpan) -> set[str]:
    columns = table_entity_sets(example)
    hits = [vals for vals in columns.values() if target.normalized in vals]
    if not hits:
        raise NotGroundedError(f"entity '{target.surface}' does not occur in table {example.table_id}")
    return set().union(*hits) - {target.normalized}


def model_candidates(
    model,
    X: TokenSequence,
    Y: TokenSequence,
    target: EntitySpan,
    *,
    vocab: Vocabulary,
    rng: np.random.Generator,
    context: TableExample | None = None,
    recognizer: EntityRecognizer | None = None,
    top_p: float = 0.9,
    k_samples: int = 10,
    max_new_tokens: int = 16,
) -> set[str]:
    """Entities the model itself proposes in place of ``target``.

    Teacher-forces ``Y`` up to the target, nucleus-samples ``k_samples``
    continuations and keeps the first entity at or after the target position
    that differs from the original.
    """
    from .model import nucleus_sample

    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    prefix = TokenSequence(Y.tokens[: target.start], Y.surface[: target.start])
    found: set[str] = set()
    for _ in range(k_samples):
        cont = nucleus_sample(model, X, prefix, top_p=top_p, max_len=max_new_tokens, rng=rng)
        surface = list(prefix.surface) + [vocab.token(i) for i in cont.tokens]
        full = TokenSequence(list(prefix.tokens) + list(cont.tokens), surface)
        for span in extract_entities(full, context, recognizer):
            if span.start >= target.start and span.normalized != target.normalized:
                found.add(span.normalized)
                break
    return found


def apply_replacement(
    Y: TokenSequence,
    target: EntitySpan,
    replacement: str,
    vocab: Vocabulary,
    *,
    surface: str | None = None,
    source_id: str = "",
    method: str = "knowledge",
    label_scheme: str = "prefix",
) -> PerturbedSentence:
    """Substitute ``target`` in ``Y`` with the replacement entity's tokens.

    ``surface`` is the display form to insert (e.g. the table cell text);
    defaults to the normalized replacement itself.
    """
    if normalize_entity(replacement) == target.normalized:
        raise ValueError(f"replacement '{replacement}' equals the original entity")
    inserted = tokenize(surface if surface is not None else replacement, vocab)
    if not len(inserted):
        raise ValueError("replacement has no tokens")
    ids = list(Y.tokens[: target.start]) + list(inserted.tokens) + list(Y.tokens[target.end :])
    words = list(Y.surface[: target.start]) + list(inserted.surface) + list(Y.surface[target.end :])
    span = (target.start, target.start + len(inserted))
    return PerturbedSentence(
        source_example_id=source_id,
        tokens=TokenSequence(ids, words),
        replaced_span=span,
        original_entity=target.normalized,
        replacement_entity=normalize_entity(replacement),
        method=method,
        token_labels=token_labels(len(ids), span, label_scheme),
    )


def generate_perturbations(
    example: TableExample,
    method: str,
    policy: SizePolicy | str,
    *,
    vocab: Vocabulary,
    rng: np.random.Generator,
    recognizer: EntityRecognizer | None = None,
    model=None,
    top_p: float = 0.9,
    k_samples: int = 10,
    label_scheme: str = "prefix",
) -> list[PerturbedSentence]:
    """Up to ``policy.cap`` distinct contradictory versions of the reference.

    (target, candidate) pairs are drawn without replacement; each draw picks
    the target with :func:`select_target_entity` among targets that still
    have unused candidates. The first ``k`` outputs of a ``full`` run equal
    the output of a run capped at ``k`` under the same rng.
    """
    if isinstance(policy, str):
        policy = SizePolicy(policy)
    if method not in METHODS:
        raise ValueError(f"unknown method '{method}'")
    recognizer = recognizer or TableRecognizer()
    Y = tokenize(example.reference, vocab)
    spans = extract_entities(Y, example, recognizer)
    if not spans:
        return []

    pools: dict[int, list[str]] = {}
    if method == "knowledge":
        for i, span in enumerate(spans):
            try:
                cands = knowledge_candidates(example, span)
            except NotGroundedError:
                continue
            if cands:
                pools[i] = sorted(cands)
    else:
        if model is None:
            raise ValueError("model-based perturbation needs a model")
        from .corpus import linearize

        X = linearize(example, vocab)
        for i, span in enumerate(spans):
            cands = model_candidates(
                model, X, Y, span, vocab=vocab, rng=rng, context=example,
                recognizer=recognizer, top_p=top_p, k_samples=k_samples,
            )
            if cands:
                pools[i] = sorted(cands)

    surfaces = surface_lookup(example)
    cap = policy.cap
    out: list[PerturbedSentence] = []
    while pools and (cap is None or len(out) < cap):
        keys = sorted(pools)
        idx = keys[_draw_index([spans[k] for k in keys], rng)]
        pool = pools[idx]
        cand = pool.pop(int(rng.integers(len(pool))))
        if not pool:
            del pools[idx]
        out.append(
            apply_replacement(
                Y, spans[idx], cand, vocab, surface=surfaces.get(cand, cand),
                source_id=example.table_id, method=method, label_scheme=label_scheme,
            )
        )
    return out


@dataclass
class PerturbationStore:
    """Perturbations keyed by source example id; ``excluded`` lists ids with none."""

    method: str
    size: str
    seed: int
    items: dict[str, list[PerturbedSentence]] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    def get(self, example_id: str, cap: int | None = None) -> list[PerturbedSentence]:
        got = self.items.get(example_id, [])
        return got if cap is None else got[:cap]

    def total(self) -> int:
        return sum(len(v) for v in self.items.values())

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for ex_id, perturbed in self.items.items():
                for p in perturbed:
                    fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")

    @classmethod
    def read(cls, path: str | Path, vocab: Vocabulary, method: str = "", size: str = "", seed: int = 0):
        store = cls(method, size, seed)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    p = PerturbedSentence.from_record(json.loads(line), vocab)
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad perturbation record ({exc})") from None
                store.items.setdefault(p.source_example_id, []).append(p)
        return store


def perturb_corpus(
    examples: Sequence[TableExample],
    method: str,
    size: str,
    *,
    vocab: Vocabulary,
    seed: int,
    recognizer: EntityRecognizer | None = None,
    model=None,
    top_p: float = 0.9,
    k_samples: int = 10,
    label_scheme: str = "prefix",
) -> PerturbationStore:
    store = PerturbationStore(method, size, seed)
    for ex in examples:
        got = generate_perturbations(
            ex, method, size, vocab=vocab, rng=example_rng(seed, ex.table_id),
            recognizer=recognizer, model=model, top_p=top_p, k_samples=k_samples,
            label_scheme=label_scheme,
        )
        if got:
            store.items[ex.table_id] = got
        else:
            store.excluded.append(ex.table_id)
    if store.excluded:
        log.info("%d of %d examples yielded no perturbation", len(store.excluded), len(examples))
    return store


def pick_parallel(perturbed: Sequence[PerturbedSentence]) -> PerturbedSentence | None:
    """The perturbation of the latest entity; ties go to the smallest replacement."""
    if not perturbed:
        return None
    return min(perturbed, key=lambda p: (-p.replaced_span[0], p.replacement_entity))
