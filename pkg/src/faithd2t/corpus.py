"""Data model, linearization, tokenization and the synthetic table corpus."""

from __future__ import annotations

import json
import random
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
QUERY_MARK, META_MARK, ROW_MARK, CELL_MARK = "<q>", "<meta>", "<row>", "<cell>"
SPECIALS = (PAD, BOS, EOS, UNK, QUERY_MARK, META_MARK, ROW_MARK, CELL_MARK)

# numbers (incl. decimals) stay whole; markers like <cell> stay whole
_TOKEN_RE = re.compile(r"<[a-z]+>|\d+(?:\.\d+)?|\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,;:!?%)]}'")


class DatasetError(ValueError):
    """A dataset record failed to parse or violates an invariant."""


@dataclass(frozen=True)
class TableExample:
    table_id: str
    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    reference: str
    metadata: dict[str, str] = field(default_factory=dict)
    query: str | None = None
    highlighted_cells: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "header", tuple(self.header))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        if self.highlighted_cells is not None:
            object.__setattr__(
                self, "highlighted_cells", tuple((int(r), int(c)) for r, c in self.highlighted_cells)
            )
        width = len(self.header)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise DatasetError(
                    f"{self.table_id}: row {i} has {len(row)} cells, header has {width}"
                )
        for r, c in self.highlighted_cells or ():
            if not (0 <= r < len(self.rows) and 0 <= c < width):
                raise DatasetError(f"{self.table_id}: highlighted cell ({r}, {c}) out of range")
        if not self.reference.strip():
            raise DatasetError(f"{self.table_id}: empty reference")

    def __hash__(self):
        return hash((self.table_id, self.header, self.rows, self.reference, self.query))

    def cells(self) -> Iterable[tuple[int, int, str]]:
        for r, row in enumerate(self.rows):
            for c, value in enumerate(row):
                yield r, c, value

    def to_record(self) -> dict:
        rec = {
            "table_id": self.table_id,
            "header": list(self.header),
            "rows": [list(r) for r in self.rows],
        }
        if self.metadata:
            rec["metadata"] = dict(self.metadata)
        if self.query is not None:
            rec["query"] = self.query
        if self.highlighted_cells is not None:
            rec["highlighted_cells"] = [list(rc) for rc in self.highlighted_cells]
        rec["reference"] = self.reference
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TableExample":
        return cls(
            table_id=str(rec["table_id"]),
            header=rec["header"],
            rows=rec["rows"],
            reference=rec["reference"],
            metadata=dict(rec.get("metadata") or {}),
            query=rec.get("query"),
            highlighted_cells=rec.get("highlighted_cells"),
        )


@dataclass(frozen=True)
class TokenSequence:
    """Parallel ids and surface strings; ``unknown`` counts ids mapped to <unk>."""

    tokens: tuple[int, ...]
    surface: tuple[str, ...]
    unknown: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "surface", tuple(self.surface))
        if len(self.tokens) != len(self.surface):
            raise ValueError("tokens and surface differ in length")

    def __len__(self):
        return len(self.tokens)

    def lowered(self) -> tuple[str, ...]:
        return tuple(s.lower() for s in self.surface)


class Vocabulary:
    """Bijective token<->id map with reserved specials at ids 0..7."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(SPECIALS)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for text in texts:
            for tok in split_tokens(text):
                vocab.add(tok.lower())
        return vocab

    @classmethod
    def from_examples(cls, examples: Iterable[TableExample]) -> "Vocabulary":
        def texts():
            for ex in examples:
                yield " ".join(linearize_surface(ex))
                yield ex.reference
                for _, _, value in ex.cells():
                    yield value

        return cls.build(texts())

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token: str):
        return token in self._stoi

    def id(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def tokens(self) -> list[str]:
        return list(self._itos)

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._itos == other._itos


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(unicodedata.normalize("NFC", text))


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    surface = split_tokens(text)
    ids = [vocab.id(s.lower()) for s in surface]
    unknown = sum(1 for i, s in zip(ids, surface) if i == vocab.unk_id and s.lower() != UNK)
    return TokenSequence(ids, surface, unknown)


def detokenize(seq: TokenSequence | Sequence[str]) -> str:
    surface = seq.surface if isinstance(seq, TokenSequence) else seq
    out = []
    for tok in surface:
        if out and tok in _NO_SPACE_BEFORE:
            out[-1] += tok
        else:
            out.append(tok)
    return " ".join(out)


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> TokenSequence:
    """Ids back to a TokenSequence, dropping pad/bos and stopping at eos."""
    keep = []
    for i in ids:
        if i == vocab.eos_id:
            break
        if i in (vocab.pad_id, vocab.bos_id):
            continue
        keep.append(int(i))
    return TokenSequence(keep, [vocab.token(i) for i in keep])


def linearize_surface(example: TableExample) -> list[str]:
    parts: list[str] = []
    if example.query:
        parts += [QUERY_MARK, *split_tokens(example.query)]
    for key, value in example.metadata.items():
        parts += [META_MARK, *split_tokens(key), *split_tokens(value)]
    if example.highlighted_cells is not None:
        cells = sorted(set(example.highlighted_cells))
    else:
        cells = [(r, c) for r, c, _ in example.cells()]
    prev_row = None
    for r, c in cells:
        if r != prev_row:
            parts.append(ROW_MARK)
            prev_row = r
        parts += [CELL_MARK, *split_tokens(example.header[c]), *split_tokens(example.rows[r][c])]
    return parts


def linearize(example: TableExample, vocab: Vocabulary) -> TokenSequence:
    """Flatten query, metadata and cells into one source sequence.

    Order: ``<q>`` query, ``<meta>`` key value per metadata pair, then cells in
    row-major order, each as ``<cell> column value``, with ``<row>`` opening
    each row. Only highlighted cells are emitted when highlights exist.
    """
    surface = linearize_surface(example)
    ids = [vocab.id(s if s in SPECIALS else s.lower()) for s in surface]
    unknown = sum(1 for i in ids if i == vocab.unk_id)
    return TokenSequence(ids, surface, unknown)


def load_dataset(path: str | Path) -> list[TableExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed record ({exc.msg})") from None
            for key in ("table_id", "header", "rows", "reference"):
                if key not in rec:
                    raise DatasetError(f"line {lineno}: missing field '{key}'")
            try:
                examples.append(TableExample.from_record(rec))
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"line {lineno}: bad field value ({exc})") from None
    return examples


def dump_dataset(examples: Iterable[TableExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus

FIRST_NAMES = (
    "Anna", "Boris", "Carla", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Ingrid", "Jonas",
    "Katja", "Lars", "Mira", "Nils", "Olga", "Pavel", "Rosa", "Stefan", "Tanja", "Ulrich",
    "Vera", "Walter", "Xenia", "Yusuf", "Zora", "Aldo", "Bianca", "Cyril", "Dalia", "Emil",
)
LAST_NAMES = (
    "Novak", "Berg", "Costa", "Ivanov", "Lindqvist", "Moreau", "Okafor", "Petrov", "Quinn",
    "Rossi", "Schmidt", "Tanaka", "Urban", "Varga", "Weber", "Yilmaz", "Ziegler", "Andersen",
    "Brandt", "Castillo", "Dumont", "Eriksen", "Fischer", "Haas", "Kovac",
)
COUNTRIES = (
    "Sweden", "Norway", "Denmark", "Finland", "France", "Spain", "Italy", "Germany", "Austria",
    "Poland", "Hungary", "Portugal", "Greece", "Brazil", "Chile", "Canada", "Mexico", "Japan",
    "Kenya", "Egypt", "New Zealand", "South Africa", "United States", "Costa Rica", "Peru",
)
EVENTS = (
    "Chess Open", "City Marathon", "Rowing Cup", "Judo Masters", "Archery Trophy",
    "Fencing Classic", "Cycling Tour", "Swim Meet", "Ski Jump Final", "Tennis Invitational",
)
COLUMN_TYPES = ("person", "country", "year", "score")
COLUMN_NAMES = {"person": "Athlete", "country": "Country", "year": "Year", "score": "Score"}

# (question, reference, columns used); person is always the row key unless noted
TEMPLATES = (
    ("Which country does {person} represent?", "{person} represents {country}.", ("person", "country")),
    ("In which year did {person} compete?", "{person} competed in {year}.", ("person", "year")),
    ("What score did {person} get?", "{person} scored {score}.", ("person", "score")),
    ("Who scored {score}?", "{person} scored {score}.", ("person", "score")),
    (
        "Which country did {person} represent, and in which year?",
        "{person} represented {country} in {year}.",
        ("person", "country", "year"),
    ),
    (
        "How did {person} do?",
        "{person} from {country} scored {score} in {year}.",
        ("person", "country", "year", "score"),
    ),
)


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    n_examples: int = 100
    min_rows: int = 3
    max_rows: int = 8
    n_columns: int = 4
    n_first_names: int = len(FIRST_NAMES)
    n_last_names: int = len(LAST_NAMES)
    n_countries: int = len(COUNTRIES)
    n_events: int = len(EVENTS)
    year_range: tuple[int, int] = (1990, 2023)
    templates: tuple[int, ...] | None = None  # indices into TEMPLATES; None = all usable

    def __post_init__(self):
        if self.n_examples < 0:
            raise ValueError("n_examples must be non-negative")
        if not 1 <= self.min_rows <= self.max_rows:
            raise ValueError("row range must satisfy 1 <= min_rows <= max_rows")
        if not 2 <= self.n_columns <= len(COLUMN_TYPES):
            raise ValueError(f"n_columns must be in [2, {len(COLUMN_TYPES)}]")
        if self.n_first_names * self.n_last_names < self.max_rows:
            raise ValueError("name gazetteer too small for unique athletes per table")
        for name, size, limit in (
            ("n_first_names", self.n_first_names, len(FIRST_NAMES)),
            ("n_last_names", self.n_last_names, len(LAST_NAMES)),
            ("n_countries", self.n_countries, len(COUNTRIES)),
            ("n_events", self.n_events, len(EVENTS)),
        ):
            if not 1 <= size <= limit:
                raise ValueError(f"{name} must be in [1, {limit}]")
        lo, hi = self.year_range
        if lo > hi:
            raise ValueError("empty year range")
        object.__setattr__(self, "year_range", (int(lo), int(hi)))
        if self.templates is not None:
            object.__setattr__(self, "templates", tuple(self.templates))

    @classmethod
    def from_dict(cls, cfg: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**cfg)

    def columns(self) -> tuple[str, ...]:
        return COLUMN_TYPES[: self.n_columns]

    def usable_templates(self) -> list[int]:
        cols = set(self.columns())
        pool = range(len(TEMPLATES)) if self.templates is None else self.templates
        usable = [i for i in pool if set(TEMPLATES[i][2]) <= cols]
        if not usable:
            raise ValueError("no template fits the configured columns")
        return usable


@dataclass(frozen=True)
class SyntheticProvenance:
    """Which cells the template read; the exact entity oracle for a reference."""

    row: int
    columns: tuple[int, ...]


def _synthetic_one(spec: SyntheticSpec, rng: random.Random, idx: int):
    cols = spec.columns()
    n_rows = rng.randint(spec.min_rows, spec.max_rows)
    names = [f"{f} {l}" for f in FIRST_NAMES[: spec.n_first_names] for l in LAST_NAMES[: spec.n_last_names]]
    people = rng.sample(names, n_rows)
    countries = COUNTRIES[: spec.n_countries]
    lo, hi = spec.year_range
    scores = rng.sample(range(500, 1000), n_rows)  # unique per table, rendered as 50.0-99.9
    rows = []
    for r in range(n_rows):
        values = {
            "person": people[r],
            "country": rng.choice(countries),
            "year": str(rng.randint(lo, hi)),
            "score": f"{scores[r] / 10:.1f}",
        }
        rows.append([values[c] for c in cols])
    t_idx = rng.choice(spec.usable_templates())
    question, reference, used = TEMPLATES[t_idx]
    row = rng.randrange(n_rows)
    fill = {c: rows[row][cols.index(c)] for c in used}
    example = TableExample(
        table_id=f"synth-{spec.seed}-{idx:06d}",
        header=[COLUMN_NAMES[c] for c in cols],
        rows=rows,
        metadata={"title": f"{rng.choice(EVENTS[: spec.n_events])} results"},
        query=question.format(**fill),
        reference=reference.format(**fill),
    )
    return example, SyntheticProvenance(row, tuple(cols.index(c) for c in used))


def generate_synthetic_with_provenance(spec: SyntheticSpec):
    rng = random.Random(spec.seed)
    return [_synthetic_one(spec, rng, i) for i in range(spec.n_examples)]


def generate_synthetic(spec: SyntheticSpec) -> list[TableExample]:
    """Seeded FeTaQA-style question/answer examples over small athlete tables."""
    return [ex for ex, _ in generate_synthetic_with_provenance(spec)]
