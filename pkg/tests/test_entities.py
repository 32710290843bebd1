import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faithd2t.corpus import SyntheticSpec, TableExample, Vocabulary, generate_synthetic, tokenize
from faithd2t.entities import (
    EntitySpan,
    PreExtractedRecognizer,
    check_spans,
    extract_entities,
    load_recognizer,
    normalize_entity,
    register_recognizer,
    surface_lookup,
    table_entities,
    table_entity_sets,
)


def table(rows, header=None, ref="x"):
    header = header or [f"c{i}" for i in range(len(rows[0]))]
    return TableExample("t", header, rows, ref)


def seq(text):
    return tokenize(text, Vocabulary.build([text]))


class TestNormalize:
    def test_rules(self):
        assert normalize_entity("The Netherlands ") == "netherlands"
        assert normalize_entity("1998.") == "1998"
        assert normalize_entity("  New   Zealand") == "new zealand"
        assert normalize_entity("the") == "the"

    @settings(max_examples=1000, deadline=None)
    @given(st.text(max_size=30))
    def test_idempotent(self, s):
        once = normalize_entity(s)
        assert normalize_entity(once) == once


class TestExtract:
    def test_exhaustive_match(self):
        ex = table([["Sweden", "1998"], ["Norway", "2002"]])
        spans = extract_entities(seq("sweden won in 1998"), ex)
        assert [(s.start, s.end, s.normalized) for s in spans] == [(0, 1, "sweden"), (3, 4, "1998")]
        # oracle: every single-token cell that occurs in the sentence
        cells = {normalize_entity(v) for _, _, v in ex.cells()}
        assert {s.normalized for s in spans} == cells & set("sweden won in 1998".split())

    def test_no_overlap(self):
        assert extract_entities(seq("nothing here"), table([["Sweden"]])) == []
        assert extract_entities(seq("Sweden"), None) == []

    def test_leftmost_longest(self):
        ex = table([["New York"], ["York"]])
        spans = extract_entities(seq("she moved to new york"), ex)
        assert [(s.start, s.end, s.normalized) for s in spans] == [(3, 5, "new york")]

    def test_contract_on_synthetic(self):
        exs = generate_synthetic(SyntheticSpec(seed=9, n_examples=200))
        vocab = Vocabulary.from_examples(exs)
        for ex in exs:
            y = tokenize(ex.reference, vocab)
            spans = extract_entities(y, ex)
            check_spans(spans, len(y))
            assert all(s.normalized in table_entities(ex) for s in spans)

    def test_check_spans(self):
        s = seq("a b c")
        with pytest.raises(ValueError):
            check_spans([EntitySpan.of(s, 0, 2), EntitySpan.of(s, 1, 3)], 3)
        with pytest.raises(ValueError):
            check_spans([EntitySpan(2, 5, "x", "x")], 3)
        with pytest.raises(ValueError):
            EntitySpan(2, 2, "", "")


class TestTableSets:
    def test_dedup_and_shape(self):
        sets = table_entity_sets(table([["Sweden", "1"], ["Norway", "2"], ["Sweden", "3"]]))
        assert sets[0] == {"sweden", "norway"}
        assert len(sets) == 2

    def test_union_is_cell_scan(self):
        for ex in generate_synthetic(SyntheticSpec(seed=1, n_examples=50)):
            brute = set()
            for row in ex.rows:
                for value in row:
                    brute.add(normalize_entity(value))
            assert table_entities(ex) == brute

    def test_highlighted_only(self):
        ex = TableExample("t", ["a", "b"], [["x", "y"], ["z", "w"]], "r", highlighted_cells=[(1, 0)])
        assert table_entity_sets(ex, highlighted_only=True) == {0: {"z"}, 1: set()}
        assert table_entity_sets(ex)[1] == {"y", "w"}

    def test_surface_lookup(self):
        assert surface_lookup(table([["New Zealand"]]))["new zealand"] == "New Zealand"


class TestPlugins:
    def test_pre_extracted(self, tmp_path):
        path = tmp_path / "ents.jsonl"
        path.write_text(json.dumps({"id": "t", "spans": [[2, 3], [0, 1]]}) + "\n\n")
        rec = load_recognizer("file", path=path)
        assert isinstance(rec, PreExtractedRecognizer)
        spans = extract_entities(seq("alpha beta gamma"), table([["q"]]), rec)
        assert [s.normalized for s in spans] == ["alpha", "gamma"]
        other = TableExample("other", ["a"], [["q"]], "r")
        assert extract_entities(seq("alpha"), other, rec) == []

    def test_pre_extracted_bad_line(self, tmp_path):
        path = tmp_path / "ents.jsonl"
        path.write_text(json.dumps({"id": "t"}) + "\n")
        with pytest.raises(ValueError, match=":1:"):
            PreExtractedRecognizer(path)

    def test_registry(self):
        class Everything:
            name = "all"

            def extract(self, sentence, context=None):
                return [EntitySpan.of(sentence, i, i + 1) for i in range(len(sentence))]

        register_recognizer("all", Everything)
        assert len(extract_entities(seq("a b"), None, load_recognizer("all"))) == 2
        with pytest.raises(ValueError, match="unknown recognizer"):
            load_recognizer("nope")
