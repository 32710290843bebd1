import json

import pytest

from faithd2t.contamination import (
    ContaminationPlan,
    build_variants,
    knowledge_parallels,
    reliability_table,
    bleu_evaluator,
    run_contamination,
)
from faithd2t.corpus import SyntheticSpec, TableExample, Vocabulary, generate_synthetic

EXS = generate_synthetic(SyntheticSpec(seed=21, n_examples=120))


class TestVariants:
    def test_counts_and_nesting(self):
        refs = [f"r{i}" for i in range(10)]
        pars = [f"p{i}" if i != 3 else None for i in range(10)]
        v = build_variants(refs, pars, ContaminationPlan((0, 25, 50, 75, 100), seed=1))
        assert v.excluded == 1 and len(v.kept) == 9
        sizes = [len(v.replaced[p]) for p in (0.0, 25.0, 50.0, 75.0, 100.0)]
        assert sizes == [0, 2, 4, 6, 9]
        pcts = sorted(v.replaced)
        for lo, hi in zip(pcts, pcts[1:]):
            assert v.replaced[lo] <= v.replaced[hi]
        assert v.sentences[0.0] == [r for r in refs if r != "r3"]
        assert all(s.startswith("p") for s in v.sentences[100.0])

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            ContaminationPlan((50, 25))
        with pytest.raises(ValueError):
            ContaminationPlan((0, 120))
        with pytest.raises(ValueError):
            build_variants(["a"], [], ContaminationPlan())

    def test_parallels_are_latest_entity(self):
        vocab = Vocabulary.from_examples(EXS)
        pars = knowledge_parallels(EXS[:30], vocab, seed=0)
        for ex, par in zip(EXS[:30], pars):
            assert par is not None and par != ex.reference
            # replacing the latest entity keeps the reference's first word
            assert par.split()[0] == ex.reference.split()[0]

    def test_no_parallel_excluded(self):
        ex = TableExample("x", ["A"], [["Kenya"]], "Kenya won")
        assert knowledge_parallels([ex], Vocabulary.from_examples([ex]), 0) == [None]


class TestHarness:
    def test_trends(self, tmp_path):
        table = run_contamination(EXS, ContaminationPlan(seed=3))
        assert table.values[0.0]["bleu"] == pytest.approx(100.0)
        assert table.values[0.0]["rc"] == 100.0
        for metric, sign in (("bleu", -1), ("rc", -1), ("ri", -1), ("mi", 1)):
            col = table.column(metric)
            assert all(sign * (b - a) > 0 for a, b in zip(col, col[1:])), (metric, col)
            assert table.trend[metric] == pytest.approx(sign, abs=1e-12)
        path = tmp_path / "t.json"
        table.write(path)
        data = json.loads(path.read_text())
        assert [r["percent"] for r in data["rows"]] == [0.0, 25.0, 50.0, 75.0, 100.0]
        assert "% unfaithful" in table.format()

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        run_contamination(EXS[:60], ContaminationPlan(seed=5)).write(a)
        run_contamination(EXS[:60], ContaminationPlan(seed=5)).write(b)
        assert a.read_bytes() == b.read_bytes()

    def test_custom_evaluators(self):
        v = build_variants(["a b c d", "e f g h"], ["a b c x", "e f g y"], ContaminationPlan((0, 100)))
        ex = [TableExample(str(i), ["A"], [["a"]], r) for i, r in enumerate(["a b c d", "e f g h"])]
        t = reliability_table(v, ex, [bleu_evaluator])
        assert t.metrics == ["bleu"] and t.values[0.0]["bleu"] == pytest.approx(100.0)
        assert t.values[100.0]["bleu"] < 100.0
