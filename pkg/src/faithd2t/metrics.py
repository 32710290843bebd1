"""Entity-level faithfulness metrics, corpus BLEU, external scorers and correlations."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .corpus import TableExample, Vocabulary, split_tokens, tokenize
from .entities import EntityRecognizer, entity_set, table_entities

NER_KEYS = ("rc", "ri", "rm", "mi", "mm")


@dataclass
class NerMetricReport:
    """Percentages in [0, 100].

    RC is the share of reference entities found in the prediction. RI, RM,
    MI and MM split the predicted entities by (in reference?) x (in input?).
    """

    rc: float
    ri: float
    rm: float
    mi: float
    mm: float
    averaging: str = "single"
    empty_prediction: bool = False
    empty_reference: bool = False
    counts: dict = field(default_factory=dict)
    evidence: list = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in NER_KEYS}

    def as_dict(self, with_evidence: bool = False) -> dict:
        d = {**self.values(), "averaging": self.averaging, "empty_prediction": self.empty_prediction,
             "empty_reference": self.empty_reference, "counts": dict(self.counts)}
        if with_evidence:
            d["evidence"] = self.evidence
        return d


def _ner_counts(pred: set, ref: set, inp: set) -> dict[str, int]:
    return {
        "ref": len(ref),
        "pred": len(pred),
        "ref_hit": len(ref & pred),
        "ri": len(pred & ref & inp),
        "rm": len((pred & ref) - inp),
        "mi": len((pred & inp) - ref),
        "mm": len(pred - ref - inp),
    }


def _report_from_counts(c: Mapping[str, int], averaging: str) -> NerMetricReport:
    empty_ref = c["ref"] == 0
    empty_pred = c["pred"] == 0
    rc = 100.0 if empty_ref else 100.0 * c["ref_hit"] / c["ref"]
    if empty_pred:
        parts = dict.fromkeys(("ri", "rm", "mi", "mm"), 0.0)
    else:
        parts = {k: 100.0 * c[k] / c["pred"] for k in ("ri", "rm", "mi", "mm")}
    return NerMetricReport(rc=rc, **parts, averaging=averaging, empty_prediction=empty_pred,
                           empty_reference=empty_ref, counts=dict(c))


def ner_metrics(pred_entities: set[str], ref_entities: set[str], input_entities: set[str]) -> NerMetricReport:
    pred, ref, inp = set(pred_entities), set(ref_entities), set(input_entities)
    report = _report_from_counts(_ner_counts(pred, ref, inp), "single")
    report.evidence = [{"pred": sorted(pred), "ref": sorted(ref), "input": sorted(inp)}]
    return report


def example_entity_sets(
    example: TableExample, prediction: str, recognizer: EntityRecognizer | None, vocab: Vocabulary | None
) -> tuple[set[str], set[str], set[str]]:
    vocab = vocab or Vocabulary()
    pred = entity_set(tokenize(prediction, vocab), example, recognizer)
    ref = entity_set(tokenize(example.reference, vocab), example, recognizer)
    return pred, ref, table_entities(example)


def corpus_ner_metrics(
    examples: Sequence[TableExample],
    predictions: Sequence[str],
    recognizer: EntityRecognizer | None = None,
    *,
    averaging: str = "micro",
    vocab: Vocabulary | None = None,
) -> NerMetricReport:
    """Corpus-level RC/RI/RM/MI/MM.

    ``micro`` pools entity counts over all examples before dividing;
    ``macro`` averages per-example percentages (examples whose denominator is
    empty are skipped for the affected metrics).
    """
    if len(examples) != len(predictions):
        raise ValueError(f"{len(examples)} examples but {len(predictions)} predictions")
    if averaging not in ("micro", "macro"):
        raise ValueError("averaging must be 'micro' or 'macro'")
    evidence = []
    per_example = []
    for ex, pred_text in zip(examples, predictions):
        pred, ref, inp = example_entity_sets(ex, pred_text, recognizer, vocab)
        evidence.append({"id": ex.table_id, "pred": sorted(pred), "ref": sorted(ref), "input": sorted(inp)})
        per_example.append(_ner_counts(pred, ref, inp))
    pooled = Counter()
    for c in per_example:
        pooled.update(c)
    pooled = {k: pooled.get(k, 0) for k in ("ref", "pred", "ref_hit", "ri", "rm", "mi", "mm")}
    if averaging == "micro" or not per_example:
        report = _report_from_counts(pooled, averaging)
    else:
        reports = [_report_from_counts(c, "single") for c in per_example]
        rc = [r.rc for r, c in zip(reports, per_example) if c["ref"]]
        part = [r for r, c in zip(reports, per_example) if c["pred"]]
        report = NerMetricReport(
            rc=float(np.mean(rc)) if rc else 100.0,
            **{k: float(np.mean([getattr(r, k) for r in part])) if part else 0.0 for k in ("ri", "rm", "mi", "mm")},
            averaging="macro", empty_prediction=not part, empty_reference=not rc, counts=pooled,
        )
    report.evidence = evidence
    return report


# -- BLEU --------------------------------------------------------------------

BLEU_SMOOTH = 0.1


def bleu_tokens(text: str) -> list[str]:
    return [t.lower() for t in split_tokens(text)]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(predictions: Sequence[str], references: Sequence[str], max_n: int = 4):
    correct = [0] * max_n
    total = [0] * max_n
    sys_len = ref_len = 0
    for hyp, ref in zip(predictions, references):
        h, r = bleu_tokens(hyp), bleu_tokens(ref)
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    return correct, total, sys_len, ref_len


def corpus_bleu(predictions: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] over lowercased word/punctuation tokens.

    Clipped n-gram precisions, geometric mean, brevity penalty. Zero
    precisions are floored at ``0.1 / total``; no unigram match at all
    scores 0.
    """
    if not predictions:
        raise ValueError("corpus_bleu needs a non-empty corpus")
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    correct, total, sys_len, ref_len = bleu_statistics(predictions, references, max_n)
    if sys_len == 0 or not any(correct):
        return 0.0
    bp = 1.0 if sys_len >= ref_len else math.exp(1 - ref_len / sys_len)
    log_sum = 0.0
    for c, t in zip(correct, total):
        if t == 0:
            return 0.0
        p = c / t if c else BLEU_SMOOTH / t
        log_sum += math.log(p)
    return 100.0 * bp * math.exp(log_sum / max_n)


# -- external scorers ---------------------------------------------------------


class ScorerError(ValueError):
    pass


@dataclass
class Scorer:
    name: str
    fn: Callable[[Sequence[str], Sequence[str], Sequence], Sequence[float] | float]
    value_range: tuple[float, float] = (-math.inf, math.inf)


@dataclass
class ExternalScores:
    name: str
    values: list[float]
    provenance: dict


_SCORERS: dict[str, Scorer] = {}


def register_scorer(name: str, fn, value_range: tuple[float, float] = (-math.inf, math.inf)) -> None:
    _SCORERS[name] = Scorer(name, fn, value_range)


def available_scorers() -> list[str]:
    return sorted(_SCORERS)


def read_prescored(path: str | Path) -> list[float]:
    """One score per line: a bare number or a JSON object with a ``score`` field."""
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                val = json.loads(line)
                values.append(float(val["score"] if isinstance(val, dict) else val))
            except (ValueError, KeyError, TypeError):
                raise ScorerError(f"{path}:{lineno}: not a score") from None
    return values


def external_score(
    scorer_name: str | None,
    predictions: Sequence[str],
    references: Sequence[str],
    inputs: Sequence = (),
    *,
    prescored: str | Path | None = None,
) -> ExternalScores:
    """Pass scores from a registered plugin or a pre-scored file through unchanged."""
    if prescored is not None:
        values = read_prescored(prescored)
        if len(values) != len(predictions):
            raise ScorerError(f"{prescored}: {len(values)} scores for {len(predictions)} predictions")
        return ExternalScores(scorer_name or "prescored", values, {"source": "file", "path": str(prescored)})
    if scorer_name not in _SCORERS:
        raise ScorerError(f"unknown scorer '{scorer_name}'; available: {available_scorers()}")
    scorer = _SCORERS[scorer_name]
    raw = scorer.fn(predictions, references, inputs)
    values = [float(raw)] if np.isscalar(raw) else [float(v) for v in raw]
    lo, hi = scorer.value_range
    bad = [(i, v) for i, v in enumerate(values) if not (lo <= v <= hi) or math.isnan(v)]
    if bad:
        i, v = bad[0]
        raise ScorerError(f"scorer '{scorer_name}' returned {v} at index {i}, outside [{lo}, {hi}]")
    return ExternalScores(scorer_name, values, {"source": "plugin", "scorer": scorer_name,
                                                "range": [lo, hi]})


# -- correlation --------------------------------------------------------------


@dataclass
class CorrelationReport:
    names: list[str]
    pearson: dict[tuple[str, str], float]
    spearman: dict[tuple[str, str], float]

    def rows(self) -> list[dict]:
        return [
            {"a": a, "b": b, "pearson": self.pearson[(a, b)], "spearman": self.spearman[(a, b)]}
            for a in self.names for b in self.names if a < b or a == b
        ]


def _corr(fn, x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(fn(x, y)[0])


def correlation_report(
    metric_series: Mapping[str, Sequence[float]],
    scatter_path: str | Path | None = None,
    variants: Sequence | None = None,
) -> CorrelationReport:
    """Pairwise Pearson and Spearman coefficients between metric series.

    With ``scatter_path``, writes one ``{"variant", "metric", "value"}`` line
    per point for external plotting.
    """
    lengths = {len(v) for v in metric_series.values()}
    if len(lengths) > 1:
        raise ValueError(f"metric series differ in length: { {k: len(v) for k, v in metric_series.items()} }")
    names = list(metric_series)
    pearson, spearman = {}, {}
    for a in names:
        for b in names:
            pearson[(a, b)] = _corr(stats.pearsonr, metric_series[a], metric_series[b])
            spearman[(a, b)] = _corr(stats.spearmanr, metric_series[a], metric_series[b])
    if scatter_path is not None:
        n = lengths.pop() if lengths else 0
        labels = list(variants) if variants is not None else list(range(n))
        with open(scatter_path, "w", encoding="utf-8", newline="\n") as fh:
            for i in range(n):
                for name in names:
                    fh.write(json.dumps({"variant": labels[i], "metric": name,
                                         "value": float(metric_series[name][i])}) + "\n")
    return CorrelationReport(names, pearson, spearman)
