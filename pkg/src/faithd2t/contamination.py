"""Reference contamination harness for testing metric sensitivity to unfaithfulness."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .corpus import TableExample, Vocabulary
from .entities import EntityRecognizer
from .metrics import corpus_bleu, corpus_ner_metrics
from .perturb import example_rng, generate_perturbations, pick_parallel

DEFAULT_PERCENTAGES = (0, 25, 50, 75, 100)


@dataclass(frozen=True)
class ContaminationPlan:
    percentages: tuple[float, ...] = DEFAULT_PERCENTAGES
    seed: int = 0

    def __post_init__(self):
        pct = tuple(float(p) for p in self.percentages)
        if list(pct) != sorted(pct) or len(set(pct)) != len(pct):
            raise ValueError("percentages must be strictly ascending")
        if any(p < 0 or p > 100 for p in pct):
            raise ValueError("percentages must lie in [0, 100]")
        object.__setattr__(self, "percentages", pct)


@dataclass
class Variants:
    sentences: dict[float, list[str]]
    replaced: dict[float, set[int]]
    kept: list[int]  # indices into the original references
    excluded: int


def build_variants(
    references: Sequence[str], parallels: Sequence[str | None], plan: ContaminationPlan
) -> Variants:
    """For each percentage p, swap ``floor(p * n / 100)`` references for their parallels.

    References without a parallel are dropped from every variant. One seeded
    permutation orders the swaps, so lower-percentage swap sets are prefixes
    of higher ones.
    """
    if len(references) != len(parallels):
        raise ValueError("references and parallels differ in length")
    kept = [i for i, p in enumerate(parallels) if p is not None]
    n = len(kept)
    order = np.random.default_rng(plan.seed).permutation(n)
    sentences, replaced = {}, {}
    for pct in plan.percentages:
        k = math.floor(pct * n / 100 + 1e-9)
        swap = set(int(j) for j in order[:k])
        replaced[pct] = swap
        sentences[pct] = [parallels[i] if j in swap else references[i] for j, i in enumerate(kept)]
    return Variants(sentences, replaced, kept, len(references) - n)


def knowledge_parallels(
    examples: Sequence[TableExample],
    vocab: Vocabulary,
    seed: int,
    recognizer: EntityRecognizer | None = None,
) -> list[str | None]:
    """One unfaithful version per reference: replace its latest entity from the table."""
    out = []
    for ex in examples:
        perturbed = generate_perturbations(
            ex, "knowledge", "full", vocab=vocab, rng=example_rng(seed, ex.table_id), recognizer=recognizer
        )
        chosen = pick_parallel(perturbed)
        out.append(chosen.text if chosen is not None else None)
    return out


Evaluator = Callable[[Sequence[str], Sequence[str], Sequence[TableExample]], Mapping[str, float]]


def bleu_evaluator(predictions, references, examples) -> dict[str, float]:
    return {"bleu": corpus_bleu(predictions, references)}


def ner_evaluator(recognizer: EntityRecognizer | None = None, vocab: Vocabulary | None = None) -> Evaluator:
    def evaluate(predictions, references, examples):
        return corpus_ner_metrics(examples, predictions, recognizer, vocab=vocab).values()

    return evaluate


@dataclass
class ReliabilityTable:
    percentages: list[float]
    metrics: list[str]
    values: dict[float, dict[str, float]]
    trend: dict[str, float] = field(default_factory=dict)  # Spearman of metric vs percentage
    excluded: int = 0

    def column(self, metric: str) -> list[float]:
        return [self.values[p][metric] for p in self.percentages]

    def to_dict(self) -> dict:
        return {
            "percentages": self.percentages,
            "metrics": self.metrics,
            "rows": [{"percent": p, **self.values[p]} for p in self.percentages],
            "spearman_vs_percent": self.trend,
            "excluded": self.excluded,
        }

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def format(self) -> str:
        head = "% unfaithful | " + " | ".join(f"{m:>7}" for m in self.metrics)
        lines = [head, "-" * len(head)]
        for p in self.percentages:
            lines.append(f"{p:>12g} | " + " | ".join(f"{self.values[p][m]:7.2f}" for m in self.metrics))
        return "\n".join(lines)


def reliability_table(
    variants: Variants,
    examples: Sequence[TableExample],
    evaluators: Mapping[str, Evaluator] | Sequence[Evaluator],
) -> ReliabilityTable:
    """Score every variant against the original references.

    ``examples`` are the full example list; only the kept ones are used.
    """
    kept_examples = [examples[i] for i in variants.kept]
    references = [ex.reference for ex in kept_examples]
    evals = list(evaluators.values()) if isinstance(evaluators, Mapping) else list(evaluators)
    percentages = sorted(variants.sentences)
    values: dict[float, dict[str, float]] = {}
    for pct in percentages:
        row: dict[str, float] = {}
        for ev in evals:
            row.update({k: float(v) for k, v in ev(variants.sentences[pct], references, kept_examples).items()})
        values[pct] = row
    metrics = list(values[percentages[0]]) if percentages else []
    trend = {}
    for m in metrics:
        col = [values[p][m] for p in percentages]
        trend[m] = float(stats.spearmanr(percentages, col)[0]) if np.ptp(col) > 0 else 0.0
    return ReliabilityTable(percentages, metrics, values, trend, variants.excluded)


def run_contamination(
    examples: Sequence[TableExample],
    plan: ContaminationPlan,
    vocab: Vocabulary | None = None,
    recognizer: EntityRecognizer | None = None,
) -> ReliabilityTable:
    vocab = vocab or Vocabulary.from_examples(examples)
    parallels = knowledge_parallels(examples, vocab, plan.seed, recognizer)
    variants = build_variants([ex.reference for ex in examples], parallels, plan)
    return reliability_table(
        variants, examples, {"bleu": bleu_evaluator, "ner": ner_evaluator(recognizer, vocab)}
    )
