"""Warmup (likelihood-only) and replacement-aware fine-tuning loops."""

from __future__ import annotations

import json
import logging
import math
import random
import time
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .corpus import TableExample, Vocabulary, detokenize, linearize, tokenize
from .entities import EntityRecognizer
from .losses import (
    LossBreakdown,
    nll_loss,
    r2d2_loss,
    rd_sentence_loss,
    rd_token_loss,
    unlikelihood_loss,
)
from .metrics import NerMetricReport, corpus_bleu, corpus_ner_metrics
from .model import (
    EOS_ID,
    ModelConfig,
    Seq2SeqModel,
    greedy_decode,
    init_from_generator,
    load_checkpoint,
    save_checkpoint,
    teacher_forced_batch,
)
from .perturb import SIZE_CAPS, PerturbationStore, PerturbedSentence, token_labels

log = logging.getLogger(__name__)

DISCRIMINATION = ("none", "sentence", "token")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "warmup"
    epochs: int = 15
    batch_size: int = 8
    lr: float = 5e-5
    optimizer: str = "adam"
    max_grad_norm: float | None = 1.0
    lam: float = 0.5
    discrimination: str = "token"
    unlikelihood: bool = True
    method: str = "knowledge"
    size: str = "medium"
    seed: int = 0
    token_reduction: str = "sum"
    detach_heads: bool = False  # ablation: heads see a detached trunk
    checkpoint_dir: str | None = None
    # generator shape, used when training starts from scratch
    d_model: int = 128
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 512
    dropout: float = 0.1
    copy: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in ("warmup", "r2d2"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.discrimination not in DISCRIMINATION:
            raise ValueError(f"discrimination must be one of {DISCRIMINATION}")
        if self.mode == "r2d2" and self.discrimination == "none" and not self.unlikelihood:
            raise ValueError("r2d2 mode needs discrimination, unlikelihood, or both")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.size not in SIZE_CAPS:
            raise ValueError(f"unknown size '{self.size}'")
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size and lr > 0")
        if self.optimizer not in ("adam", "adamw", "adafactor"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(cfg) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**cfg)

    def model_config(self, vocab_size: int, **heads) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers, d_ff=self.d_ff,
            dropout=self.dropout, seed=self.seed, copy=self.copy, dtype=self.dtype, **heads,
        )


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    loss: dict
    disc_accuracy: float | None
    wall: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Seq2SeqModel
    log: list[TrainLogRecord]
    checkpoints: list[str] = field(default_factory=list)
    heldout: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss["combined"] for r in self.log]


def _optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr)
    return torch.optim.Adafactor(params, lr=cfg.lr)


@dataclass
class Encoded:
    example: TableExample
    source: list[int]
    target: list[int]


def encode_corpus(examples: Sequence[TableExample], vocab: Vocabulary) -> list[Encoded]:
    return [Encoded(ex, list(linearize(ex, vocab).tokens), list(tokenize(ex.reference, vocab).tokens))
            for ex in examples]


def _batches(n: int, batch_size: int, rng: random.Random):
    order = list(range(n))
    rng.shuffle(order)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _step(model, opt, loss, cfg: TrainConfig) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()}")
    opt.zero_grad()
    loss.backward()
    if cfg.max_grad_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
    opt.step()


def _checkpoint(model, cfg: TrainConfig, tag: str, extra: dict) -> str | None:
    if cfg.checkpoint_dir is None:
        return None
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{tag}.ckpt"
    # the output location is not part of the model, so it stays out of the file
    settings = {k: v for k, v in asdict(cfg).items() if k != "checkpoint_dir"}
    save_checkpoint(model, path, extra={"train_config": settings, **extra})
    return str(path)


def _write_log(cfg: TrainConfig, records: Sequence[TrainLogRecord], name: str) -> None:
    if cfg.checkpoint_dir is None:
        return
    path = Path(cfg.checkpoint_dir) / name
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")


def warmup_finetune(
    model: Seq2SeqModel | None,
    corpus: Sequence[TableExample],
    vocab: Vocabulary,
    config: TrainConfig,
) -> TrainResult:
    """Likelihood-only training; one checkpoint per epoch when ``checkpoint_dir`` is set."""
    if config.mode != "warmup":
        raise ValueError("warmup_finetune needs mode='warmup'")
    _set_determinism(config.seed)
    if model is None:
        model = Seq2SeqModel(config.model_config(len(vocab)), vocab)
    data = encode_corpus(corpus, vocab)
    opt = _optimizer(model, config)
    rng = random.Random(config.seed)
    records: list[TrainLogRecord] = []
    ckpts: list[str] = []
    start, step = time.time(), 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        for idx in _batches(len(data), config.batch_size, rng):
            batch = [data[i] for i in idx]
            bt = teacher_forced_batch(model, [b.source for b in batch], [b.target for b in batch])
            gold = bt.gold_log_probs().exp()
            per_ex = torch.stack([
                nll_loss(gold[i][bt.mask[i]], config.token_reduction) for i in range(len(batch))
            ])
            loss = per_ex.double().mean()
            _step(model, opt, loss, config)
            step += 1
            nll = loss.item()
            records.append(TrainLogRecord(
                step, epoch,
                {"nll": nll, "ul": 0.0, "rd": 0.0, "combined": nll, "lambda": 1.0, "n_false": 0},
                None, round(time.time() - start, 3),
            ))
        path = _checkpoint(model, config, f"warmup-epoch{epoch:03d}", {"epoch": epoch})
        if path:
            ckpts.append(path)
    _write_log(config, records, "warmup-log.jsonl")
    model.eval()
    return TrainResult(model, records, ckpts)


# -- R2D2 instance groups ------------------------------------------------------


@dataclass
class Target:
    tokens: list[int]
    sentence_label: int
    token_labels: list[int]  # one per decode step, the last for <eos>
    span_mask: list[int]  # one per decode step
    entailed: bool


@dataclass
class InstanceGroup:
    example_id: str
    source: list[int]
    targets: list[Target]

    @property
    def n_false(self) -> int:
        return len(self.targets) - 1


def build_r2d2_batch(
    example: TableExample,
    perturbations: Sequence[PerturbedSentence],
    config: TrainConfig,
    vocab: Vocabulary,
    encoded: Encoded | None = None,
) -> InstanceGroup:
    """One entailed target plus up to ``cap`` contradictory ones.

    Step labels extend the token labels with the ``<eos>`` step, which takes
    the label of the last token (1 for the entailed sentence).
    """
    enc = encoded or encode_corpus([example], vocab)[0]
    n = len(enc.target)
    targets = [Target(enc.target, 1, [1] * (n + 1), [0] * (n + 1), True)]
    cap = SIZE_CAPS[config.size]
    for p in list(perturbations)[:cap] if cap is not None else perturbations:
        labels = list(p.token_labels)
        mask = list(p.span_mask())
        targets.append(Target(
            list(p.tokens.tokens), 0, labels + [labels[-1] if labels else 0], mask + [0], False,
        ))
    return InstanceGroup(example.table_id, enc.source, targets)


def group_losses(
    model: Seq2SeqModel,
    groups: Sequence[InstanceGroup],
    config: TrainConfig,
) -> tuple[torch.Tensor, list[LossBreakdown], dict]:
    """Combined loss (mean over groups) with per-group breakdowns."""
    sources = [g.source for g in groups]
    flat, src_index = [], []
    for gi, g in enumerate(groups):
        for t in g.targets:
            flat.append(t)
            src_index.append(gi)
    bt = teacher_forced_batch(model, sources, [t.tokens for t in flat], src_index)
    gold = bt.gold_log_probs().exp()
    hidden = bt.hidden.detach() if config.detach_heads else bt.hidden
    tok_p = sent_p = None
    if config.discrimination == "token":
        tok_p = torch.sigmoid(model.token_head(hidden)).squeeze(-1)
    elif config.discrimination == "sentence":
        lengths = bt.mask.sum(1)
        last = hidden[torch.arange(len(flat)), lengths - 1]
        sent_p = torch.sigmoid(model.sentence_head(last)).squeeze(-1)
    red = config.token_reduction
    zero = torch.zeros((), dtype=torch.float64)

    def rd(j: int, t: Target) -> torch.Tensor:
        if tok_p is not None:
            m = bt.mask[j]
            return rd_token_loss(tok_p[j][m], torch.tensor(t.token_labels, dtype=tok_p.dtype), red).double()
        if sent_p is not None:
            return rd_sentence_loss(sent_p[j], float(t.sentence_label)).double()
        return zero

    combined, breakdowns = [], []
    correct = total = 0
    j = 0
    for g in groups:
        parts_ul, parts_rd = [], []
        nll = rd_true = None
        for t in g.targets:
            m = bt.mask[j]
            if t.entailed:
                nll = nll_loss(gold[j][m], red).double()
                rd_true = rd(j, t)
            else:
                span = torch.tensor(t.span_mask, dtype=gold.dtype)
                parts_ul.append(unlikelihood_loss(gold[j][m], span, red).double() if config.unlikelihood else zero)
                parts_rd.append(rd(j, t))
            if tok_p is not None or sent_p is not None:
                n = int(m.sum())
                score = (tok_p[j, n - 1] if tok_p is not None else sent_p[j]).item()
                correct += int((float(score) > 0.5) == bool(t.sentence_label))
                total += 1
            j += 1
        c = r2d2_loss(nll, parts_ul, rd_true, parts_rd, config.lam)
        combined.append(c)
        breakdowns.append(LossBreakdown(
            nll.item(), [u.item() for u in parts_ul], rd_true.item(), [r.item() for r in parts_rd],
            config.lam, c.item(),
        ))
    loss = torch.stack(combined).mean()
    acc = correct / total if total else None
    return loss, breakdowns, {"disc_accuracy": acc}


def summarize(breakdowns: Sequence[LossBreakdown], lam: float) -> dict:
    """Batch-level parts, each pre-divided by its group's ``N + 1``.

    ``combined = lam * (nll + ul) + (1 - lam) * rd`` holds exactly for these.
    """
    k = len(breakdowns)
    nll = sum(b.nll / (b.n_false + 1) for b in breakdowns) / k
    ul = sum(sum(b.ul) / (b.n_false + 1) for b in breakdowns) / k
    rd = sum((b.rd_true + sum(b.rd_false)) / (b.n_false + 1) for b in breakdowns) / k
    return {
        "nll": nll, "ul": ul, "rd": rd, "combined": lam * (nll + ul) + (1 - lam) * rd,
        "lambda": lam, "n_false": sum(b.n_false for b in breakdowns),
    }


def r2d2_finetune(
    warmup_checkpoint: str | Path | Seq2SeqModel,
    corpus: Sequence[TableExample],
    perturbations: PerturbationStore | None,
    config: TrainConfig,
    vocab: Vocabulary | None = None,
    heldout: Sequence[TableExample] | None = None,
    heldout_perturbations: PerturbationStore | None = None,
) -> TrainResult:
    """Fine-tune a warmed-up generator with the combined objective.

    Heads are freshly initialized from ``config.seed``. Examples without
    perturbations contribute their N = 0 terms.
    """
    if config.mode != "r2d2":
        raise ValueError("r2d2_finetune needs mode='r2d2'")
    if perturbations is None:
        raise ValueError("r2d2_finetune needs a perturbation store")
    heads = {"sentence_head": config.discrimination == "sentence", "token_head": config.discrimination == "token"}
    _set_determinism(config.seed)
    if isinstance(warmup_checkpoint, Seq2SeqModel):
        with tempfile.TemporaryDirectory() as tmpdir:
            tmp = Path(tmpdir) / "warmup.ckpt"
            save_checkpoint(warmup_checkpoint, tmp)
            model = init_from_generator(tmp, seed=config.seed, dropout=config.dropout, **heads)
    else:
        model = init_from_generator(warmup_checkpoint, seed=config.seed, dropout=config.dropout, **heads)
    vocab = vocab or model.vocab
    data = encode_corpus(corpus, vocab)
    groups = [build_r2d2_batch(e.example, perturbations.get(e.example.table_id), config, vocab, e) for e in data]
    opt = _optimizer(model, config)
    rng = random.Random(config.seed)
    records: list[TrainLogRecord] = []
    ckpts, held = [], []
    start, step = time.time(), 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        for idx in _batches(len(groups), config.batch_size, rng):
            loss, parts, info = group_losses(model, [groups[i] for i in idx], config)
            _step(model, opt, loss, config)
            step += 1
            records.append(TrainLogRecord(step, epoch, summarize(parts, config.lam), info["disc_accuracy"],
                                          round(time.time() - start, 3)))
        if heldout is not None and heldout_perturbations is not None and config.discrimination != "none":
            auc = discrimination_auc(model, heldout, heldout_perturbations, vocab, config.discrimination)
            held.append({"epoch": epoch, "auc": auc})
            log.info("epoch %d held-out discrimination AUC %.4f", epoch, auc)
        path = _checkpoint(model, config, f"r2d2-epoch{epoch:03d}", {"epoch": epoch})
        if path:
            ckpts.append(path)
    _write_log(config, records, "r2d2-log.jsonl")
    model.eval()
    return TrainResult(model, records, ckpts, held)


# -- held-out diagnostics -------------------------------------------------------


def auc_score(pos: Sequence[float], neg: Sequence[float]) -> float:
    """P(score_pos > score_neg) with ties counted half (Mann-Whitney)."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    if not len(pos) or not len(neg):
        return float("nan")
    ranks = rankdata(np.concatenate([pos, neg]))  # ties get their average rank
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


@torch.no_grad()
def sentence_scores(
    model: Seq2SeqModel,
    examples: Sequence[TableExample],
    store: PerturbationStore,
    vocab: Vocabulary,
    granularity: str,
    batch_size: int = 64,
) -> tuple[list[float], list[float]]:
    """Entailment scores for references (pos) and their perturbations (neg).

    The token head is read at the ``<eos>`` step, i.e. after the whole sentence.
    """
    model.eval()
    items = []
    for ex in examples:
        src = list(linearize(ex, vocab).tokens)
        items.append((src, list(tokenize(ex.reference, vocab).tokens), True))
        for p in store.get(ex.table_id):
            items.append((src, list(p.tokens.tokens), False))
    pos, neg = [], []
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        bt = teacher_forced_batch(model, [c[0] for c in chunk], [c[1] for c in chunk])
        last = bt.hidden[torch.arange(len(chunk)), bt.mask.sum(1) - 1]
        head = model.token_head if granularity == "token" else model.sentence_head
        scores = torch.sigmoid(head(last)).squeeze(-1).tolist()
        for (_, _, entailed), s in zip(chunk, scores):
            (pos if entailed else neg).append(s)
    return pos, neg


def discrimination_auc(model, examples, store, vocab, granularity: str) -> float:
    return auc_score(*sentence_scores(model, examples, store, vocab, granularity))


@torch.no_grad()
def replaced_token_probability(
    model: Seq2SeqModel,
    examples: Sequence[TableExample],
    store: PerturbationStore,
    vocab: Vocabulary,
    batch_size: int = 64,
) -> float:
    """Mean teacher-forced generator probability of replaced-span tokens."""
    model.eval()
    items = []
    for ex in examples:
        src = list(linearize(ex, vocab).tokens)
        for p in store.get(ex.table_id):
            items.append((src, list(p.tokens.tokens), p.span_mask()))
    total, count = 0.0, 0
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        bt = teacher_forced_batch(model, [c[0] for c in chunk], [c[1] for c in chunk])
        gold = bt.gold_log_probs().exp().double()
        for j, (_, _, mask) in enumerate(chunk):
            m = torch.tensor(mask, dtype=torch.bool)
            total += float(gold[j, : len(mask)][m].sum())
            count += int(m.sum())
    return total / count if count else float("nan")


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    ner: NerMetricReport
    bleu: float
    predictions: list[str]

    def summary(self) -> dict:
        return {"bleu": self.bleu, **self.ner.values(), "averaging": self.ner.averaging}


def generate(model: Seq2SeqModel, examples: Sequence[TableExample], vocab: Vocabulary,
             batch_size: int = 64, max_len: int = 32) -> list[str]:
    out = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        ids = greedy_decode(model, [list(linearize(ex, vocab).tokens) for ex in chunk], max_len)
        out.extend(detokenize([vocab.token(t) for t in seq]) for seq in ids)
    return out


def evaluate_checkpoint(
    checkpoint: str | Path | Seq2SeqModel,
    examples: Sequence[TableExample],
    recognizer: EntityRecognizer | None = None,
    dump_path: str | Path | None = None,
    averaging: str = "micro",
) -> EvalResult:
    """Greedy-decode ``examples`` and score entity metrics and BLEU."""
    model = checkpoint if isinstance(checkpoint, Seq2SeqModel) else load_checkpoint(checkpoint)
    vocab = model.vocab
    if vocab is None:
        raise ValueError("checkpoint carries no vocabulary")
    preds = generate(model, examples, vocab)
    report = corpus_ner_metrics(examples, preds, recognizer, averaging=averaging, vocab=vocab)
    bleu = corpus_bleu(preds, [ex.reference for ex in examples])
    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8", newline="\n") as fh:
            for ex, p, ev in zip(examples, preds, report.evidence):
                fh.write(json.dumps({"table_id": ex.table_id, "query": ex.query, "reference": ex.reference,
                                     "prediction": p, "entities": ev}, ensure_ascii=False) + "\n")
    return EvalResult(report, bleu, preds)
