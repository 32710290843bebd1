"""Small transformer encoder-decoder with optional replacement-detection heads."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import BOS, EOS, PAD, TokenSequence, Vocabulary

CHECKPOINT_MAGIC = b"FD2TCKPT"
CHECKPOINT_VERSION = 1
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
META_ID, ROW_ID = 5, 6  # fixed positions of <meta> and <row> among the reserved tokens
N_RESERVED = 8
MAX_ROWS = 64


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 512
    dropout: float = 0.1
    max_len: int = 256
    seed: int = 0
    copy: bool = True
    row_bias: bool = True
    query_match: bool = True
    selective_read: bool = True
    sentence_head: bool = False
    token_head: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "enc_layers", "dec_layers", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def generator_part(self) -> dict:
        d = asdict(self)
        for k in ("sentence_head", "token_head", "seed", "dropout"):
            d.pop(k)
        return d


@dataclass
class DecodeTrace:
    """Teacher-forced pass over one target.

    ``probs[t]`` is the next-token distribution for step ``t`` (sees targets
    before ``t``); ``hidden[t]`` is the final decoder state after consuming
    target ``t`` and is what the detection heads read.
    """

    probs: torch.Tensor  # [T, V]
    hidden: torch.Tensor  # [T, d]
    targets: torch.Tensor  # [T]

    def __post_init__(self):
        if not (len(self.probs) == len(self.hidden) == len(self.targets)):
            raise ValueError("trace components differ in length")

    def __len__(self):
        return len(self.targets)

    def gold_probs(self) -> torch.Tensor:
        return self.probs.gather(1, self.targets[:, None]).squeeze(1)


@dataclass
class DiscriminatorOutput:
    sentence_prob: torch.Tensor | None
    token_probs: torch.Tensor | None


class Seq2SeqModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None):
        super().__init__()
        self.config = config
        self.vocab = vocab
        dtype = torch.float64 if config.dtype == "float64" else torch.float32
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            d = config.d_model
            self.embed = nn.Embedding(config.vocab_size, d, padding_idx=PAD_ID)
            nn.init.normal_(self.embed.weight, std=d**-0.5)
            self.src_pos = nn.Embedding(config.max_len, d)
            self.src_row = nn.Embedding(MAX_ROWS + 1, d)
            self.src_match = nn.Embedding(2, d) if config.query_match else None
            self.tgt_pos = nn.Embedding(config.max_len + 2, d)
            enc_layer = nn.TransformerEncoderLayer(
                d, config.n_heads, config.d_ff, config.dropout, batch_first=True, norm_first=True
            )
            dec_layer = nn.TransformerDecoderLayer(
                d, config.n_heads, config.d_ff, config.dropout, batch_first=True, norm_first=True
            )
            self.encoder = nn.TransformerEncoder(
                enc_layer, config.enc_layers, norm=nn.LayerNorm(d), enable_nested_tensor=False
            )
            self.decoder = nn.TransformerDecoder(dec_layer, config.dec_layers, norm=nn.LayerNorm(d))
            self.out_bias = nn.Parameter(torch.zeros(config.vocab_size))
            if config.row_bias:
                # per-head additive attention bias between tokens of the same table row;
                # half the heads start strongly row-local
                init = [4.0 if h < config.n_heads // 2 else 0.0 for h in range(config.n_heads)]
                self.row_bias = nn.Parameter(torch.tensor(init))
            if config.copy:
                self.copy_query = nn.Linear(d, d, bias=False)
                self.copy_key = nn.Linear(d, d, bias=False)
                self.copy_gate = nn.Linear(d, 1)
            self.sentence_head = nn.Linear(d, 1) if config.sentence_head else None
            self.token_head = nn.Linear(d, 1) if config.token_head else None
        self.to(dtype)
        self._memo: tuple | None = None

    # -- core passes -----------------------------------------------------

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        if src.shape[1] > self.config.max_len:
            raise ValueError(f"source length {src.shape[1]} exceeds max_len {self.config.max_len}")
        pos = torch.arange(src.shape[1])
        # tokens after the k-th <row> marker share row embedding k; 0 before any row
        rows = (src == ROW_ID).cumsum(1).clamp_max(MAX_ROWS)
        x = self.embed(src) * math.sqrt(self.config.d_model) + self.src_pos(pos) + self.src_row(rows)
        if self.src_match is not None:
            x = x + self.src_match(query_match(src).long())
        mask = None
        if self.config.row_bias:
            same = (rows[:, :, None] == rows[:, None, :]) & (rows[:, :, None] > 0)
            bias = same[:, None].to(x.dtype) * self.row_bias[None, :, None, None]
            mask = bias.masked_fill(src_pad[:, None, None, :], float("-inf"))
            mask = mask.reshape(-1, src.shape[1], src.shape[1])
            src_pad = None
        # the inference fast path does not apply per-head float masks the way the
        # training path does, so keep both modes on the same code path
        fast = torch.backends.mha.get_fastpath_enabled()
        torch.backends.mha.set_fastpath_enabled(False)
        try:
            return self.encoder(x, mask=mask, src_key_padding_mask=src_pad)
        finally:
            torch.backends.mha.set_fastpath_enabled(fast)

    def decode(self, tgt_in, memory, mem_pad, tgt_pad=None, src=None) -> torch.Tensor:
        T = tgt_in.shape[1]
        if T > self.config.max_len + 2:
            raise ValueError(f"target length {T} exceeds max_len {self.config.max_len}")
        pos = torch.arange(T)
        y = self.embed(tgt_in) * math.sqrt(self.config.d_model) + self.tgt_pos(pos)
        if self.config.selective_read:
            if src is None:
                raise ValueError("selective read needs the source ids")
            y = y + selective_read(tgt_in, src, memory)
        causal = torch.ones(T, T, dtype=torch.bool).triu(1)
        return self.decoder(
            y, memory, tgt_mask=causal, tgt_key_padding_mask=tgt_pad,
            memory_key_padding_mask=mem_pad,
        )

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.embed.weight.T + self.out_bias

    def log_probs(self, hidden, memory, mem_pad, src) -> torch.Tensor:
        """Next-token log-distribution; mixes in a pointer over source tokens when ``copy`` is on."""
        vocab_lp = torch.log_softmax(self.logits(hidden), -1)
        if not self.config.copy:
            return vocab_lp
        scores = self.copy_query(hidden) @ self.copy_key(memory).transpose(1, 2)
        scores = scores / math.sqrt(self.config.d_model)
        scores = scores.masked_fill(mem_pad[:, None, :], float("-inf"))
        attn = torch.softmax(scores, -1)  # [B, T, S]
        copy = torch.zeros_like(vocab_lp).scatter_add(2, src[:, None, :].expand_as(attn), attn)
        gate = torch.sigmoid(self.copy_gate(hidden))
        mixed = gate * vocab_lp.exp() + (1 - gate) * copy
        return torch.log(mixed.clamp_min(1e-30))

    # -- single-sequence helpers ----------------------------------------

    def _memory(self, src_ids: Sequence[int]):
        key = tuple(int(i) for i in src_ids)
        if self._memo is None or self._memo[0] != key or self.training:
            src = torch.tensor([key], dtype=torch.long)
            pad = torch.zeros_like(src, dtype=torch.bool)
            self._memo = (key, self.encode(src, pad), pad, src)
        return self._memo[1:]

    @torch.no_grad()
    def next_token_probs(self, src_ids: Sequence[int], prefix_ids: Sequence[int]) -> np.ndarray:
        """Next-token distribution after ``<bos> + prefix`` (evaluation mode)."""
        memory, pad, src = self._memory(src_ids)
        tgt = torch.tensor([[BOS_ID, *prefix_ids]], dtype=torch.long)
        h = self.decode(tgt, memory, pad, src=src)[:, -1:]
        p = self.log_probs(h, memory, pad, src)[0, -1].double().exp()
        return (p / p.sum()).numpy()

    def invalidate_cache(self):
        self._memo = None

    def train(self, mode: bool = True):
        self._memo = None
        return super().train(mode)


def query_match(src: torch.Tensor) -> torch.Tensor:
    """Flags table/metadata tokens whose id also occurs in the leading query segment."""
    in_query = ((src == META_ID) | (src == ROW_ID)).cumsum(1) == 0
    content = src >= N_RESERVED
    q = torch.where(in_query & content, src, torch.full_like(src, -1))
    hit = (src[:, :, None] == q[:, None, :]).any(-1)
    return hit & content & ~in_query


def selective_read(tgt_in: torch.Tensor, src: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    """Mean encoder state over the source positions holding each decoder input token.

    Zero for tokens absent from the content part of the source.
    """
    hit = (tgt_in[:, :, None] == src[:, None, :]) & (src[:, None, :] >= N_RESERVED)
    hit = hit.to(memory.dtype)
    return (hit @ memory) / hit.sum(-1, keepdim=True).clamp_min(1.0)


def _pad(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> tuple[torch.Tensor, torch.Tensor]:
    width = max((len(s) for s in seqs), default=0)
    ids = torch.full((len(seqs), max(width, 1)), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, ids == pad


@dataclass
class BatchTrace:
    """Batched teacher-forced outputs; row ``i`` has ``lengths[i]`` valid steps."""

    log_probs: torch.Tensor  # [B, T, V]
    hidden: torch.Tensor  # [B, T, d]
    targets: torch.Tensor  # [B, T]
    mask: torch.Tensor  # [B, T] True on valid steps

    def gold_log_probs(self) -> torch.Tensor:
        return self.log_probs.gather(2, self.targets[..., None]).squeeze(2)

    def trace(self, i: int) -> DecodeTrace:
        n = int(self.mask[i].sum())
        return DecodeTrace(self.log_probs[i, :n].exp(), self.hidden[i, :n], self.targets[i, :n])


def teacher_forced_batch(
    model: Seq2SeqModel,
    sources: Sequence[Sequence[int]],
    targets: Sequence[Sequence[int]],
    source_index: Sequence[int] | None = None,
) -> BatchTrace:
    """Run every target (without bos/eos) against its source.

    ``source_index[j]`` names the source row for target ``j`` so one encoding
    serves several targets.
    """
    if source_index is None:
        source_index = range(len(targets))
    src, src_pad = _pad(sources)
    memory = model.encode(src, src_pad)
    idx = torch.as_tensor(list(source_index), dtype=torch.long)
    memory, mem_pad, src = memory[idx], src_pad[idx], src[idx]
    dec_in, dec_pad = _pad([[BOS_ID, *t, EOS_ID] for t in targets])
    hidden = model.decode(dec_in, memory, mem_pad, dec_pad, src=src)
    log_probs = model.log_probs(hidden[:, :-1], memory, mem_pad, src)
    tgt_ids = dec_in[:, 1:]
    mask = ~dec_pad[:, 1:]
    return BatchTrace(log_probs, hidden[:, 1:], tgt_ids, mask)


def _strip_markers(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    if ids and ids[0] == BOS_ID:
        ids = ids[1:]
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    return ids


def forward_teacher_forced(model: Seq2SeqModel, X: TokenSequence, Y: TokenSequence) -> DecodeTrace:
    """One step per target position, the final step predicting ``<eos>``."""
    tgt = _strip_markers(Y.tokens)
    if len(tgt) + 2 > model.config.max_len + 2:
        raise ValueError(f"target length {len(tgt)} exceeds max_len {model.config.max_len}")
    return teacher_forced_batch(model, [list(X.tokens)], [tgt]).trace(0)


def _head(model: Seq2SeqModel, name: str) -> nn.Linear:
    head = getattr(model, name)
    if head is None:
        raise ConfigError(f"{name} is disabled in this model's config")
    return head


def sentence_discriminate(model: Seq2SeqModel, trace: DecodeTrace) -> torch.Tensor:
    """Probability that the teacher-forced sentence is entailed, read at ``<eos>``."""
    head = _head(model, "sentence_head")
    if int(trace.targets[-1]) != EOS_ID:
        raise ValueError("trace does not end at <eos>")
    return torch.sigmoid(head(trace.hidden[-1])).squeeze(-1)


def token_discriminate(model: Seq2SeqModel, trace: DecodeTrace) -> torch.Tensor:
    head = _head(model, "token_head")
    return torch.sigmoid(head(trace.hidden)).squeeze(-1)


def discriminate(model: Seq2SeqModel, trace: DecodeTrace) -> DiscriminatorOutput:
    return DiscriminatorOutput(
        sentence_discriminate(model, trace) if model.sentence_head is not None else None,
        token_discriminate(model, trace) if model.token_head is not None else None,
    )


# -- decoding ---------------------------------------------------------------


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest most-probable set with mass >= ``top_p``, renormalized."""
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p * cum[-1] - 1e-12)) + 1
    out = np.zeros_like(probs)
    keep = order[: min(k, len(order))]
    out[keep] = probs[keep]
    return out / out.sum()


def nucleus_sample(
    model,
    X: TokenSequence,
    prefix: TokenSequence,
    top_p: float,
    max_len: int,
    rng: np.random.Generator,
) -> TokenSequence:
    """Sample a continuation of ``prefix``; stops at ``<eos>`` or after ``max_len`` tokens.

    ``model`` only needs ``next_token_probs(src_ids, prefix_ids)``.
    """
    generated: list[int] = []
    prefix_ids = _strip_markers(prefix.tokens)
    for _ in range(max_len):
        dist = nucleus_filter(model.next_token_probs(X.tokens, prefix_ids + generated), top_p)
        tok = int(rng.choice(len(dist), p=dist))
        if tok == EOS_ID:
            break
        generated.append(tok)
    vocab = getattr(model, "vocab", None)
    surface = [vocab.token(t) if vocab is not None else str(t) for t in generated]
    return TokenSequence(generated, surface)


@torch.no_grad()
def greedy_decode(model: Seq2SeqModel, sources: Sequence[Sequence[int]], max_len: int = 32) -> list[list[int]]:
    was_training = model.training
    model.eval()
    try:
        src, src_pad = _pad(sources)
        memory = model.encode(src, src_pad)
        out = torch.full((len(sources), 1), BOS_ID, dtype=torch.long)
        done = torch.zeros(len(sources), dtype=torch.bool)
        for _ in range(max_len):
            h = model.decode(out, memory, src_pad, src=src)[:, -1:]
            nxt = model.log_probs(h, memory, src_pad, src)[:, -1].argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
            out = torch.cat([out, nxt[:, None]], 1)
            done |= nxt == EOS_ID
            if bool(done.all()):
                break
    finally:
        model.train(was_training)
    results = []
    for row in out[:, 1:].tolist():
        seq = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            seq.append(t)
        results.append(seq)
    return results


# -- checkpoints ------------------------------------------------------------
#
# layout: MAGIC (8 bytes) | version u32 LE | header length u64 LE | header
# (UTF-8 JSON: config, vocab, extra, blocks[name, dtype, shape, offset, nbytes])
# | concatenated little-endian parameter bytes at the recorded offsets.


def save_checkpoint(model: Seq2SeqModel, path: str | Path, extra: dict | None = None) -> None:
    blocks, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        blocks.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(model.config),
        "vocab": model.vocab.tokens() if model.vocab is not None else None,
        "extra": extra or {},
        "blocks": blocks,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    body = memoryview(data)[20 + hlen :]
    params = {}
    for b in header["blocks"]:
        arr = np.frombuffer(body[b["offset"] : b["offset"] + b["nbytes"]], dtype=np.dtype(b["dtype"]))
        params[b["name"]] = torch.from_numpy(arr.reshape(b["shape"]).copy())
    return header, params


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Seq2SeqModel:
    header, params = read_checkpoint(path)
    config = ModelConfig(**header["config"])
    if expect is not None and expect != config:
        diff = {k: (v, getattr(config, k)) for k, v in asdict(expect).items() if getattr(config, k) != v}
        raise CheckpointError(f"{path}: config mismatch (expected, found): {diff}")
    model = Seq2SeqModel(config, _vocab_from(header["vocab"]))
    model.load_state_dict(params, strict=True)
    model.checkpoint_extra = header.get("extra", {})
    return model


def _vocab_from(tokens: list[str] | None) -> Vocabulary | None:
    if tokens is None:
        return None
    vocab = Vocabulary()
    if vocab.tokens() != tokens[: len(vocab)]:
        raise CheckpointError("checkpoint vocabulary has unexpected reserved tokens")
    for tok in tokens[len(vocab) :]:
        vocab.add(tok)
    return vocab


def init_from_generator(
    path: str | Path, *, sentence_head: bool, token_head: bool, seed: int, dropout: float | None = None
) -> Seq2SeqModel:
    """Load generator weights from a checkpoint and attach freshly seeded heads."""
    header, params = read_checkpoint(path)
    cfg = dict(header["config"])
    cfg.update(sentence_head=sentence_head, token_head=token_head, seed=seed)
    if dropout is not None:
        cfg["dropout"] = dropout
    model = Seq2SeqModel(ModelConfig(**cfg), _vocab_from(header["vocab"]))
    generator = {k: v for k, v in params.items() if not k.startswith(("sentence_head.", "token_head."))}
    missing, unexpected = model.load_state_dict(generator, strict=False)
    if unexpected or any(not k.startswith(("sentence_head.", "token_head.")) for k in missing):
        raise CheckpointError(f"{path}: generator parameters do not match ({missing}, {unexpected})")
    return model


def new_model(vocab: Vocabulary, **kwargs) -> Seq2SeqModel:
    return Seq2SeqModel(ModelConfig(vocab_size=len(vocab), **kwargs), vocab)


__all__ = [
    "BOS", "EOS", "PAD", "ModelConfig", "Seq2SeqModel", "DecodeTrace", "DiscriminatorOutput",
    "forward_teacher_forced", "sentence_discriminate", "token_discriminate", "discriminate",
    "nucleus_filter", "nucleus_sample", "greedy_decode", "teacher_forced_batch",
    "save_checkpoint", "load_checkpoint", "init_from_generator", "new_model",
]
