"""Replacement-detection, unlikelihood, likelihood and combined losses.

Every function takes probabilities (tensors or plain sequences) and returns a
0-d tensor, so the same code serves training (autograd) and hand-checked
fixtures. Probabilities are clamped to ``[EPS, 1 - EPS]`` before any log.
Token-level losses are sums over positions unless ``reduction="mean"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

EPS = 1e-7


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def clamp_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return values.sum()
    if reduction == "mean":
        return values.mean() if values.numel() else values.sum()
    raise ValueError(f"unknown reduction '{reduction}'")


def _check_lengths(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: length mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def rd_sentence_loss(p_entailed, label) -> torch.Tensor:
    """Binary cross-entropy of the sentence head; label 1 = entailed."""
    p = clamp_prob(_as_tensor(p_entailed))
    lab = _as_tensor(label, p)
    return -(lab * torch.log(p) + (1 - lab) * torch.log(1 - p))


def rd_token_loss(token_probs, labels, reduction: str = "sum") -> torch.Tensor:
    p = clamp_prob(_as_tensor(token_probs))
    lab = _as_tensor(labels, p)
    _check_lengths(p, lab, "rd_token_loss")
    return _reduce(-(lab * torch.log(p) + (1 - lab) * torch.log(1 - p)), reduction)


def unlikelihood_loss(gold_token_probs, span_mask, reduction: str = "sum") -> torch.Tensor:
    """``-log(1 - p)`` on replaced-span positions, ``-log p`` elsewhere.

    ``gold_token_probs`` are teacher-forced probabilities of the perturbed
    sentence's own tokens.
    """
    p = clamp_prob(_as_tensor(gold_token_probs))
    mask = _as_tensor(span_mask, p)
    _check_lengths(p, mask, "unlikelihood_loss")
    return _reduce(-(mask * torch.log(1 - p) + (1 - mask) * torch.log(p)), reduction)


def nll_loss(gold_token_probs, reduction: str = "sum") -> torch.Tensor:
    p = clamp_prob(_as_tensor(gold_token_probs))
    return _reduce(-torch.log(p), reduction)


def r2d2_loss(nll, ul_list, rd_true, rd_false_list, lam: float) -> torch.Tensor:
    """Per-instance combined objective.

    ``[lam * (nll + sum(ul)) + (1 - lam) * (rd_true + sum(rd_false))] / (N + 1)``
    with ``N`` contradictory sentences.
    """
    if len(ul_list) != len(rd_false_list):
        raise ValueError(
            f"r2d2_loss: {len(ul_list)} unlikelihood terms vs {len(rd_false_list)} detection terms"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    nll = _as_tensor(nll)
    gen = nll + sum((_as_tensor(u, nll) for u in ul_list), torch.zeros_like(nll))
    rd_true = _as_tensor(rd_true, nll)
    disc = rd_true + sum((_as_tensor(r, nll) for r in rd_false_list), torch.zeros_like(nll))
    return (lam * gen + (1 - lam) * disc) / (len(ul_list) + 1)


@dataclass
class LossBreakdown:
    """Parts of one instance group's loss, as floats."""

    nll: float
    ul: list[float]
    rd_true: float
    rd_false: list[float]
    lam: float
    combined: float
    n_false: int = field(init=False)

    def __post_init__(self):
        self.n_false = len(self.ul)

    def recombine(self) -> float:
        gen = self.nll + sum(self.ul)
        disc = self.rd_true + sum(self.rd_false)
        return (self.lam * gen + (1 - self.lam) * disc) / (self.n_false + 1)

    def as_dict(self) -> dict:
        return {
            "nll": self.nll,
            "ul": list(self.ul),
            "rd_true": self.rd_true,
            "rd_false": list(self.rd_false),
            "lambda": self.lam,
            "combined": self.combined,
            "n_false": self.n_false,
        }


# closed-form derivatives w.r.t. the (unclamped, interior) probabilities;
# used to cross-check autograd and finite differences


def rd_grad(p: Sequence[float] | torch.Tensor, labels) -> torch.Tensor:
    p = _as_tensor(p)
    lab = _as_tensor(labels, p)
    return -(lab / p) + (1 - lab) / (1 - p)


def unlikelihood_grad(p, span_mask) -> torch.Tensor:
    p = _as_tensor(p)
    mask = _as_tensor(span_mask, p)
    return mask / (1 - p) - (1 - mask) / p


def nll_grad(p) -> torch.Tensor:
    p = _as_tensor(p)
    return -1.0 / p
