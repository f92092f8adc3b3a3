"""Composite training loss: masked token cross-entropy plus MoE load balancing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch

from . import numcore as nc
from .tokenizer import EOS


class DataError(ValueError):
    pass


@dataclass
class LossBreakdown:
    token_loss: torch.Tensor
    load_loss: torch.Tensor
    total: torch.Tensor
    masked_token_count: int
    layer_load_losses: List[float] = field(default_factory=list)


def _first_index(hit: torch.Tensor) -> torch.Tensor:
    """Index of the first True per row, or T when the row has none."""
    T = hit.shape[1]
    pos = torch.arange(T).expand_as(hit)
    return torch.where(hit, pos, torch.full_like(pos, T)).min(dim=1).values


def eos_loss_mask(tgt_ids: torch.Tensor, predicted_ids: Optional[torch.Tensor] = None,
                  policy: str = "target") -> torch.Tensor:
    """Boolean [B, T] mask of positions that contribute to the token loss.

    ``target``: up to and including the reference EOS.  ``predicted``: up to and
    including the first predicted EOS (whole row if none).  ``union``: either.
    """
    B, T = tgt_ids.shape
    pos = torch.arange(T)[None, :]
    eos_hit = tgt_ids == EOS
    if not bool(eos_hit.any(1).all()):
        bad = int((~eos_hit.any(1)).nonzero()[0])
        raise DataError(f"target row {bad} has no EOS")
    target = pos <= _first_index(eos_hit)[:, None]
    if policy == "target":
        return target
    if predicted_ids is None:
        raise ValueError(f"policy {policy!r} needs predicted ids")
    predicted = pos <= _first_index(predicted_ids == EOS)[:, None]
    if policy == "predicted":
        return predicted
    if policy == "union":
        return target | predicted
    raise ValueError(f"unknown EOS mask policy {policy!r}")


def token_loss(logits: torch.Tensor, tgt_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions (normalised by their count)."""
    if logits.shape[:2] != tgt_ids.shape or mask.shape != tgt_ids.shape:
        raise nc.DimensionError(
            f"logits {tuple(logits.shape)}, targets {tuple(tgt_ids.shape)}, mask {tuple(mask.shape)} disagree")
    sel = mask.reshape(-1)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("token loss has no masked positions")
    V = logits.shape[-1]
    ce = nc.cross_entropy_logits(logits.reshape(-1, V)[sel], tgt_ids.reshape(-1)[sel])
    return ce.sum() / n


def load_balance_loss(gate_probs: torch.Tensor) -> torch.Tensor:
    """M * sum_e (mean_b G[b, e])^2 for one layer's gate matrix [N, M]."""
    m = gate_probs.shape[-1]
    usage = gate_probs.mean(dim=0)
    return m * (usage * usage).sum()


def mean_load_loss(gate_probs_per_layer: Sequence[torch.Tensor]) -> torch.Tensor:
    vals = [load_balance_loss(g) for g in gate_probs_per_layer]
    return torch.stack(vals).mean()


def total_loss(logits: torch.Tensor, tgt_ids: torch.Tensor, traces, alpha: float = 0.8, beta: float = 0.2,
               policy: str = "target") -> LossBreakdown:
    predicted = logits.detach().argmax(-1) if policy != "target" else None
    mask = eos_loss_mask(tgt_ids, predicted, policy)
    tok = token_loss(logits, tgt_ids, mask)
    if traces:
        per_layer = [load_balance_loss(t.gate_probs) for t in traces]
        load = torch.stack(per_layer).mean()
        layer_vals = [float(v.detach()) for v in per_layer]
    else:
        load = torch.zeros((), dtype=logits.dtype)
        layer_vals = []
    total = alpha * tok + beta * load
    return LossBreakdown(tok, load, total, int(mask.sum()), layer_vals)
