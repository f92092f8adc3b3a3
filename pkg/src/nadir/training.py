"""AdamW, the warmup/decay schedule and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import numcore as nc
from .metrics import corpus_cer, word_accuracy
from .model import ConfigError, ModelConfig, Nadir, build_model, nar_generate
from .objective import DataError, eos_loss_mask, token_loss, total_loss
from .tokenizer import Vocab, build_vocab, encode_corpus

log = logging.getLogger(__name__)

VARIANTS = {
    "standard": dict(attention_variant="standard", ffn_variant="dense", ar_decoder=False),
    "diff": dict(attention_variant="differential", ffn_variant="dense", ar_decoder=False),
    "diff-moe": dict(attention_variant="differential", ffn_variant="moe", ar_decoder=False),
    "ar": dict(attention_variant="differential", ffn_variant="moe", ar_decoder=True),
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_fraction: float = 0.15
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    alpha: float = 0.8
    beta: float = 0.2
    eos_mask_policy: str = "target"
    variant: str = "diff-moe"
    grad_clip: Optional[float] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_batch_size: int = 512

    def __post_init__(self) -> None:
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        self.betas = tuple(self.betas)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to base_lr, then linear decay to 0 at total_steps."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = round(warmup_fraction * total_steps)
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Sequence[Tuple[str, torch.nn.Parameter]], weight_decay: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.named = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.named}
        self.v = {n: torch.zeros_like(p) for n, p in self.named}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        params = [p for _, p in self.named]
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        ms = [self.m[n] for n, _ in self.named]
        vs = [self.v[n] for n, _ in self.named]
        if self.weight_decay:
            torch._foreach_mul_(params, 1.0 - lr * self.weight_decay)
        torch._foreach_mul_(ms, self.b1)
        torch._foreach_add_(ms, grads, alpha=1.0 - self.b1)
        torch._foreach_mul_(vs, self.b2)
        torch._foreach_addcmul_(vs, grads, grads, value=1.0 - self.b2)
        denom = torch._foreach_div(vs, c2)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, self.eps)
        torch._foreach_addcdiv_(params, ms, denom, value=-lr / c1)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


def adamw_step(params, state: AdamW, lr: float) -> None:
    del params  # the optimiser already holds references
    state.step(lr)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    # counter-based stream keyed by (seed, epoch) so a resumed run sees the same order
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[epoch, 0, 0, 0]))
    return rng.permutation(n)


@dataclass
class TrainResult:
    model: Nadir
    best_checkpoint: ckpt_io.Checkpoint
    history: List[dict] = field(default_factory=list)
    skipped: int = 0


def evaluate(model: Nadir, pairs: Sequence[Tuple[str, str]], src_vocab: Vocab, tgt_vocab: Vocab,
             batch_size: int = 512) -> Tuple[float, float, List[Tuple[str, bool]]]:
    outs = nar_generate(model, [s for s, _ in pairs], src_vocab, tgt_vocab, batch_size)
    hp = [(h, t) for (h, _), (_, t) in zip(outs, pairs)]
    return corpus_cer(hp), word_accuracy(hp), outs


def model_config_for(variant: str, base: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab) -> ModelConfig:
    d = base.to_dict()
    d.update(VARIANTS[variant])
    d["head_dim"] = None if d["attention_variant"] != base.attention_variant else base.head_dim
    d["src_vocab_size"] = len(src_vocab)
    d["tgt_vocab_size"] = len(tgt_vocab)
    return ModelConfig.from_dict(d)


def train(train_pairs: Sequence[Tuple[str, str]], model_cfg: ModelConfig, cfg: TrainConfig,
          valid_pairs: Optional[Sequence[Tuple[str, str]]] = None,
          vocabs: Optional[Tuple[Vocab, Vocab]] = None,
          metrics_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train one model variant and return it together with its best-validation checkpoint.

    ``model_cfg`` supplies the architecture sizes; the variant in ``cfg``
    overrides the attention/FFN choice and vocab sizes come from the corpus.
    """
    if not train_pairs:
        raise DataError("training corpus is empty")
    src_vocab, tgt_vocab = vocabs or build_vocab(list(train_pairs) + list(valid_pairs or []))
    mcfg = model_config_for(cfg.variant, model_cfg, src_vocab, tgt_vocab)
    mcfg.eos_mask_policy = cfg.eos_mask_policy
    data = encode_corpus(train_pairs, src_vocab, tgt_vocab, mcfg.max_len)
    if len(data) == 0:
        raise DataError(f"every training pair exceeds max_len={mcfg.max_len}")
    valid = list(valid_pairs) if valid_pairs else []
    if valid:
        v = encode_corpus(valid, src_vocab, tgt_vocab, mcfg.max_len)
        valid = v.pairs

    model = build_model(mcfg, seed=cfg.seed)
    opt = AdamW(list(model.named_parameters()), cfg.weight_decay, cfg.betas, cfg.adam_eps)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    gen = torch.Generator()
    history: List[dict] = []
    best: Optional[ckpt_io.Checkpoint] = None
    best_key = None
    step = 0
    extra = {"train_config": cfg.to_dict(), "skipped_pairs": data.skipped}
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        Path(metrics_path).write_text("")

    for epoch in range(cfg.epochs):
        model.train()
        gen.manual_seed(cfg.seed * 1_000_003 + epoch)
        order = torch.from_numpy(epoch_order(n, cfg.seed, epoch))
        sums = {"token_loss": 0.0, "load_loss": 0.0, "total": 0.0, "ar_loss": 0.0}
        dropped, routed = 0, 0
        t0 = time.perf_counter()
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = data.batch(idx, trim=True)
            out = model(batch.src_ids, batch.src_pad_mask, batch.tgt_ids if mcfg.ar_decoder else None, gen)
            lb = total_loss(out.logits, batch.tgt_ids, out.traces, cfg.alpha, cfg.beta, cfg.eos_mask_policy)
            loss = lb.total
            if out.ar_logits is not None:
                ar = token_loss(out.ar_logits, batch.tgt_ids, eos_loss_mask(batch.tgt_ids))
                loss = loss + ar
                sums["ar_loss"] += ar.item()
            nc.zero_grads(model.parameters())
            nc.backward(loss)
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            step += 1
            opt.step(lr_at(step, total_steps, cfg.lr, cfg.warmup_fraction))
            sums["token_loss"] += lb.token_loss.item()
            sums["load_loss"] += lb.load_loss.item()
            sums["total"] += lb.total.item()
            for tr in out.traces:
                dropped += int(tr.dropped.sum())
                routed += tr.dropped.numel()
        rec = {k: v / steps_per_epoch for k, v in sums.items()}
        if not mcfg.ar_decoder:
            rec.pop("ar_loss")
        rec.update(epoch=epoch + 1, lr=lr_at(step, total_steps, cfg.lr, cfg.warmup_fraction),
                   dropped_token_fraction=dropped / routed if routed else 0.0,
                   epoch_sec=time.perf_counter() - t0)
        if valid:
            rec["val_cer"], rec["val_wacc"], _ = evaluate(model, valid, src_vocab, tgt_vocab, cfg.eval_batch_size)
        else:
            rec["val_cer"], rec["val_wacc"] = None, None
        history.append(rec)
        log.info("epoch %d %s", epoch + 1, json.dumps({k: v for k, v in rec.items() if k != "epoch"}))
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        key = rec["val_cer"] if valid else rec["total"]
        if best_key is None or key < best_key:
            best_key = key
            best = ckpt_io.Checkpoint.from_model(model, src_vocab, tgt_vocab, {**extra, "epoch": epoch + 1})
            if checkpoint_path is not None:
                ckpt_io.save(best, checkpoint_path)
        if on_epoch is not None:
            on_epoch(rec)
    model.eval()
    return TrainResult(model, best, history, data.skipped)
