"""NADIR encoder, its ablation arms, the parallel MLP head and an AR baseline."""

from __future__ import annotations

import functools
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import nn

from . import numcore as nc
from .tokenizer import EOS, PAD, ConfigError, Vocab, decode_until_eos, encode_sources

ATTENTION_VARIANTS = ("standard", "differential")
FFN_VARIANTS = ("dense", "moe")
EOS_POLICIES = ("target", "predicted", "union")
ROPE_BASE = 10000.0


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    head_dim: Optional[int] = None
    num_experts: int = 4
    top_k: int = 2
    expert_dim: int = 128
    capacity_factor: float = 1.25
    dropout_p: float = 0.1
    max_len: int = 32
    attention_variant: str = "differential"
    ffn_variant: str = "moe"
    lambda_init_schedule: Union[str, float] = "depthwise"
    eos_mask_policy: str = "target"
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    # "head" -> sqrt(head_dim); "model" -> sqrt(embed_dim)
    score_scale: str = "head"
    ar_decoder: bool = False

    def __post_init__(self) -> None:
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ConfigError(f"unknown attention_variant {self.attention_variant!r}")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ConfigError(f"unknown ffn_variant {self.ffn_variant!r}")
        if self.eos_mask_policy not in EOS_POLICIES:
            raise ConfigError(f"unknown eos_mask_policy {self.eos_mask_policy!r}")
        if self.score_scale not in ("head", "model"):
            raise ConfigError(f"unknown score_scale {self.score_scale!r}")
        branches = 2 if self.attention_variant == "differential" else 1
        if self.head_dim is None:
            if self.embed_dim % (branches * self.num_heads):
                raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {branches}*num_heads")
            self.head_dim = self.embed_dim // (branches * self.num_heads)
        if branches * self.num_heads * self.head_dim != self.embed_dim:
            raise ConfigError(
                f"{self.attention_variant} attention needs {branches}*h*d_h == d "
                f"({branches}*{self.num_heads}*{self.head_dim} != {self.embed_dim})")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for RoPE, got {self.head_dim}")
        if self.ffn_variant == "moe" and not 1 <= self.top_k <= self.num_experts:
            raise ConfigError("top_k must be in [1, num_experts]")
        if self.capacity_factor < 1.0:
            raise ConfigError("capacity_factor must be >= 1.0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.num_layers < 0 or self.max_len < 1:
            raise ConfigError("num_layers must be >= 0 and max_len >= 1")
        if self.expert_dim % 2:
            raise ConfigError("expert_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def lambda_init(self, layer_index: int) -> float:
        sched = self.lambda_init_schedule
        if sched == "depthwise":
            return 0.8 - 0.6 * math.exp(-0.3 * layer_index)
        try:
            return float(sched)
        except (TypeError, ValueError):
            raise ConfigError(f"bad lambda_init_schedule {sched!r}") from None

    @property
    def scale_dim(self) -> int:
        return self.head_dim if self.score_scale == "head" else self.embed_dim


def paper_preset(src_vocab_size: int = 256, tgt_vocab_size: int = 256, max_len: int = 32) -> ModelConfig:
    return ModelConfig(embed_dim=768, num_layers=4, num_heads=8, num_experts=5, expert_dim=512,
                       capacity_factor=1.25, dropout_p=0.1, max_len=max_len,
                       src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size)


def tiny_preset(vocab_size: int = 8, **overrides) -> ModelConfig:
    kw = dict(embed_dim=8, num_layers=1, num_heads=2, head_dim=2, num_experts=2, expert_dim=8,
              dropout_p=0.0, max_len=12, src_vocab_size=vocab_size, tgt_vocab_size=vocab_size)
    kw.update(overrides)
    return ModelConfig(**kw)


# --------------------------------------------------------------------------
# rotary embeddings


@functools.lru_cache(maxsize=64)
def _rope_table(length: int, head_dim: int, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    inv_freq = ROPE_BASE ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = torch.arange(length, dtype=torch.float64)[:, None] * inv_freq[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def rope_angles(positions: torch.Tensor, head_dim: int, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables [T, head_dim/2] for integer positions."""
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    T = len(positions)
    if T and bool((positions == torch.arange(T)).all()):
        return _rope_table(T, head_dim, dtype)
    if T and int(positions.min()) < 0:
        raise ValueError("RoPE positions must be non-negative")
    cos, sin = _rope_table(int(positions.max()) + 1 if T else 0, head_dim, dtype)
    return cos[positions], sin[positions]


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def rope_apply(q: torch.Tensor, k: torch.Tensor, positions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rotate (even, odd) coordinate pairs of q and k [..., T, d_h] by position."""
    if q.shape[-1] % 2 or k.shape[-1] % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {q.shape[-1]}")
    cos, sin = rope_angles(positions, q.shape[-1], q.dtype)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


# --------------------------------------------------------------------------
# parameters


def _weight(fan_in: int, fan_out: int) -> nn.Parameter:
    w = torch.empty(fan_in, fan_out)
    nn.init.normal_(w, std=fan_in ** -0.5)
    return nn.Parameter(w)


def _bias(n: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(n))


def _key_mask(pad_mask: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    # [B, T] -> [B, 1, 1, T]
    return None if pad_mask is None else pad_mask[:, None, None, :]


def _split_heads(x: torch.Tensor, h: int) -> torch.Tensor:
    B, T, D = x.shape
    return x.reshape(B, T, h, D // h).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, h, T, dh = x.shape
    return x.transpose(1, 2).reshape(B, T, h * dh)


class DiffAttention(nn.Module):
    def __init__(self, cfg: ModelConfig, layer_index: int):
        super().__init__()
        d, h, dh = cfg.embed_dim, cfg.num_heads, cfg.head_dim
        self.h, self.dh = h, dh
        self.scale = cfg.scale_dim ** -0.5
        self.lambda_init = cfg.lambda_init(layer_index)
        self.wq = _weight(d, 2 * h * dh)
        self.wk = _weight(d, 2 * h * dh)
        self.wv = _weight(d, 2 * h * dh)
        self.wo = _weight(2 * h * dh, d)
        self.lambda_q1 = nn.Parameter(torch.randn(h, dh) * 0.1)
        self.lambda_k1 = nn.Parameter(torch.randn(h, dh) * 0.1)
        self.lambda_q2 = nn.Parameter(torch.randn(h, dh) * 0.1)
        self.lambda_k2 = nn.Parameter(torch.randn(h, dh) * 0.1)
        self.head_norm = nn.Parameter(torch.ones(h, 2 * dh))

    def lam(self) -> torch.Tensor:
        """Per-head modulation scalar, shape [h]."""
        return (torch.exp((self.lambda_q1 * self.lambda_k1).sum(-1))
                - torch.exp((self.lambda_q2 * self.lambda_k2).sum(-1)) + self.lambda_init)

    def heads(self, x: torch.Tensor, pad_mask: Optional[torch.Tensor]) -> torch.Tensor:
        """Per-head differential attention output before normalisation, [B, h, T, 2*d_h]."""
        B, T, _ = x.shape
        h, dh = self.h, self.dh
        q = nc.matmul(x, self.wq).reshape(B, T, h, 2, dh).permute(3, 0, 2, 1, 4)
        k = nc.matmul(x, self.wk).reshape(B, T, h, 2, dh).permute(3, 0, 2, 1, 4)
        v = _split_heads(nc.matmul(x, self.wv), h)
        cos, sin = _rope_table(T, dh, x.dtype)
        q1, k1 = _rotate(q[0], cos, sin), _rotate(k[0], cos, sin)
        q2, k2 = _rotate(q[1], cos, sin), _rotate(k[1], cos, sin)
        mask = _key_mask(pad_mask)
        a1 = nc.softmax_lastdim(nc.matmul(q1, nc.transpose(k1)) * self.scale, mask)
        a2 = nc.softmax_lastdim(nc.matmul(q2, nc.transpose(k2)) * self.scale, mask)
        lam = self.lam().to(x.dtype).view(1, h, 1, 1)
        return nc.matmul(a1 - lam * a2, v)

    def forward(self, x: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        o = self.heads(x, pad_mask)
        o = nc.rmsnorm(o, self.head_norm[None, :, None, :]) * (1.0 - self.lambda_init)
        return nc.matmul(_merge_heads(o), self.wo)


class StandardAttention(nn.Module):
    def __init__(self, cfg: ModelConfig, causal: bool = False):
        super().__init__()
        d, h = cfg.embed_dim, cfg.num_heads
        self.h = h
        self.dh = d // h
        self.scale = (self.dh if cfg.score_scale == "head" else d) ** -0.5
        self.causal = causal
        self.wq = _weight(d, d)
        self.wk = _weight(d, d)
        self.wv = _weight(d, d)
        self.wo = _weight(d, d)

    def forward(self, x: torch.Tensor, pad_mask: Optional[torch.Tensor] = None,
                memory: Optional[torch.Tensor] = None) -> torch.Tensor:
        kv = x if memory is None else memory
        q = _split_heads(nc.matmul(x, self.wq), self.h)
        k = _split_heads(nc.matmul(kv, self.wk), self.h)
        v = _split_heads(nc.matmul(kv, self.wv), self.h)
        Tq, Tk = q.shape[2], k.shape[2]
        cos_q, sin_q = _rope_table(Tq, self.dh, q.dtype)
        cos_k, sin_k = _rope_table(Tk, self.dh, k.dtype)
        q, k = _rotate(q, cos_q, sin_q), _rotate(k, cos_k, sin_k)
        mask = _key_mask(pad_mask)
        if self.causal:
            causal = torch.ones(Tq, Tk, dtype=torch.bool).triu(1)
            mask = causal if mask is None else (mask | causal)
        a = nc.softmax_lastdim(nc.matmul(q, nc.transpose(k)) * self.scale, mask)
        return nc.matmul(_merge_heads(nc.matmul(a, v)), self.wo)


# --------------------------------------------------------------------------
# feed-forward arms


@dataclass
class RoutingTrace:
    gate_probs: torch.Tensor  # [N, M_e], carries grad
    chosen: torch.Tensor  # [N, k] int64
    weights: torch.Tensor  # [N, k]
    dropped: torch.Tensor  # [N, k] bool

    @property
    def dropped_fraction(self) -> float:
        return float(self.dropped.float().mean()) if self.dropped.numel() else 0.0


def expert_stack(x, w1, b1, w2, b2, w3, b3):
    """FFN(d -> e/2) -> GELU -> FFN(e/2 -> e) -> GELU -> FFN(e -> d)."""
    h = nc.gelu(nc.linear(x, w1, b1))
    h = nc.gelu(nc.linear(h, w2, b2))
    return nc.linear(h, w3, b3)


class DenseFFN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, e = cfg.embed_dim, cfg.expert_dim
        self.w1, self.b1 = _weight(d, e // 2), _bias(e // 2)
        self.w2, self.b2 = _weight(e // 2, e), _bias(e)
        self.w3, self.b3 = _weight(e, d), _bias(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return expert_stack(x, self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)


def top_k_route(probs: torch.Tensor, k: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Indices and probabilities of the k largest entries per row; ties go to the lower index."""
    order = torch.sort(-probs.detach(), dim=-1, stable=True).indices[:, :k]
    return order, probs.gather(1, order)


def capacity(capacity_factor: float, n_tokens: int, top_k: int, n_experts: int) -> int:
    return math.ceil(capacity_factor * n_tokens * top_k / n_experts)


class MoE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, e, m = cfg.embed_dim, cfg.expert_dim, cfg.num_experts
        self.num_experts, self.top_k = m, cfg.top_k
        self.capacity_factor = cfg.capacity_factor
        self.router = _weight(d, m)
        self.w1 = nn.Parameter(torch.stack([_weight(d, e // 2).data for _ in range(m)]))
        self.b1 = nn.Parameter(torch.zeros(m, e // 2))
        self.w2 = nn.Parameter(torch.stack([_weight(e // 2, e).data for _ in range(m)]))
        self.b2 = nn.Parameter(torch.zeros(m, e))
        self.w3 = nn.Parameter(torch.stack([_weight(e, d).data for _ in range(m)]))
        self.b3 = nn.Parameter(torch.zeros(m, d))

    def expert(self, i: int, x: torch.Tensor) -> torch.Tensor:
        return expert_stack(x, self.w1[i], self.b1[i], self.w2[i], self.b2[i], self.w3[i], self.b3[i])

    def forward(self, x: torch.Tensor, training: Optional[bool] = None) -> Tuple[torch.Tensor, RoutingTrace]:
        """Route tokens x [N, d] to their top-k experts.

        Expert capacity is only enforced while training; at inference every
        token reaches both chosen experts so outputs do not depend on what
        else shares the batch.
        """
        if training is None:
            training = self.training
        N = x.shape[0]
        probs = nc.softmax_lastdim(nc.matmul(x, self.router))
        chosen, weights = top_k_route(probs, self.top_k)
        dropped = torch.zeros_like(chosen, dtype=torch.bool)
        cap = capacity(self.capacity_factor, N, self.top_k, self.num_experts)
        y = torch.zeros_like(x)
        for e in range(self.num_experts):
            hit = chosen == e  # [N, k], at most one True per row
            if training:
                rank = torch.cumsum(hit.any(1).long(), 0)
                over = hit & (rank > cap)[:, None]
                dropped |= over
                hit = hit & ~over
            rows, slots = hit.nonzero(as_tuple=True)
            if rows.numel() == 0:
                continue
            out = self.expert(e, x[rows]) * weights[rows, slots][:, None]
            y = y.index_add(0, rows, out)
        return y, RoutingTrace(probs, chosen, weights, dropped)


# --------------------------------------------------------------------------
# encoder + heads


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, layer_index: int):
        super().__init__()
        d = cfg.embed_dim
        self.p = cfg.dropout_p
        self.attn_norm = nn.Parameter(torch.ones(d))
        self.ffn_norm = nn.Parameter(torch.ones(d))
        self.attn = DiffAttention(cfg, layer_index) if cfg.attention_variant == "differential" else StandardAttention(cfg)
        self.ffn = MoE(cfg) if cfg.ffn_variant == "moe" else DenseFFN(cfg)

    def forward(self, x, pad_mask, generator=None):
        h = self.attn(nc.rmsnorm(x, self.attn_norm), pad_mask)
        x = x + nc.dropout(h, self.p, self.training, generator)
        B, T, d = x.shape
        flat = nc.rmsnorm(x, self.ffn_norm).reshape(B * T, d)
        trace = None
        if isinstance(self.ffn, MoE):
            h, trace = self.ffn(flat)
        else:
            h = self.ffn(flat)
        x = x + nc.dropout(h.reshape(B, T, d), self.p, self.training, generator)
        return x, trace


class ARDecoder(nn.Module):
    """One causal self-attention + cross-attention decoder layer, greedy baseline."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.p = cfg.dropout_p
        self.embed = nn.Parameter(torch.randn(cfg.tgt_vocab_size, d) * 0.1)
        self.self_norm = nn.Parameter(torch.ones(d))
        self.self_attn = StandardAttention(cfg, causal=True)
        self.cross_norm = nn.Parameter(torch.ones(d))
        self.cross_attn = StandardAttention(cfg)
        self.ffn_norm = nn.Parameter(torch.ones(d))
        self.ffn = DenseFFN(cfg)
        self.out_norm = nn.Parameter(torch.ones(d))
        self.out = _weight(d, cfg.tgt_vocab_size)
        self.out_b = _bias(cfg.tgt_vocab_size)

    def forward(self, prev_ids, memory, src_pad_mask, generator=None):
        x = nc.embedding(self.embed, prev_ids)
        x = x + nc.dropout(self.self_attn(nc.rmsnorm(x, self.self_norm)), self.p, self.training, generator)
        x = x + nc.dropout(self.cross_attn(nc.rmsnorm(x, self.cross_norm), src_pad_mask, memory=memory),
                           self.p, self.training, generator)
        x = x + nc.dropout(self.ffn(nc.rmsnorm(x, self.ffn_norm)), self.p, self.training, generator)
        return nc.linear(nc.rmsnorm(x, self.out_norm), self.out, self.out_b)


def shift_right(tgt_ids: torch.Tensor) -> torch.Tensor:
    """Teacher-forcing decoder input: EOS doubles as the start symbol."""
    start = torch.full_like(tgt_ids[:, :1], EOS)
    return torch.cat([start, tgt_ids[:, :-1]], dim=1)


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    hidden: torch.Tensor
    traces: List[RoutingTrace] = field(default_factory=list)
    ar_logits: Optional[torch.Tensor] = None


class Nadir(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.src_vocab_size < 4 or cfg.tgt_vocab_size < 4:
            raise ConfigError("vocab sizes must be set (>= 4) before building the model")
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok_embed = nn.Parameter(torch.randn(cfg.src_vocab_size, d) * 0.1)
        self.layers = nn.ModuleList([EncoderLayer(cfg, i) for i in range(cfg.num_layers)])
        self.final_norm = nn.Parameter(torch.ones(d))
        self.head_w1, self.head_b1 = _weight(d, d), _bias(d)
        self.head_w2, self.head_b2 = _weight(d, cfg.tgt_vocab_size), _bias(cfg.tgt_vocab_size)
        self.decoder = ARDecoder(cfg) if cfg.ar_decoder else None
        self.counters: Counter = Counter()

    def encode(self, src_ids, pad_mask=None, generator=None) -> Tuple[torch.Tensor, List[RoutingTrace]]:
        if pad_mask is None:
            pad_mask = src_ids == PAD
        self.counters["encoder_forward"] += 1
        x = nc.embedding(self.tok_embed, src_ids)
        traces = []
        for layer in self.layers:
            x, trace = layer(x, pad_mask, generator)
            if trace is not None:
                traces.append(trace)
        return x, traces

    def head(self, hidden: torch.Tensor) -> torch.Tensor:
        self.counters["head_forward"] += 1
        h = nc.rmsnorm(hidden, self.final_norm)
        return nc.linear(nc.gelu(nc.linear(h, self.head_w1, self.head_b1)), self.head_w2, self.head_b2)

    def forward(self, src_ids, pad_mask=None, tgt_ids=None, generator=None) -> ForwardOutput:
        if pad_mask is None:
            pad_mask = src_ids == PAD
        hidden, traces = self.encode(src_ids, pad_mask, generator)
        out = ForwardOutput(self.head(hidden), hidden, traces)
        if self.decoder is not None and tgt_ids is not None:
            out.ar_logits = self.decoder(shift_right(tgt_ids), hidden, pad_mask, generator)
        return out


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> Nadir:
    torch.manual_seed(seed)
    model = Nadir(cfg)
    return model.to(dtype)


def param_count(cfg: ModelConfig) -> int:
    with torch.device("meta"):
        model = Nadir(cfg)
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# generation


def _batches(n: int, batch_size: int):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for start in range(0, n, batch_size):
        yield start, min(n, start + batch_size)


@torch.no_grad()
def nar_decode_ids(model: Nadir, src_ids: torch.Tensor) -> torch.Tensor:
    """One encoder+head pass, per-position argmax."""
    hidden, _ = model.encode(src_ids, src_ids == PAD)
    return model.head(hidden).argmax(-1)


@torch.no_grad()
def ar_decode_ids(model: Nadir, src_ids: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    """Greedy decoding with the AR baseline; one decoder pass per output step."""
    if model.decoder is None:
        raise ConfigError("checkpoint has no AR decoder")
    max_len = max_len or model.cfg.max_len
    pad_mask = src_ids == PAD
    memory, _ = model.encode(src_ids, pad_mask)
    B = src_ids.shape[0]
    prev = torch.full((B, 1), EOS, dtype=torch.long)
    out = torch.full((B, max_len), PAD, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for step in range(max_len):
        model.counters["decoder_step"] += 1
        nxt = model.decoder(prev, memory, pad_mask)[:, -1].argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        out[:, step] = nxt
        done |= nxt == EOS
        if bool(done.all()):
            break
        prev = torch.cat([prev, nxt[:, None]], dim=1)
    return out


def _generate(decode, model: Nadir, words: Sequence[str], src_vocab: Vocab, tgt_vocab: Vocab,
              batch_size: int, **kw) -> List[Tuple[str, bool]]:
    was_training = model.training
    model.eval()
    results: List[Tuple[str, bool]] = []
    try:
        for a, b in _batches(len(words), batch_size):
            ids = decode(model, encode_sources(words[a:b], src_vocab, model.cfg.max_len), **kw)
            results.extend(decode_until_eos(row, tgt_vocab) for row in ids.tolist())
    finally:
        model.train(was_training)
    return results


def nar_generate(model: Nadir, words: Sequence[str], src_vocab: Vocab, tgt_vocab: Vocab,
                 batch_size: int = 256) -> List[Tuple[str, bool]]:
    return _generate(nar_decode_ids, model, words, src_vocab, tgt_vocab, batch_size)


def ar_generate(model: Nadir, words: Sequence[str], src_vocab: Vocab, tgt_vocab: Vocab,
                batch_size: int = 256, max_len: Optional[int] = None) -> List[Tuple[str, bool]]:
    return _generate(ar_decode_ids, model, words, src_vocab, tgt_vocab, batch_size, max_len=max_len)
