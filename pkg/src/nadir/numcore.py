"""Dense tensor primitives used by the NADIR forward/backward pass.

Tensors are ``torch.Tensor`` objects and the reverse pass is torch's autograd
tape.  The functions here pin down the exact op set the model is allowed to
use, with the shape/contract checks the rest of the package relies on.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

RMSNORM_EPS = 1e-6
GELU_COEF = 0.044715

Tensor = torch.Tensor


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the reverse pass (non-scalar loss, repeated backward)."""


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN/Inf")
    return x


def tensor(data, dtype=torch.float32, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    return torch.matmul(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` stored as [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def softmax_lastdim(x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is boolean and True where an entry is excluded; it must broadcast
    against ``x``.  Excluded entries come out exactly 0.  A row with every
    entry excluded raises, since it means an all-padding attention row.
    """
    if mask is not None:
        try:
            torch.broadcast_shapes(mask.shape, x.shape)
        except RuntimeError as exc:
            raise DimensionError(f"mask {tuple(mask.shape)} does not broadcast to {tuple(x.shape)}") from exc
        # a broadcast row is fully masked iff its source row is; check the small tensor
        if mask.all(dim=-1).any():
            raise ValueError("softmax row is fully masked")
        x = x.masked_fill(mask, float("-inf"))
    # torch's kernel subtracts the row max before exponentiating
    return torch.softmax(x, dim=-1)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    return torch.log_softmax(x, dim=-1)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMSNORM_EPS) -> Tensor:
    if gain.shape[-1] != x.shape[-1]:
        raise DimensionError(f"rmsnorm gain {tuple(gain.shape)} does not match input {tuple(x.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gain.dim() == 1:
        return F.rms_norm(x, (x.shape[-1],), gain, eps)
    return F.rms_norm(x, (x.shape[-1],), None, eps) * gain


def gelu(x: Tensor) -> Tensor:
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return F.gelu(x, approximate="tanh")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return a - b


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    return a * b


def scale(x: Tensor, c: float) -> Tensor:
    return x * c


def transpose(x: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    return x.transpose(dim0, dim1)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (-1 not in shape and math.prod(shape) != x.numel()) or (
        -1 in shape and (math.prod(known) == 0 or x.numel() % math.prod(known))
    ):
        raise DimensionError(f"cannot reshape {tuple(x.shape)} into {shape}")
    return x.reshape(shape)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat: leading shapes differ {tuple(lead)} vs {tuple(p.shape[:-1])}")
    return torch.cat(list(parts), dim=-1)


def embedding(table: Tensor, ids: Tensor) -> Tensor:
    if ids.dtype not in (torch.int64, torch.int32):
        raise TypeError("embedding ids must be integer")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def dropout(x: Tensor, p: float, training: bool, generator: Optional[torch.Generator] = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = torch.empty_like(x).bernoulli_(1.0 - p, generator=generator)
    return x * keep * (1.0 / (1.0 - p))


def cross_entropy_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-row negative log-likelihood of ``targets`` under ``logits`` [N, V]."""
    if logits.dim() != 2 or targets.dim() != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross entropy expects [N,V] and [N], got {tuple(logits.shape)} and {tuple(targets.shape)}")
    V = logits.shape[1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= V):
        raise IndexError(f"target id out of range [0, {V})")
    return F.cross_entropy(logits, targets.long(), reduction="none")


def backward(loss: Tensor) -> None:
    """Run the reverse pass from a scalar loss.

    Each loss may be differentiated once; a second call on the same tensor
    raises ``GraphError`` rather than silently accumulating into ``.grad``.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to a graph")
    if getattr(loss, "_nadir_done", False):
        raise GraphError("backward already ran for this loss; rebuild the graph")
    loss.backward()
    loss._nadir_done = True


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
