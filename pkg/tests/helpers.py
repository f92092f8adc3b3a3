"""Shared oracles for the test suite."""

from __future__ import annotations

import torch

from nadir.synthdata import gen_corpus, gen_ruleset


def fd_grad(f, x: torch.Tensor) -> torch.Tensor:
    """Central finite differences of scalar f() w.r.t. x (float64, in place).

    Step per coordinate is h = 1e-5 * (1 + |x_i|).
    """
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            h = 1e-5 * (1.0 + abs(orig))
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            down = float(f())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients (where only absolute error is
    meaningful) from dominating the relative measure.
    """
    a, n = analytic.detach().double(), numeric.double()
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def grad_check(f, inputs, floor: float = 1e-6) -> float:
    """Worst relative error between autograd and finite differences over ``inputs``."""
    for x in inputs:
        x.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad.clone() if x.grad is not None else torch.zeros_like(x)
        worst = max(worst, rel_err(analytic, fd_grad(f, x), floor))
    return worst


def directional_check(f, params, gen: torch.Generator, n_dirs: int = 2, floor: float = 1e-6) -> float:
    """Worst relative error of grad . v against a central difference along v, per tensor.

    Each parameter tensor is probed separately along ``n_dirs`` random
    Rademacher directions, so a wrong gradient in any tensor shows up.
    """
    for p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            analytic_grad = p.grad if p.grad is not None else torch.zeros_like(p)
            for _ in range(n_dirs):
                v = torch.randint(0, 2, p.shape, generator=gen).to(p.dtype) * 2 - 1
                h = 1e-5 * (1.0 + float(p.abs().max()))
                orig = p.detach().clone()
                p.add_(v, alpha=h)
                up = float(f())
                p.copy_(orig - h * v)
                down = float(f())
                p.copy_(orig)
                worst = max(worst, rel_err(torch.dot(analytic_grad.flatten(), v.flatten()).reshape(1),
                                           torch.tensor([(up - down) / (2 * h)], dtype=torch.float64), floor))
    return worst


def toy_pairs(n: int = 50, seed: int = 0):
    """Unambiguous (bijective) corpus over a 5-letter alphabet, so V = 8 with specials."""
    rules = gen_ruleset(seed, n_source=5, ambiguity=0.0)
    return gen_corpus(rules, n, (3, 6), seed=seed)
