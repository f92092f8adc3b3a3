import math

import pytest
import torch

from nadir.model import RoutingTrace, build_model, tiny_preset
from nadir.objective import DataError, eos_loss_mask, load_balance_loss, mean_load_loss, token_loss, total_loss
from helpers import fd_grad, rel_err

E = 2  # EOS id


def test_eos_mask_policies():
    tgt = torch.tensor([[3, 4, E, 0, 0]])
    assert eos_loss_mask(tgt).tolist() == [[True, True, True, False, False]]
    tgt3 = torch.tensor([[3, 4, E]])
    pred = torch.tensor([[E, 5, 5]])
    assert eos_loss_mask(tgt3, pred, "union").tolist() == [[True, True, True]]
    assert eos_loss_mask(tgt3, pred, "predicted").tolist() == [[True, False, False]]
    assert eos_loss_mask(tgt3, torch.tensor([[3, 3, 3]]), "predicted").tolist() == [[True, True, True]]


def test_eos_mask_errors():
    with pytest.raises(DataError):
        eos_loss_mask(torch.tensor([[3, 4, 0]]))
    with pytest.raises(ValueError):
        eos_loss_mask(torch.tensor([[3, E]]), None, "predicted")
    with pytest.raises(ValueError):
        eos_loss_mask(torch.tensor([[3, E]]), torch.tensor([[3, E]]), "bogus")


def test_token_loss_examples():
    tgt = torch.tensor([[1, 2, 0]])
    mask = torch.tensor([[True, True, False]])
    perfect = torch.full((1, 3, 4), -10.0, dtype=torch.float64)
    perfect.scatter_(2, tgt[..., None], 10.0)
    assert token_loss(perfect, tgt, mask).item() <= 1e-6
    uniform = torch.zeros(2, 5, 4, dtype=torch.float64)
    for m in ([[True] * 5] * 2, [[True, False, False, False, False]] * 2):
        assert math.isclose(token_loss(uniform, torch.zeros(2, 5, dtype=torch.long), torch.tensor(m)).item(),
                            math.log(4), rel_tol=1e-12)


def test_token_loss_masked_mean():
    # logits chosen so per-position CE is (0.5, 1.5, 9.0) for target 0 of a 2-way softmax
    def logit_for(ce):
        return math.log(math.exp(ce) - 1.0)  # CE = log(1 + e^z) with logits (0, z)
    z = torch.tensor([logit_for(c) for c in (0.5, 1.5, 9.0)], dtype=torch.float64)
    logits = torch.stack([torch.zeros(3, dtype=torch.float64), z], -1)[None]
    loss = token_loss(logits, torch.zeros(1, 3, dtype=torch.long), torch.tensor([[True, True, False]]))
    assert math.isclose(loss.item(), 1.0, rel_tol=1e-12)


def test_token_loss_empty_mask_and_shapes():
    with pytest.raises(ValueError):
        token_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2, dtype=torch.bool))
    with pytest.raises(ValueError):
        token_loss(torch.zeros(1, 3, 3), torch.zeros(1, 2, dtype=torch.long), torch.ones(1, 2, dtype=torch.bool))


def test_token_loss_ignores_masked_logits():
    logits = torch.randn(2, 4, 5)
    tgt = torch.randint(0, 5, (2, 4))
    mask = torch.tensor([[1, 1, 0, 0], [1, 0, 0, 0]], dtype=torch.bool)
    other = logits.clone()
    other[~mask] = torch.randn(int((~mask).sum()), 5) * 100
    assert token_loss(logits, tgt, mask).item() == token_loss(other, tgt, mask).item()


def test_load_balance_examples():
    assert math.isclose(load_balance_loss(torch.full((7, 5), 0.2, dtype=torch.float64)).item(), 1.0, rel_tol=1e-12)
    onehot = torch.zeros(4, 5, dtype=torch.float64)
    onehot[:, 2] = 1
    assert load_balance_loss(onehot).item() == 5.0
    g = torch.tensor([[1.0, 0.0], [0.5, 0.5]], dtype=torch.float64)  # mean usage (0.75, 0.25)
    assert math.isclose(load_balance_loss(g).item(), 1.25, rel_tol=1e-12)
    assert math.isclose(mean_load_loss([g, onehot]).item(), (1.25 + 5.0) / 2, rel_tol=1e-12)


def test_load_balance_lower_bound_random():
    gen = torch.Generator().manual_seed(0)
    for _ in range(200):
        n, m = int(torch.randint(1, 20, (1,), generator=gen)), int(torch.randint(1, 9, (1,), generator=gen))
        g = torch.softmax(torch.randn(n, m, generator=gen, dtype=torch.float64) * 3, -1)
        assert load_balance_loss(g).item() >= 1 - 1e-9


def _trace(g):
    return RoutingTrace(g, torch.zeros(g.shape[0], 1, dtype=torch.long), g[:, :1], torch.zeros(g.shape[0], 1, dtype=torch.bool))


def test_total_loss_weights():
    logits = torch.randn(2, 3, 6, dtype=torch.float64)
    tgt = torch.tensor([[3, E, 0], [4, 4, E]])
    uniform = _trace(torch.full((6, 4), 0.25, dtype=torch.float64))
    lb = total_loss(logits, tgt, [uniform], alpha=0.7, beta=0.0)
    assert math.isclose(lb.total.item(), 0.7 * lb.token_loss.item(), rel_tol=1e-12)
    lb = total_loss(logits, tgt, [uniform], alpha=0.0, beta=0.3)
    assert math.isclose(lb.total.item(), 0.3, rel_tol=1e-12)
    lb = total_loss(logits, tgt, [uniform, uniform])
    assert abs(lb.total.item() - (0.8 * lb.token_loss.item() + 0.2 * lb.load_loss.item())) <= 1e-6
    assert lb.masked_token_count == 5 and lb.layer_load_losses == [1.0, 1.0]
    assert total_loss(logits, tgt, []).load_loss.item() == 0.0


def test_total_loss_gradient_tiny_model():
    torch.manual_seed(0)
    model = build_model(tiny_preset(), seed=3, dtype=torch.float64).eval()
    src = torch.tensor([[3, 4, 5, E, 0], [6, 7, E, 0, 0]])
    tgt = torch.tensor([[5, 6, 7, E, 0], [3, 3, E, 0, 0]])

    def f():
        out = model(src)
        return total_loss(out.logits, tgt, out.traces).total

    model.zero_grad()
    f().backward()
    router = model.layers[0].ffn.router
    assert router.grad is not None and router.grad.abs().sum() > 0
    for name, p in model.named_parameters():
        assert rel_err(p.grad, fd_grad(f, p)) <= 1e-4, name
