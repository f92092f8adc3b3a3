import math

import pytest
import torch

from nadir import numcore as nc
from helpers import grad_check

N_RANDOM = 100
TOL = 1e-4


def rnd(*shape, gen):
    return torch.randn(*shape, generator=gen, dtype=torch.float64).requires_grad_(True)


def weighted(out, w):
    # random upstream gradient so every output coordinate matters
    return (out * w).sum()


def _op_cases():
    """(name, builder) where builder(gen) -> (loss_fn, inputs)."""

    def unary(fn, shape=(3, 4)):
        def build(gen):
            x = rnd(*shape, gen=gen)
            w = torch.randn(fn(x.detach()).shape, generator=gen, dtype=torch.float64)
            return (lambda: weighted(fn(x), w)), [x]
        return build

    def binary(fn, sa=(3, 4), sb=(3, 4)):
        def build(gen):
            a, b = rnd(*sa, gen=gen), rnd(*sb, gen=gen)
            w = torch.randn(fn(a.detach(), b.detach()).shape, generator=gen, dtype=torch.float64)
            return (lambda: weighted(fn(a, b), w)), [a, b]
        return build

    def linear(gen):
        x, W, b = rnd(2, 3, gen=gen), rnd(3, 4, gen=gen), rnd(4, gen=gen)
        w = torch.randn(2, 4, generator=gen, dtype=torch.float64)
        return (lambda: weighted(nc.linear(x, W, b), w)), [x, W, b]

    def masked_softmax(gen):
        x = rnd(3, 5, gen=gen)
        mask = torch.rand(3, 5, generator=gen) < 0.4
        mask[:, 0] = False
        w = torch.randn(3, 5, generator=gen, dtype=torch.float64)
        return (lambda: weighted(nc.softmax_lastdim(x, mask), w)), [x]

    def rmsnorm(gen):
        x, g = rnd(3, 4, gen=gen), rnd(4, gen=gen)
        w = torch.randn(3, 4, generator=gen, dtype=torch.float64)
        return (lambda: weighted(nc.rmsnorm(x, g), w)), [x, g]

    def embedding(gen):
        table = rnd(6, 3, gen=gen)
        ids = torch.randint(0, 6, (5,), generator=gen)
        w = torch.randn(5, 3, generator=gen, dtype=torch.float64)
        return (lambda: weighted(nc.embedding(table, ids), w)), [table]

    def dropout(gen):
        x = rnd(4, 5, gen=gen)
        seed = int(torch.randint(0, 2 ** 31, (1,), generator=gen))
        w = torch.randn(4, 5, generator=gen, dtype=torch.float64)

        def f():
            g = torch.Generator().manual_seed(seed)  # same mask on every evaluation
            return weighted(nc.dropout(x, 0.3, True, g), w)
        return f, [x]

    def cross_entropy(gen):
        logits = rnd(4, 5, gen=gen)
        tgt = torch.randint(0, 5, (4,), generator=gen)
        w = torch.rand(4, generator=gen, dtype=torch.float64)
        return (lambda: weighted(nc.cross_entropy_logits(logits, tgt), w)), [logits]

    def concat(gen):
        a, b = rnd(2, 3, gen=gen), rnd(2, 2, gen=gen)
        w = torch.randn(2, 5, generator=gen, dtype=torch.float64)
        return (lambda: weighted(nc.concat_lastdim([a, b]), w)), [a, b]

    return [
        ("matmul", binary(nc.matmul, (3, 4), (4, 2))),
        ("batched_matmul", binary(nc.matmul, (2, 3, 4), (2, 4, 2))),
        ("linear", linear),
        ("softmax", unary(nc.softmax_lastdim)),
        ("softmax_masked", masked_softmax),
        ("log_softmax", unary(nc.log_softmax_lastdim)),
        ("rmsnorm", rmsnorm),
        ("gelu", unary(nc.gelu)),
        ("add", binary(nc.add)),
        ("sub", binary(nc.sub)),
        ("hadamard", binary(nc.hadamard)),
        ("scale", unary(lambda x: nc.scale(x, -1.7))),
        ("transpose", unary(nc.transpose)),
        ("reshape", unary(lambda x: nc.reshape(x, (2, 6)))),
        ("concat", concat),
        ("embedding", embedding),
        ("dropout", dropout),
        ("cross_entropy", cross_entropy),
    ]


OP_CASES = _op_cases()


@pytest.mark.parametrize("name,build", OP_CASES, ids=[n for n, _ in OP_CASES])
def test_gradients_match_finite_differences(name, build):
    worst = 0.0
    for seed in range(N_RANDOM):
        gen = torch.Generator().manual_seed(seed)
        f, inputs = build(gen)
        worst = max(worst, grad_check(f, inputs))
    assert worst <= TOL, f"{name}: worst relative error {worst:.2e}"


def test_matmul_gradient_tight():
    gen = torch.Generator().manual_seed(0)
    a, b = rnd(3, 4, gen=gen), rnd(4, 2, gen=gen)
    assert grad_check(lambda: (nc.matmul(a, b) ** 2).sum(), [a, b]) <= 1e-6


def test_rmsnorm_gradient_tight():
    gen = torch.Generator().manual_seed(1)
    x, g = rnd(5, 6, gen=gen), rnd(6, gen=gen)
    assert grad_check(lambda: (nc.rmsnorm(x, g) ** 3).sum(), [x, g]) <= 1e-6


# ---------------------------------------------------------------- examples


def test_matmul_examples():
    eye = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    col = torch.tensor([[3.0], [4.0]])
    assert torch.equal(nc.matmul(eye, col), col)
    assert nc.matmul(torch.tensor([[1.0, 2.0]]), col).item() == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_matmul_dtype_mismatch():
    with pytest.raises(nc.DimensionError):
        nc.matmul(torch.zeros(2, 2), torch.zeros(2, 2, dtype=torch.float64))


def test_softmax_examples():
    assert nc.softmax_lastdim(torch.tensor([5.0])).tolist() == [1.0]
    third = nc.softmax_lastdim(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(third, torch.full((3,), 1 / 3, dtype=torch.float64))
    out = nc.softmax_lastdim(torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([0.66524, 0.24473, 0.09003], dtype=torch.float64), atol=1e-5)


def test_softmax_masked_rows_and_sums():
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(50, 7, generator=gen) * 30
    mask = torch.rand(50, 7, generator=gen) < 0.5
    mask[:, 3] = False
    p = nc.softmax_lastdim(x, mask)
    assert torch.all(p >= 0)
    assert torch.all(p[mask] == 0)
    assert torch.allclose(p.sum(-1), torch.ones(50), atol=1e-6)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError):
        nc.softmax_lastdim(torch.zeros(2, 3), torch.tensor([[False, True, True], [True, True, True]]))


def test_softmax_is_stable_for_large_inputs():
    p = nc.softmax_lastdim(torch.tensor([1000.0, 1000.0]))
    assert torch.allclose(p, torch.tensor([0.5, 0.5]))


def test_rmsnorm_examples():
    out = nc.rmsnorm(torch.tensor([3.0, 4.0], dtype=torch.float64), torch.ones(2, dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], dtype=torch.float64))
    for c in (-2.5, 0.7, 40.0):
        out = nc.rmsnorm(torch.full((5,), c, dtype=torch.float64), torch.ones(5, dtype=torch.float64))
        assert torch.allclose(out, torch.full((5,), math.copysign(1.0, c), dtype=torch.float64), atol=1e-6)


def test_rmsnorm_unit_rms():
    x = torch.randn(20, 16, dtype=torch.float64) * 5
    out = nc.rmsnorm(x, torch.ones(16, dtype=torch.float64))
    assert torch.allclose(out.pow(2).mean(-1).sqrt(), torch.ones(20, dtype=torch.float64), atol=1e-4)


def test_gelu_is_tanh_form():
    assert nc.gelu(torch.zeros(1)).item() == 0.0
    x = torch.linspace(-4, 4, 41, dtype=torch.float64)
    ref = 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + nc.GELU_COEF * x ** 3)))
    assert torch.allclose(nc.gelu(x), ref, atol=1e-12)


def test_dropout_examples():
    x = torch.randn(4, 4)
    assert torch.equal(nc.dropout(x, 0.0, True), x)
    assert torch.equal(nc.dropout(x, 0.5, False), x)


def test_dropout_scales_survivors():
    x = torch.ones(10_000)
    out = nc.dropout(x, 0.25, True, torch.Generator().manual_seed(0))
    kept = out[out != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1 / 0.75))
    assert abs((out == 0).float().mean().item() - 0.25) < 0.02


def test_dropout_rejects_bad_p():
    with pytest.raises(ValueError):
        nc.dropout(torch.ones(2), 1.0, True)


def test_cross_entropy_examples():
    ce = nc.cross_entropy_logits(torch.zeros(1, 2, dtype=torch.float64), torch.tensor([0]))
    assert math.isclose(ce.item(), math.log(2), rel_tol=1e-12)
    ce = nc.cross_entropy_logits(torch.tensor([[10.0, -10.0]], dtype=torch.float64), torch.tensor([0]))
    assert math.isclose(ce.item(), math.log1p(math.exp(-20)), rel_tol=1e-6)
    assert abs(ce.item() - 2.06e-9) < 1e-11


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    tgt = torch.tensor([0, 3, 1])
    nc.cross_entropy_logits(logits, tgt).sum().backward()
    expect = torch.softmax(logits.detach(), -1) - torch.nn.functional.one_hot(tgt, 4)
    assert torch.allclose(logits.grad, expect, atol=1e-12)


def test_cross_entropy_out_of_range():
    with pytest.raises(IndexError):
        nc.cross_entropy_logits(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nc.embedding(torch.zeros(4, 2), torch.tensor([4]))


def test_elementwise_shape_mismatch():
    for op in (nc.add, nc.sub, nc.hadamard):
        with pytest.raises(nc.DimensionError):
            op(torch.zeros(2, 3), torch.zeros(3, 2))
    with pytest.raises(nc.DimensionError):
        nc.reshape(torch.zeros(2, 3), (4, 2))


def test_reshape_transpose_roundtrip_bit_identical():
    x = torch.randn(3, 4, 5)
    assert torch.equal(nc.transpose(nc.transpose(x)), x)
    assert torch.equal(nc.reshape(nc.reshape(x, (12, 5)), (3, 4, 5)), x)


def test_backward_examples():
    x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    nc.backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = torch.tensor([1.0, 2.0], requires_grad=True)
    nc.backward(nc.hadamard(y, y).sum())
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_contract_errors():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(nc.GraphError):
        nc.backward(x * 2)
    loss = (x * 2).sum()
    nc.backward(loss)
    with pytest.raises(nc.GraphError):
        nc.backward(loss)
    with pytest.raises(nc.GraphError):
        nc.backward(torch.tensor(1.0))


def test_check_finite():
    nc.check_finite(torch.ones(2))
    with pytest.raises(nc.NonFiniteError):
        nc.check_finite(torch.tensor([1.0, float("nan")]))
