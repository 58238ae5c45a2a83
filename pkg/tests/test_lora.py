import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dysflm.lora import LoraAdapter, LoraLinear, adapted_forward, dropout, init_adapter, merge


def test_rank_bounds():
    init_adapter(4, 6, 4, 16.0)  # r = min(m, n) is allowed
    with pytest.raises(ValueError):
        init_adapter(4, 6, 0, 16.0)
    with pytest.raises(ValueError):
        init_adapter(4, 6, 5, 16.0)


def test_zero_b_is_identity():
    gen = torch.Generator().manual_seed(0)
    W = torch.randn(5, 7, generator=gen)
    x = torch.randn(3, 7, generator=gen)
    ad = init_adapter(5, 7, 3, 16.0, seed=1)
    assert torch.equal(adapted_forward(W, ad, x), x @ W.T)
    assert torch.equal(merge(W, ad), W)


def test_hand_example():
    ad = LoraAdapter(torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0], [0.0]]), alpha=1.0)
    out = adapted_forward(torch.zeros(2, 2), ad, torch.tensor([3.0, 5.0]))
    assert out.tolist() == [3.0, 0.0]


def test_merge_matches_adapter_forward():
    gen = torch.Generator().manual_seed(3)
    W = torch.randn(4, 4, generator=gen) * 0.1
    ad = LoraAdapter(torch.randn(2, 4, generator=gen) * 0.1, torch.randn(4, 2, generator=gen) * 0.1, alpha=16.0)
    x = torch.randn(10, 4, generator=gen)
    W2 = merge(W, ad)
    # direct algebra: W + (alpha / r) B A
    oracle = W + 8.0 * (ad.B.detach() @ ad.A.detach())
    torch.testing.assert_close(W2, oracle, rtol=0, atol=1e-6)
    torch.testing.assert_close(x @ W2.T, adapted_forward(W, ad, x), rtol=0, atol=1e-6)


def test_merge_leaves_base_untouched():
    W = torch.randn(3, 3)
    before = W.clone()
    ad = LoraAdapter(torch.randn(1, 3), torch.randn(3, 1), alpha=2.0)
    merge(W, ad)
    assert torch.equal(W, before)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_delta_rank_bounded(m, n, data):
    r = data.draw(st.integers(1, min(m, n)))
    gen = torch.Generator().manual_seed(data.draw(st.integers(0, 10_000)))
    ad = LoraAdapter(torch.randn(r, n, generator=gen, dtype=torch.float64),
                     torch.randn(m, r, generator=gen, dtype=torch.float64), alpha=4.0)
    s = np.linalg.svd(ad.delta().detach().numpy(), compute_uv=False)
    assert int((s > 1e-9 * max(1.0, s.max())).sum()) <= r


def test_dropout_only_in_training():
    gen = torch.Generator().manual_seed(0)
    W = torch.randn(4, 4, generator=gen)
    ad = LoraAdapter(torch.randn(2, 4, generator=gen), torch.randn(4, 2, generator=gen), 16.0, dropout_p=0.5)
    x = torch.randn(8, 4, generator=gen)
    assert torch.equal(adapted_forward(W, ad, x), adapted_forward(W, ad, x))
    a = adapted_forward(W, ad, x, training=True, rng=torch.Generator().manual_seed(1))
    b = adapted_forward(W, ad, x, training=True, rng=torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    assert not torch.equal(a, adapted_forward(W, ad, x))


def test_inverted_dropout_keeps_mean():
    x = torch.ones(200_000, dtype=torch.float64)
    y = dropout(x, 0.1, torch.Generator().manual_seed(5))
    assert abs(float(y.mean()) - 1.0) < 0.01
    assert set(np.unique(y.numpy()).round(9)) <= {0.0, round(1 / 0.9, 9)}


def test_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(9)
    W = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    ad = LoraAdapter(torch.randn(2, 4, generator=gen, dtype=torch.float64),
                     torch.randn(5, 2, generator=gen, dtype=torch.float64), alpha=3.0)
    x = torch.randn(6, 4, generator=gen, dtype=torch.float64)

    def loss():
        return adapted_forward(W, ad, x).sin().sum()

    loss().backward()
    h = 1e-6
    for p in (ad.A, ad.B):
        num = torch.zeros_like(p)
        with torch.no_grad():
            for i in range(p.numel()):
                flat = p.view(-1)
                flat[i] += h
                up = float(loss())
                flat[i] -= 2 * h
                down = float(loss())
                flat[i] += h
                num.view(-1)[i] = (up - down) / (2 * h)
        rel = (p.grad - num).norm() / num.norm()
        assert rel < 1e-4


def test_lora_linear_weight_is_buffer():
    lin = LoraLinear(torch.randn(3, 3))
    assert not list(lin.parameters())
    lin.adapter = init_adapter(3, 3, 1, 1.0)
    assert {n for n, _ in lin.named_parameters()} == {"adapter.A", "adapter.B"}
