import math

import pytest
import torch

from dysflm.lm import CausalLM, LMConfig, LMScorer, ModelInput, SequenceLengthError, next_token_logits, \
    sequence_log_prob
from dysflm.lora import LoraConfig


def make(dtype=torch.float32, **kw):
    cfg = LMConfig(vocab_size=kw.pop("vocab_size", 11), d_model=kw.pop("d_model", 32), n_layers=2, n_heads=4,
                   d_ff=64, max_seq_len=kw.pop("max_seq_len", 32), seed=kw.pop("seed", 0), **kw)
    return CausalLM(cfg, dtype)


def test_config_validation():
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, max_seq_len=0)
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, trainable_ids=(10,))


def test_shape_contract():
    m = make()
    prefix = torch.randn(1, 32)
    logits = next_token_logits(m, ModelInput([1, 2, 3], prefix))
    assert logits.shape == (3 + 1, 11)


def test_causality():
    m = make()
    a = next_token_logits(m, ModelInput([1, 2, 3, 4, 5]))
    b = next_token_logits(m, ModelInput([1, 2, 3, 9, 5]))
    assert torch.equal(a[:3], b[:3])
    assert not torch.equal(a[3], b[3])


def test_determinism_from_seed():
    inp = ModelInput([4, 2, 7])
    a = next_token_logits(make(seed=5), inp)
    b = next_token_logits(make(seed=5), inp)
    assert torch.equal(a, b)
    assert not torch.equal(a, next_token_logits(make(seed=6), inp))


def test_length_error():
    m = make(max_seq_len=4)
    with pytest.raises(SequenceLengthError):
        next_token_logits(m, ModelInput([1] * 5))


@pytest.mark.parametrize("dtype, tol", [(torch.float32, 1e-6), (torch.float64, 1e-12)])
def test_softmax_rows_normalised(dtype, tol):
    m = make(dtype)
    p = next_token_logits(m, ModelInput([1, 2, 3, 4])).softmax(-1)
    assert (p.sum(-1) - 1).abs().max() <= tol


def test_sequence_log_prob_chain_rule():
    m = make(torch.float64)
    ctx = ModelInput([1, 2])
    assert sequence_log_prob(m, ctx, []) == 0.0
    whole = sequence_log_prob(m, ctx, [5, 6, 7])
    split = sequence_log_prob(m, ctx, [5]) + sequence_log_prob(m, ModelInput([1, 2, 5]), [6, 7])
    assert abs(whole - split) < 1e-9
    assert whole <= 0


def test_uniform_logits_give_minus_log_v():
    m = make(vocab_size=13)
    with torch.no_grad():
        m.out_w.zero_()
        m.task_out.zero_()
    assert abs(sequence_log_prob(m, ModelInput([1]), [3]) - (-math.log(13))) < 1e-6


def test_scorer_matches_sequence_log_prob():
    m = make(torch.float64)
    sc = LMScorer(m, eos_id=2)
    ctx = ModelInput([1, 3])
    lp = sc.next_log_probs(ctx, [4])
    assert abs(lp[5] - sequence_log_prob(m, ModelInput([1, 3, 4]), [5])) < 1e-12


def test_lora_at_init_is_identity_and_base_is_buffers():
    m = make(trainable_ids=(1, 2))
    inp = ModelInput([1, 2, 3, 4])
    before = next_token_logits(m, inp)
    m.attach_lora(LoraConfig(rank=4), seed=3)
    after = next_token_logits(m, inp)
    assert (before - after).abs().max() <= 1e-6
    names = {n for n, _ in m.named_parameters()}
    assert names == {"task_emb", "task_out"} | {f"blocks.{i}.{t}.adapter.{x}" for i in range(2) for t in "qv"
                                                for x in "AB"}
    m.detach_lora()
    assert torch.equal(next_token_logits(m, inp), before)


def test_task_rows_override_only_their_tokens():
    m = make(trainable_ids=(3,))
    with torch.no_grad():
        m.task_emb += 1.0
    table = m.embedding_table()
    assert torch.equal(table[:3], m.tok_emb[:3]) and not torch.equal(table[3], m.tok_emb[3])
