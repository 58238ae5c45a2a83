import itertools
import math
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dysflm.asr import (
    ChannelConfigError, ChannelModel, ChannelSpec, EnumerationRefused, exact_distribution, mbr_candidates,
    n_best, noiseless_channel, one_best, sample_hypothesis,
)
from dysflm.decoding import beam_decode


def binary(p=0.9):
    return ChannelSpec(("a", "b"), confusion={"a": {"a": p, "b": 1 - p}, "b": {"b": p, "a": 1 - p}})


def test_noiseless(rng):
    spec = noiseless_channel(["x", "y"])
    h = sample_hypothesis(spec, ["x", "y", "x"], rng)
    assert h.tokens == ("x", "y", "x") and h.log_prob == 0.0
    assert exact_distribution(spec, ["x", "y"]) == [(("x", "y"), 1.0)]


def test_delete_everything(rng):
    spec = ChannelSpec(("a", "b"), p_delete=1.0)
    assert sample_hypothesis(spec, ["a", "b"], rng).tokens == ()


def test_binary_sampling_frequency(rng):
    spec = binary()
    hits = sum(sample_hypothesis(spec, ["a", "b"], rng).tokens == ("a", "b") for _ in range(10_000))
    assert abs(hits / 10_000 - 0.81) <= 0.02


def test_single_token_distribution():
    spec = ChannelSpec(("a", "b"), confusion={"a": {"a": 0.7, "b": 0.3}})
    dist = exact_distribution(spec, ["a"])
    assert [d[0] for d in dist] == [("a",), ("b",)]
    assert np.allclose([d[1] for d in dist], [0.7, 0.3], atol=1e-12)


def brute_force(p_delete, confusion, truth):
    """Keep/delete lattice enumerated path by path (no insertions)."""
    out = defaultdict(float)
    options = []
    for t in truth:
        row = confusion.get(t, {t: 1.0})
        options.append([(None, p_delete)] + [(v, (1 - p_delete) * q) for v, q in row.items()])
    for path in itertools.product(*options):
        s = tuple(v for v, _ in path if v is not None)
        out[s] += math.prod(q for _, q in path)
    return dict(out)


def test_delete_lattice_matches_brute_force():
    spec = ChannelSpec(("a", "b"), confusion={"a": {"a": 0.8, "b": 0.2}}, p_delete=0.1)
    got = dict(exact_distribution(spec, ["a", "b"]))
    want = brute_force(0.1, {"a": {"a": 0.8, "b": 0.2}}, ["a", "b"])
    assert got.keys() == want.keys()
    for k in want:
        assert abs(got[k] - want[k]) < 1e-12
    assert abs(sum(got.values()) - 1.0) < 1e-9


def test_duplicate_strings_are_merged():
    # "a a" with deletions: deleting either copy yields "a" through two paths
    spec = ChannelSpec(("a",), p_delete=0.5)
    dist = dict(exact_distribution(spec, ["a", "a"]))
    assert dist == {("a",): 0.5, ("a", "a"): 0.25, (): 0.25}


def test_collapse_of_repeats():
    spec = ChannelSpec(("a", "b"), p_collapse=1.0)
    assert exact_distribution(spec, ["a", "a", "b"]) == [(("a", "b"), 1.0)]


def test_enumeration_refused():
    spec = noiseless_channel(list("abcdef"))
    with pytest.raises(EnumerationRefused) as err:
        exact_distribution(spec, list("abc"))
    assert err.value.size_estimate >= 1


def test_validation():
    with pytest.raises(ChannelConfigError):
        ChannelSpec(("a",), confusion={"a": {"a": 0.5}})
    with pytest.raises(ChannelConfigError):
        ChannelSpec(("a",), p_delete=1.5)
    with pytest.raises(ChannelConfigError):
        sample_hypothesis(noiseless_channel(["a"]), ["z"], np.random.default_rng(0))


def test_spec_roundtrip(tmp_path):
    spec = ChannelSpec(("a", "b"), confusion={"a": {"a": 0.9, "b": 0.1}}, p_delete=0.1,
                       delete_overrides={"b": 0.3}, p_insert=0.05, insertion={"a": 1.0}, p_collapse=0.2, seed=4)
    spec.save(tmp_path / "c.json")
    assert ChannelSpec.load(tmp_path / "c.json") == spec
    with pytest.raises(ChannelConfigError):
        ChannelSpec.from_dict({**spec.to_dict(), "bogus": 1})


def probs(lo, hi):
    # 0 exactly, or a probability well clear of float underflow
    return st.one_of(st.just(lo), st.floats(max(lo, 1e-3), hi))


channel_specs = st.builds(
    lambda p, d, i, c: ChannelSpec(("a", "b", "c"), confusion={"a": {"a": p, "b": 1 - p}, "b": {"b": p, "c": 1 - p}},
                                   p_delete=d, p_insert=i, insertion={"c": 0.5, "a": 0.5}, p_collapse=c),
    probs(0.05, 1.0), probs(0.0, 0.5), probs(0.0, 0.5), probs(0.0, 1.0),
)
truths = st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=3)


@settings(max_examples=40, deadline=None)
@given(channel_specs, truths)
def test_exact_distribution_properties(spec, truth):
    dist = exact_distribution(spec, truth)
    assert abs(sum(p for _, p in dist) - 1.0) < 1e-9
    assert all(p > 0 for _, p in dist)
    assert len({s for s, _ in dist}) == len(dist)


@settings(max_examples=40, deadline=None)
@given(channel_specs, truths)
def test_channel_model_string_probs_match_enumeration(spec, truth):
    model = ChannelModel(spec, truth)
    for s, p in exact_distribution(spec, truth):
        # chain rule over next_log_probs, EOS included
        ids = [model.index[t] for t in s]
        lp = sum(model.next_log_probs(None, ids[:k])[ids[k]] for k in range(len(ids)))
        lp += model.next_log_probs(None, ids)[model.eos_id]
        assert abs(lp - math.log(p)) < 1e-9
        assert abs(model.string_log_prob(s) - math.log(p)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(channel_specs, truths)
def test_exhaustive_beam_is_exact_top_n(spec, truth):
    dist = exact_distribution(spec, truth)
    model = ChannelModel(spec, truth)
    n = min(5, len(dist))
    nb = beam_decode(model, None, width=len(dist) * model.vocab_size, n=n, max_len=model.max_len)
    got = [math.exp(h.log_prob) for h in nb]
    assert all(math.isclose(g, p, rel_tol=1e-9) for g, (_, p) in zip(got, dist[:n], strict=True))


def test_one_best_and_n_best():
    spec = binary(0.8)
    assert one_best(spec, ["a", "b"]).tokens == ("a", "b")
    nb = n_best(spec, ["a", "b"], width=4, n=4)
    assert [h.tokens for h in nb][0] == ("a", "b")
    assert len(nb) == 4 and not nb.padded


def test_sampling_matches_exact_distribution():
    spec = ChannelSpec(("a", "b", "c"), confusion={"a": {"a": 0.6, "b": 0.3, "c": 0.1}, "b": {"b": 0.7, "c": 0.3}},
                       p_delete=0.1)
    rng = np.random.default_rng(77)
    counts = Counter(sample_hypothesis(spec, ["a", "b"], rng).tokens for _ in range(20_000))
    for s, p in exact_distribution(spec, ["a", "b"]):
        assert abs(counts[s] / 20_000 - p) < 0.015


def test_mbr_candidates_are_samples(rng):
    c = mbr_candidates(binary(), ["a", "b"], 10, rng)
    assert 1 <= len(c) <= 10
    assert all(h.score is not None for h in c)
    assert c == sorted(c, key=lambda h: (-h.score, -h.log_prob, h.tokens))
