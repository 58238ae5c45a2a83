# %% [markdown]
# # The simulated recogniser and MBR decoding
#
# A word channel turns a reference into a noisy hypothesis by deleting,
# substituting and inserting tokens. For short references the full output
# distribution can be enumerated, which gives us a ground truth to compare
# the Monte-Carlo decoders against.

# %%
import numpy as np

from dysflm.asr import ChannelSpec, exact_distribution, n_best, one_best, sample_hypothesis
from dysflm.decoding import Hypothesis, mbr_rank, mbr_select

spec = ChannelSpec(
    ("a", "b", "c"),
    confusion={"a": {"a": 0.6, "b": 0.3, "c": 0.1}, "b": {"a": 0.2, "b": 0.5, "c": 0.3}},
    p_delete=0.05,
    p_insert=0.05,
    insertion={"a": 0.2, "b": 0.2, "c": 0.6},
)
truth = ["a", "b"]
dist = exact_distribution(spec, truth)
print(f"{len(dist)} strings, total mass {sum(p for _, p in dist):.12f}")
for s, p in dist[:8]:
    print(f"  {' '.join(s) or '<empty>':10s} {p:.4f}")

# %% [markdown]
# Beam search over the same channel is an exact string-level search, so
# its 1-best is the mode of the distribution above.

# %%
print("1-best:", one_best(spec, truth).tokens)
for h in n_best(spec, truth, width=12, n=5):
    print(f"  {h.tokens}  logp={h.log_prob:.3f}")

# %% [markdown]
# The exact MBR choice weighs every string by its probability. Sampled MBR
# only sees S draws; agreement with the exact choice grows with S.

# %%
support = [Hypothesis(s, np.log(p)) for s, p in dist]
y_opt = mbr_rank(support, support, weights=[p for _, p in dist])[0]
print("exact MBR choice:", y_opt.tokens, f"expected utility {y_opt.score:.4f}")

rng = np.random.default_rng(0)
for S in (5, 10, 50, 200, 1000):
    hits = 0
    for _ in range(100):
        draws = [sample_hypothesis(spec, truth, rng) for _ in range(S)]
        hits += mbr_select(draws, draws).tokens == y_opt.tokens
    print(f"S={S:5d}  agreement {hits}%")
