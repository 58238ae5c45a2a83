# %% [markdown]
# # A look at the synthetic corpus
#
# Every clip carries a transcript, frame-level features and recogniser
# hypotheses. Labels come from two disjoint sources: the lexical ones are
# read off the 1-best hypothesis, the acoustic ones from feature channels 0-2.

# %%
from collections import Counter

import numpy as np

from dysflm.data import SynthSpec, acoustic_labels, generate_synthetic_corpus, lexical_labels

spec = SynthSpec(n_clips=400, seed=1, schema="ksof")
corpus = generate_synthetic_corpus(spec)
print(Counter(e.split for e in corpus.examples))

for e in corpus.examples[:5]:
    print(" ".join(e.transcript))
    print("   1-best:", " ".join(e.hypotheses["1-best"][0].tokens))
    print("   labels:", sorted(c.value for c in e.labels))

# %%
counts = Counter(c.value for e in corpus.examples for c in e.labels)
print({k: round(v / len(corpus.examples), 3) for k, v in sorted(counts.items())})

# %% [markdown]
# Features: each acoustic class shifts one channel's mean above or below its
# threshold. Pooled channel means separate cleanly by class.

# %%
for ch, name in enumerate(("Pro", "Blk", "Mod")):
    pos = [e.features.values[:, ch].mean() for e in corpus.examples if name in {c.value for c in e.labels}]
    neg = [e.features.values[:, ch].mean() for e in corpus.examples if name not in {c.value for c in e.labels}]
    print(f"channel {ch} ({name}): with {np.mean(pos):+.2f}  without {np.mean(neg):+.2f}")

# %% [markdown]
# Sanity check: the two label sources together reproduce every gold set.

# %%
agree = sum(
    set(lexical_labels(e.hypotheses["1-best"][0].tokens))
    | acoustic_labels(e.features.values, spec.thresholds, spec.schema) == set(e.labels)
    for e in corpus.examples
)
print(f"{agree}/{len(corpus.examples)} clips reconstructed from the rules")
