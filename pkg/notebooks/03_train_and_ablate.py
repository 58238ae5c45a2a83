# %% [markdown]
# # Training the detector and ablating each modality
#
# The same configuration as the end-to-end acceptance tests. Each model
# trains in well under a minute on one core.

# %%
import time

import torch

from dysflm.data import SynthSpec, generate_synthetic_corpus
from dysflm.lora import LoraConfig
from dysflm.pipeline import apply_ablation, build_detector, encode_split, evaluate_predictions, ModelSpec, \
    predict_split, vocabulary_for
from dysflm.training import TrainConfig, train

torch.set_num_threads(1)

corpus = generate_synthetic_corpus(SynthSpec(n_clips=2750, split_fractions=(2000 / 2750, 250 / 2750, 500 / 2750),
                                             seed=3))
model = ModelSpec(d_model=128, d_ff=512, projector_dropout=0.5,
                  lora=LoraConfig(rank=64, targets=("q", "k", "v", "o")))
cfg = TrainConfig(lr0=3e-3, max_epochs=60, weight_decay=0.1)
vocab = vocabulary_for(corpus)


def run(ablation):
    det = build_detector(vocab, corpus.examples[0].features.shape[1], corpus.schema, model)
    apply_ablation(det, ablation)
    t = time.time()
    res = train(det, encode_split(corpus.split("train"), det, "1-best", ablation),
                encode_split(corpus.split("dev"), det, "1-best", ablation), cfg)
    test = corpus.split("test")
    rep = evaluate_predictions(predict_split(det, test, "1-best", ablation), test, corpus.schema)
    print(f"{ablation:14s} best epoch {res.best_epoch:2d}  {time.time() - t:5.0f}s")
    return rep


reports = {a: run(a) for a in ("fused", "acoustic-only", "lexical-only")}

# %% [markdown]
# Acoustic-only never sees the hypotheses, so it cannot find fillers,
# repetitions or fragments. Lexical-only gets a zeroed prefix and loses
# blocks and prolongations.

# %%
for name, rep in reports.items():
    print(rep.to_table(name))

# %% [markdown]
# Repetitions (`Wrd`) are the weak spot of the fused model. Spotting one
# means matching a word against its neighbour, and the frozen backbone is
# random, so the adapters have little attention structure to build on.
