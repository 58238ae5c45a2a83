import numpy as np
import pytest
import torch

from dysflm.data import SynthSpec, generate_synthetic_corpus
from dysflm.lora import LoraConfig
from dysflm.pipeline import ModelSpec, build_detector, vocabulary_for

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SynthSpec(n_clips=60, seed=11))


@pytest.fixture
def tiny_detector(small_corpus):
    """d_model=16 detector over the small corpus vocabulary."""
    vocab = vocabulary_for(small_corpus)
    spec = ModelSpec(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=128, projector_hidden=24,
                     lora=LoraConfig(rank=4))
    return build_detector(vocab, 16, small_corpus.schema, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
