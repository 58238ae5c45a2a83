"""Dysfluency detection by label generation with a LoRA-tuned toy causal LM.

An acoustic prefix and ASR hypotheses go in, a label string such as
``Blk;Int`` comes out. Everything runs on a synthetic corpus with a
simulated ASR channel.
"""

__version__ = "0.1.0"
