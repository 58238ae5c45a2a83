"""Token vocabulary shared by the toy LM, the corpus and the label codec."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .labels import NONE_TAG, SEPARATOR, Dysfluency

PAD, BOS, EOS, SEP, LAB, UNK = "[PAD]", "[BOS]", "[EOS]", "[SEP]", "[LAB]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, SEP, LAB, UNK)
LABEL_TOKENS = tuple(c.value for c in Dysfluency) + (NONE_TAG,)


@dataclass
class Vocabulary:
    """Bidirectional token/id map.

    Specials come first, then the label alphabet, then the sorted lexical
    tokens, so ids are stable for a given lexicon.
    """

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        missing = [t for t in SPECIALS + LABEL_TOKENS if t not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks reserved tokens {missing}")

    @classmethod
    def build(cls, lexical: Iterable[str]) -> "Vocabulary":
        reserved = set(SPECIALS + LABEL_TOKENS)
        words = sorted({w for w in lexical if w not in reserved})
        return cls(list(SPECIALS + LABEL_TOKENS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def lab_id(self) -> int:
        return self.index[LAB]

    @property
    def label_ids(self) -> list[int]:
        return [self.index[t] for t in LABEL_TOKENS]

    @property
    def trainable_ids(self) -> list[int]:
        """Rows added for the detection task: label alphabet plus [LAB]/[EOS]."""
        return sorted(self.label_ids + [self.lab_id, self.eos_id])


def label_text_to_tokens(text: str) -> list[str]:
    """``"Blk;Int"`` -> ``["Blk", "Int"]``: one token per tag, no separator token.

    Without a separator every tag competes directly with ``[EOS]`` during
    greedy decoding, instead of one pooled "more labels follow" token.
    """
    return [part for part in text.split(SEPARATOR) if part]


def tokens_to_label_text(tokens: Sequence[str]) -> str:
    """Inverse of :func:`label_text_to_tokens`; stray tokens become fragments
    that the label parser discards."""
    return SEPARATOR.join(tokens)
