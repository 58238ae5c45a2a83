"""Dysfluency label vocabulary, multi-hot label sets and label-string I/O."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator


class Dysfluency(str, enum.Enum):
    BLK = "Blk"
    INT = "Int"
    PRO = "Pro"
    SND = "Snd"
    WRD = "Wrd"
    MOD = "Mod"

    @property
    def rank(self) -> int:
        return _CANONICAL.index(self)


_CANONICAL = (
    Dysfluency.BLK,
    Dysfluency.INT,
    Dysfluency.PRO,
    Dysfluency.SND,
    Dysfluency.WRD,
    Dysfluency.MOD,
)

SCHEMAS: dict[str, tuple[Dysfluency, ...]] = {
    "sep28k": _CANONICAL[:5],
    "fluencybank": _CANONICAL[:5],
    "ksof": _CANONICAL,
}

NONE_TAG = "None"
SEPARATOR = ";"

# Acoustic-cue vs lexical-cue classes of the synthetic corpus.
ACOUSTIC_CLASSES = (Dysfluency.BLK, Dysfluency.PRO, Dysfluency.MOD)
LEXICAL_CLASSES = (Dysfluency.INT, Dysfluency.SND, Dysfluency.WRD)


class SchemaError(ValueError):
    """A label is not part of the active schema."""


def schema_classes(schema: str) -> tuple[Dysfluency, ...]:
    try:
        return SCHEMAS[schema]
    except KeyError:
        raise SchemaError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMAS)}") from None


def table_order(schema: str) -> tuple[Dysfluency, ...]:
    """Column order used by the results table (Mod leads for KSoF)."""
    classes = schema_classes(schema)
    if Dysfluency.MOD in classes:
        return (Dysfluency.MOD,) + tuple(c for c in classes if c is not Dysfluency.MOD)
    return classes


@dataclass(frozen=True)
class LabelSet:
    """Multi-hot set of dysfluency classes; iterates in canonical order."""

    members: frozenset[Dysfluency] = frozenset()

    @classmethod
    def of(cls, *items: Dysfluency | str) -> "LabelSet":
        return cls(frozenset(Dysfluency(i) for i in items))

    def __iter__(self) -> Iterator[Dysfluency]:
        return iter(sorted(self.members, key=lambda c: c.rank))

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, item: object) -> bool:
        try:
            return Dysfluency(item) in self.members
        except ValueError:
            return False

    def __repr__(self) -> str:
        return "LabelSet{" + ", ".join(c.value for c in self) + "}"

    @property
    def tags(self) -> list[str]:
        return [c.value for c in self]

    def validate(self, schema: str) -> "LabelSet":
        allowed = schema_classes(schema)
        bad = [c.value for c in self if c not in allowed]
        if bad:
            raise SchemaError(f"classes {bad} not valid under schema {schema!r}")
        return self


def serialize_labels(labels: LabelSet | Iterable[Dysfluency | str], schema: str = "ksof") -> str:
    """Render a label set as ``"Tag;Tag"`` in canonical order, or ``"None"``.

    >>> serialize_labels(LabelSet.of("Wrd", "Pro"))
    'Pro;Wrd'
    """
    if not isinstance(labels, LabelSet):
        labels = LabelSet.of(*labels)
    labels.validate(schema)
    if not labels:
        return NONE_TAG
    return SEPARATOR.join(labels.tags)


def parse_labels(text: str, schema: str = "ksof") -> LabelSet:
    """Extract the valid class tags from generated text.

    Total by design: fragments that are not an exact tag of ``schema`` are
    dropped, so malformed generations degrade to fewer labels instead of
    raising.
    """
    allowed = {c.value: c for c in schema_classes(schema)}
    if not isinstance(text, str):
        return LabelSet()
    found = set()
    for fragment in text.split(SEPARATOR):
        tag = fragment.strip()
        if tag in allowed:
            found.add(allowed[tag])
    return LabelSet(frozenset(found))


def all_label_sets(schema: str) -> list[LabelSet]:
    """Every subset of the schema's classes (2**k sets)."""
    classes = schema_classes(schema)
    out = []
    for mask in range(1 << len(classes)):
        out.append(LabelSet(frozenset(c for i, c in enumerate(classes) if mask >> i & 1)))
    return out
