"""Clip records, manifests, batching and the synthetic stuttered-speech corpus.

Gold labels of a synthetic clip are a fixed function of its transcript and
its acoustic features:

* a filler token (``uh``/``um``) anywhere            -> Int
* two adjacent identical lexical words                -> Wrd
* a fragment ``x-`` right before a word starting ``x`` -> Snd
* mean of feature channel 0 above its threshold       -> Pro
* mean of feature channel 1 above its threshold       -> Blk
* mean of feature channel 2 above its threshold       -> Mod (ksof only)

Transcripts and features are sampled independently, so lexical cues never
leak into the features and acoustic cues never leak into the text.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .asr import ChannelSpec, mbr_candidates, n_best, one_best
from .decoding import Hypothesis
from .fusion import AcousticFeatures, Batch, DataError, assemble_input, pool_features
from .labels import Dysfluency, LabelSet, SchemaError, schema_classes, serialize_labels
from .lm import ModelInput
from .vocab import Vocabulary, label_text_to_tokens

log = logging.getLogger(__name__)

MODES = ("1-best", "N-best", "Phon", "MBR")
SPLITS = ("train", "dev", "test")
FIELD_OF_MODE = {"1-best": "hyp_1best", "N-best": "hyp_nbest", "Phon": "hyp_phon", "MBR": "hyp_mbr"}

CONTENT_WORDS = (
    "apple", "baby", "bread", "call", "chair", "city", "cold", "dinner", "door", "dream",
    "family", "farm", "fish", "game", "garden", "girl", "happy", "horse", "house", "job",
    "kitchen", "letter", "light", "money", "morning", "music", "night", "paper", "party", "people",
    "rain", "river", "road", "school", "story", "summer", "table", "teacher", "time", "water",
)
FILLERS = ("uh", "um")
FILLER_PHONES = {"uh": ["ʌ"], "um": ["ʌ", "m"]}

# (finetuned, layer) -> multiplier on the acoustic decision margin.
SNR_SCALE = {(True, 24): 1.0, (True, 12): 0.5, (False, 12): 0.4, (False, 24): 0.3}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from one root seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def torch_substream(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(int(substream(seed, name).integers(2**62)))


def fragment_of(word: str) -> str:
    return word[0] + "-"


def is_fragment(tok: str) -> bool:
    return len(tok) == 2 and tok.endswith("-")


def is_filler(tok: str) -> bool:
    return tok in FILLERS


def is_lexical_word(tok: str) -> bool:
    return not is_fragment(tok) and not is_filler(tok)


def word_alphabet(content: Sequence[str] = CONTENT_WORDS) -> tuple[str, ...]:
    frags = sorted({fragment_of(w) for w in content})
    return tuple(sorted(content)) + FILLERS + tuple(frags)


def to_phones(tokens: Sequence[str]) -> list[str]:
    out: list[str] = []
    for t in tokens:
        if is_filler(t):
            out.extend(FILLER_PHONES[t])
        elif is_fragment(t):
            out.append(t[0])
        else:
            out.extend(t)
    return out


def phone_alphabet(content: Sequence[str] = CONTENT_WORDS) -> tuple[str, ...]:
    phones = set(to_phones(list(content) + list(FILLERS)))
    return tuple(sorted(phones))


def lexical_labels(tokens: Sequence[str]) -> set[Dysfluency]:
    found = set()
    for i, t in enumerate(tokens):
        if is_filler(t):
            found.add(Dysfluency.INT)
        if i + 1 < len(tokens):
            nxt = tokens[i + 1]
            if is_lexical_word(t) and t == nxt:
                found.add(Dysfluency.WRD)
            if is_fragment(t) and is_lexical_word(nxt) and nxt.startswith(t[0]):
                found.add(Dysfluency.SND)
    return found


def acoustic_labels(features: np.ndarray, thresholds: Sequence[float], schema: str) -> set[Dysfluency]:
    means = np.asarray(features, dtype=np.float64).mean(axis=0)
    found = set()
    if means[0] > thresholds[0]:
        found.add(Dysfluency.PRO)
    if means[1] > thresholds[1]:
        found.add(Dysfluency.BLK)
    if Dysfluency.MOD in schema_classes(schema) and means[2] > thresholds[2]:
        found.add(Dysfluency.MOD)
    return found


def gold_labels(tokens: Sequence[str], features: np.ndarray, thresholds: Sequence[float], schema: str) -> LabelSet:
    return LabelSet(frozenset(lexical_labels(tokens) | acoustic_labels(features, thresholds, schema)))


@dataclass
class ClipExample:
    id: str
    features: AcousticFeatures
    transcript: list[str]
    hypotheses: dict[str, list[Hypothesis]]
    labels: LabelSet
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.hypotheses:
            raise DataError(f"clip {self.id!r} carries no hypotheses")


@dataclass
class SynthSpec:
    n_clips: int = 1000
    frames: int = 150
    feat_dim: int = 16
    schema: str = "sep28k"
    min_words: int = 4
    max_words: int = 8
    filler_rate: float = 0.25
    repetition_rate: float = 0.25
    fragment_rate: float = 0.25
    block_rate: float = 0.25
    prolongation_rate: float = 0.25
    modified_rate: float = 0.25
    thresholds: tuple[float, float, float] = (0.5, 0.5, 0.5)
    acoustic_margin: float = 0.5
    frame_noise: float = 1.0
    feature_layer: int = 24
    feature_finetuned: bool = True
    asr_sub: float = 0.04
    asr_delete: float = 0.02
    asr_insert: float = 0.02
    asr_filler_drop: float = 0.2
    asr_fragment_drop: float = 0.3
    asr_collapse: float = 0.2
    phone_sub: float = 0.03
    nbest_width: int = 12
    nbest_n: int = 10
    mbr_samples: int = 10
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self) -> None:
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        schema_classes(self.schema)
        if self.feat_dim < 3:
            raise ValueError("feat_dim must be >= 3 (channels 0-2 carry the acoustic cues)")
        if not 1 <= self.min_words <= self.max_words <= len(CONTENT_WORDS):
            raise ValueError("need 1 <= min_words <= max_words <= lexicon size")
        if not all(math.isfinite(t) for t in self.thresholds):
            raise ValueError("thresholds must be finite")
        for name in ("filler_rate", "repetition_rate", "fragment_rate", "block_rate", "prolongation_rate",
                     "modified_rate", "asr_sub", "asr_delete", "asr_insert", "asr_filler_drop",
                     "asr_fragment_drop", "asr_collapse", "phone_sub"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} must lie in [0, 1]")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three fractions summing to 1")
        if (self.feature_finetuned, self.feature_layer) not in SNR_SCALE:
            raise ValueError(f"unsupported feature condition layer={self.feature_layer}")

    @property
    def effective_margin(self) -> float:
        return self.acoustic_margin * SNR_SCALE[(self.feature_finetuned, self.feature_layer)]

    def class_rates(self) -> dict[Dysfluency, float]:
        rates = {
            Dysfluency.BLK: self.block_rate,
            Dysfluency.INT: self.filler_rate,
            Dysfluency.PRO: self.prolongation_rate,
            Dysfluency.SND: self.fragment_rate,
            Dysfluency.WRD: self.repetition_rate,
            Dysfluency.MOD: self.modified_rate,
        }
        return {c: rates[c] for c in schema_classes(self.schema)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        d["split_fractions"] = list(self.split_fractions)
        return d


def word_channel(spec: SynthSpec) -> ChannelSpec:
    """Orthographic channel: neighbour confusions, dropped fillers/fragments,
    collapsed repetitions."""
    alphabet = word_alphabet()
    words = sorted(CONTENT_WORDS)
    confusion = {}
    for i, w in enumerate(words):
        if spec.asr_sub > 0:
            left, right = words[i - 1], words[(i + 1) % len(words)]
            confusion[w] = {w: 1.0 - spec.asr_sub, left: spec.asr_sub / 2, right: spec.asr_sub / 2}
    overrides = {f: spec.asr_filler_drop for f in FILLERS}
    overrides.update({f: spec.asr_fragment_drop for f in alphabet if is_fragment(f)})
    insertion = {w: 1.0 / len(words) for w in words}
    return ChannelSpec(alphabet, confusion, spec.asr_delete, overrides, spec.asr_insert, insertion,
                       spec.asr_collapse, kind="word", seed=spec.seed)


def phone_channel(spec: SynthSpec) -> ChannelSpec:
    alphabet = phone_alphabet()
    confusion = {}
    if spec.phone_sub > 0:
        for i, p in enumerate(alphabet):
            confusion[p] = {p: 1.0 - spec.phone_sub, alphabet[(i + 1) % len(alphabet)]: spec.phone_sub}
    return ChannelSpec(alphabet, confusion, kind="phone", seed=spec.seed)


def _sample_transcript(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    k = int(rng.integers(spec.min_words, spec.max_words + 1))
    words = [str(w) for w in rng.choice(CONTENT_WORDS, size=k, replace=False)]
    if rng.random() < spec.filler_rate:
        for _ in range(int(rng.integers(1, 3))):
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, str(rng.choice(FILLERS)))
    if rng.random() < spec.repetition_rate:
        lexical = [i for i, t in enumerate(words) if is_lexical_word(t)]
        i = lexical[int(rng.integers(len(lexical)))]
        for _ in range(int(rng.integers(1, 3))):
            words.insert(i + 1, words[i])
    if rng.random() < spec.fragment_rate:
        # First occurrence of a word, so a repetition pair is never split.
        lexical = [i for i, t in enumerate(words) if is_lexical_word(t) and (i == 0 or words[i - 1] != t)]
        i = lexical[int(rng.integers(len(lexical)))]
        for _ in range(int(rng.integers(1, 3))):
            words.insert(i, fragment_of(words[i]))
    return words


def _sample_features(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((spec.frames, spec.feat_dim)) * spec.frame_noise
    margin = spec.effective_margin
    rates = (spec.prolongation_rate, spec.block_rate, spec.modified_rate)
    for ch in range(3):
        on = rng.random() < rates[ch]
        x[:, ch] += spec.thresholds[ch] + (margin if on else -margin)
    return x.astype(np.float32)


def _split_assignment(n: int, fractions: Sequence[float], rng: np.random.Generator) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_dev = min(n_dev, n - n_train)
    order = rng.permutation(n)
    out = [""] * n
    for rank, idx in enumerate(order):
        out[idx] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    return out


@dataclass
class Manifest:
    schema: str
    examples: list[ClipExample]

    def split(self, name: str) -> list[ClipExample]:
        return [e for e in self.examples if e.split == name]

    def by_id(self) -> dict[str, ClipExample]:
        return {e.id: e for e in self.examples}

    def lexicon(self) -> set[str]:
        toks: set[str] = set()
        for e in self.examples:
            toks.update(e.transcript)
            for hyps in e.hypotheses.values():
                for h in hyps:
                    toks.update(h.tokens)
        return toks


def generate_synthetic_corpus(spec: SynthSpec) -> Manifest:
    """Deterministic corpus for ``spec.seed``; see the module docstring for the rules."""
    data_rng = substream(spec.seed, "data")
    asr_rng = substream(spec.seed, "sampling")
    splits = _split_assignment(spec.n_clips, spec.split_fractions, substream(spec.seed, "splits"))
    for cls, rate in spec.class_rates().items():
        if rate == 0.0:
            log.warning("class %s is unreachable with rate 0", cls.value)
    wch, pch = word_channel(spec), phone_channel(spec)
    examples = []
    for idx in range(spec.n_clips):
        transcript = _sample_transcript(spec, data_rng)
        feats = _sample_features(spec, data_rng)
        labels = gold_labels(transcript, feats, spec.thresholds, spec.schema)
        hyps = {
            "1-best": [one_best(wch, transcript)],
            "N-best": list(n_best(wch, transcript, spec.nbest_width, spec.nbest_n)),
            "Phon": [one_best(pch, to_phones(transcript))],
            "MBR": mbr_candidates(wch, transcript, spec.mbr_samples, asr_rng),
        }
        examples.append(ClipExample(
            id=f"clip{idx:05d}",
            features=AcousticFeatures(feats, spec.feature_layer, spec.feature_finetuned),
            transcript=transcript,
            hypotheses=hyps,
            labels=labels,
            split=splits[idx],
        ))
    return Manifest(spec.schema, examples)


# -- manifest files ---------------------------------------------------------

FEAT_MAGIC = b"F32M"


class ManifestError(ValueError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("invalid manifest:\n  " + "\n  ".join(problems))
        self.problems = list(problems)


def write_features(path: Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC + struct.pack("<II", *values.shape))
        fh.write(values.tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEAT_MAGIC:
        raise DataError(f"{path}: not a feature matrix file")
    rows, cols = struct.unpack("<II", raw[4:12])
    values = np.frombuffer(raw, dtype="<f4", offset=12)
    if values.size != rows * cols:
        raise DataError(f"{path}: expected {rows}x{cols} values, found {values.size}")
    return values.reshape(rows, cols).astype(np.float32)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _hyp_list(hyps: Sequence[Hypothesis]) -> list[dict]:
    out = []
    for h in hyps:
        d = {"text": h.text, "score": float(h.rank_score), "log_prob": float(h.log_prob)}
        out.append(d)
    return out


def _parse_hyp_list(items: Sequence[Mapping]) -> list[Hypothesis]:
    out = []
    for d in items:
        log_prob = float(d.get("log_prob", d["score"]))
        score = float(d["score"])
        out.append(Hypothesis(tuple(d["text"].split()), log_prob, True, None if score == log_prob else score))
    return out


def example_to_record(e: ClipExample, schema: str, features: dict) -> dict:
    rec = {"id": e.id, "schema": schema, "split": e.split, "transcript": " ".join(e.transcript)}
    for mode, fld in FIELD_OF_MODE.items():
        hyps = e.hypotheses.get(mode)
        if hyps is None:
            continue
        if mode in ("1-best", "Phon"):
            rec[fld] = hyps[0].text if hyps else ""
        else:
            rec[fld] = _hyp_list(hyps)
    rec["labels"] = e.labels.tags
    rec["features"] = features
    return rec


def save_manifest(manifest: Manifest, path: str | Path, inline_features: bool = False) -> None:
    """One JSON record per line; features inline or as sidecar ``.f32`` files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feat_dir = path.parent / f"{path.stem}.feats"
    if not inline_features:
        feat_dir.mkdir(exist_ok=True)
    lines = []
    for e in manifest.examples:
        feats = {"layer": e.features.layer, "finetuned": e.features.finetuned}
        if inline_features:
            feats["rows"] = [[float(v) for v in row] for row in e.features.values]
        else:
            write_features(feat_dir / f"{e.id}.f32", e.features.values)
            feats["path"] = f"{feat_dir.name}/{e.id}.f32"
        lines.append(json.dumps(example_to_record(e, manifest.schema, feats), ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _record_to_example(rec: Mapping, base: Path) -> ClipExample:
    hyps: dict[str, list[Hypothesis]] = {}
    for mode, fld in FIELD_OF_MODE.items():
        if fld not in rec or rec[fld] is None:
            continue
        val = rec[fld]
        if isinstance(val, str):
            hyps[mode] = [Hypothesis(tuple(val.split()))]
        else:
            hyps[mode] = _parse_hyp_list(val)
    fspec = rec["features"]
    if "rows" in fspec:
        values = np.asarray(fspec["rows"], dtype=np.float32)
    else:
        fpath = base / fspec["path"]
        if not fpath.exists():
            raise DataError(f"features file {fspec['path']} is missing")
        values = read_features(fpath)
    feats = AcousticFeatures(values, int(fspec.get("layer", 24)), bool(fspec.get("finetuned", True)))
    labels = LabelSet.of(*rec["labels"])
    return ClipExample(rec["id"], feats, rec["transcript"].split(), hyps, labels, rec["split"])


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate; every offending record id is reported at once."""
    path = Path(path)
    problems: list[str] = []
    examples: list[ClipExample] = []
    seen: set[str] = set()
    schemas: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            problems.append(f"line {lineno}: not valid JSON ({err.msg})")
            continue
        rid = rec.get("id", f"<line {lineno}>")
        schema = rec.get("schema")
        schemas.add(schema)
        if rid in seen:
            problems.append(f"{rid}: duplicate id")
            continue
        seen.add(rid)
        if rec.get("split") not in SPLITS:
            problems.append(f"{rid}: unknown split {rec.get('split')!r}")
            continue
        try:
            allowed = {c.value for c in schema_classes(schema)}
        except SchemaError as err:
            problems.append(f"{rid}: {err}")
            continue
        bad = [t for t in rec.get("labels", []) if t not in allowed]
        if bad:
            problems.append(f"{rid}: labels {bad} not valid under schema {schema!r}")
            continue
        try:
            examples.append(_record_to_example(rec, path.parent))
        except (DataError, KeyError, ValueError) as err:
            problems.append(f"{rid}: {err}")
    if len(schemas) > 1:
        problems.append(f"mixed schemas in one manifest: {sorted(map(str, schemas))}")
    if problems:
        raise ManifestError(problems)
    if not examples:
        raise ManifestError(["manifest has no records"])
    return Manifest(schemas.pop(), examples)


# -- model inputs and batching -----------------------------------------------

@dataclass
class EncodedClip:
    """Token ids (prefix slot left empty) plus pooled features for one clip."""

    id: str
    inp: ModelInput
    pooled: np.ndarray
    labels: LabelSet | None = None


def encode_example(e: ClipExample, vocab: Vocabulary, mode: str, schema: str, with_labels: bool = True,
                   drop_hypotheses: bool = False, max_tokens: int = 1024) -> EncodedClip:
    from .decoding import flatten_candidates

    cands = e.hypotheses.get(mode)
    if cands is None:
        raise DataError(f"clip {e.id!r} has no hypotheses for mode {mode!r}")
    hyp = [] if drop_hypotheses or not cands else vocab.encode(flatten_candidates(cands))
    label_ids = None
    if with_labels:
        label_ids = vocab.encode(label_text_to_tokens(serialize_labels(e.labels, schema)))
    inp = assemble_input(None, hyp, label_ids, vocab, max_tokens)
    return EncodedClip(e.id, inp, pool_features(e.features).astype(np.float32), e.labels)


def truncate_input(inp: ModelInput, max_len: int, lab_id: int) -> ModelInput:
    """Cut hypothesis tokens just before ``[LAB]`` until ``max_len`` fits."""
    excess = len(inp.ids) - max_len
    if excess <= 0:
        return inp
    try:
        lab = len(inp.ids) - 1 - inp.ids[::-1].index(lab_id)
    except ValueError:
        lab = len(inp.ids)
    start = lab - excess
    if start < 1:
        raise DataError("sequence cannot be truncated without cutting label tokens")
    keep = list(range(start)) + list(range(lab, len(inp.ids)))
    return ModelInput([inp.ids[i] for i in keep], inp.prefix, [inp.loss_mask[i] for i in keep])


def make_batches(items: Sequence[EncodedClip], micro_batch: int, pad_id: int, lab_id: int, max_len: int = 1024,
                 seed: int = 0, epoch: int = 0, shuffle: bool = True) -> list[Batch]:
    """Seeded per-epoch shuffle, then right-padding to each batch's maximum."""
    if not items:
        raise ValueError("cannot batch an empty example list")
    order = substream(seed, f"epoch{epoch}").permutation(len(items)) if shuffle else np.arange(len(items))
    batches = []
    for start in range(0, len(items), micro_batch):
        chunk = [items[i] for i in order[start:start + micro_batch]]
        inputs = [truncate_input(c.inp, max_len, lab_id) for c in chunk]
        T = max(len(x.ids) for x in inputs)
        ids = torch.full((len(inputs), T), pad_id, dtype=torch.long)
        mask = torch.zeros((len(inputs), T), dtype=torch.bool)
        for i, x in enumerate(inputs):
            ids[i, : len(x.ids)] = torch.tensor(x.ids)
            mask[i, : len(x.ids)] = torch.tensor(x.loss_mask)
        pooled = torch.from_numpy(np.stack([c.pooled for c in chunk]))
        batches.append(Batch(ids, mask, None, [len(x.ids) for x in inputs], pooled=pooled,
                             ids_list=[c.id for c in chunk]))
    return batches
