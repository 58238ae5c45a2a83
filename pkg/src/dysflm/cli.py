"""``dysflm`` command line: gen-data, train, predict, rescore-mbr, evaluate.

Configuration overrides use ``--set section.field=value`` (repeatable).
Sections: ``synth`` (corpus), ``train``, ``model``, ``lora`` and ``mbr``.
Values are parsed as JSON when possible (``0.5``, ``[1,2]``, ``true``),
else taken as strings; comma lists fill tuple fields.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .asr import ChannelConfigError, ChannelSpec, sample_hypothesis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    MODES, SPLITS, ClipExample, DataError, Manifest, ManifestError, SynthSpec, atomic_write_text,
    generate_synthetic_corpus, load_manifest, save_manifest, substream, word_channel,
)
from .decoding import Hypothesis, MbrConfig, mbr_rank
from .labels import LabelSet, SchemaError, parse_labels, serialize_labels
from .lora import LoraConfig
from .metrics import multilabel_prf
from .pipeline import ABLATIONS, ModelSpec, build_detector, encode_split, predict_split, vocabulary_for
from .training import NumericError, TrainConfig, train

log = logging.getLogger("dysflm")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

SECTIONS = {
    "synth": SynthSpec,
    "train": TrainConfig,
    "model": ModelSpec,
    "lora": LoraConfig,
    "mbr": MbrConfig,
}


class UsageError(Exception):
    pass


def _coerce(text: str, default):
    if isinstance(default, tuple):
        try:
            val = json.loads(text)
        except json.JSONDecodeError:
            val = text.split(",")
        if not isinstance(val, list):
            val = [val]
        kind = type(default[0]) if default else str
        return tuple(kind(v) for v in val)
    try:
        val = json.loads(text)
    except json.JSONDecodeError:
        val = text
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise UsageError(f"expected true/false, got {text!r}")
        return val
    if isinstance(default, (int, float)) and not isinstance(val, (int, float)):
        raise UsageError(f"expected a number, got {text!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(val, float) and not val.is_integer():
            raise UsageError(f"expected an integer, got {text!r}")
        return int(val)
    if isinstance(default, float):
        return float(val)
    return val if isinstance(val, str) else text


def parse_overrides(items: Sequence[str], allowed: Sequence[str]) -> dict[str, dict]:
    """``["train.lr0=1e-3", ...]`` -> ``{"train": {"lr0": 0.001}}``; unknown keys are usage errors."""
    out: dict[str, dict] = {s: {} for s in allowed}
    for item in items:
        key, eq, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not eq or not dot:
            raise UsageError(f"override {item!r} is not of the form section.field=value")
        if section not in allowed:
            raise UsageError(f"unknown override section {section!r} (this command accepts: {', '.join(allowed)})")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        if name not in fields:
            raise UsageError(f"unknown override key {key!r}")
        default = SECTIONS[section]()
        out[section][name] = _coerce(value, getattr(default, name))
    return out


def _build(section: str, overrides: dict[str, dict], **fixed):
    try:
        return SECTIONS[section](**{**overrides.get(section, {}), **fixed})
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid {section} configuration: {err}") from None


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args, ov) -> None:
    spec = _build("synth", ov, seed=args.seed)
    manifest = generate_synthetic_corpus(spec)
    out = Path(args.out)
    save_manifest(manifest, out, inline_features=args.inline_features)
    atomic_write_text(out.with_suffix(".spec.json"), json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d clips to %s", len(manifest.examples), out)


def cmd_train(args, ov) -> None:
    torch.manual_seed(args.seed)
    manifest = load_manifest(args.manifest)
    cfg = _build("train", ov, seed=args.seed, decoder_mode=args.mode)
    lora = _build("lora", ov)
    model = _build("model", ov, lora=lora, seed=args.seed)
    vocab = vocabulary_for(manifest)
    feat_dim = manifest.examples[0].features.shape[1]
    detector = build_detector(vocab, feat_dim, manifest.schema, model)
    detector.projector.zero_output = args.ablation == "lexical-only"
    train_items = encode_split(manifest.split("train"), detector, args.mode, args.ablation)
    dev_items = encode_split(manifest.split("dev"), detector, args.mode, args.ablation)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(detector, train_items, dev_items, cfg, log_path=out / "train_log.jsonl")
    extra = {"train": dataclasses.asdict(cfg), "ablation": args.ablation, "mode": args.mode}
    save_checkpoint(detector, out / "model.ckpt", extra)
    atomic_write_text(out / "BEST", f"epoch={result.best_epoch} dev_loss={result.best_dev_loss:.6f}\n")
    log.info("best epoch %d (dev loss %.4f)", result.best_epoch, result.best_dev_loss)


def _selected(manifest: Manifest, split: str) -> list[ClipExample]:
    return list(manifest.examples) if split == "all" else manifest.split(split)


def cmd_predict(args, ov) -> None:
    detector = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if manifest.schema != detector.schema:
        raise DataError(f"manifest schema {manifest.schema!r} differs from the model's {detector.schema!r}")
    detector.eval()
    preds = predict_split(detector, _selected(manifest, args.split), args.mode, args.ablation)
    lines = [f"{cid}\t{serialize_labels(labels, detector.schema)}\t{raw}" for cid, labels, raw in preds]
    atomic_write_text(args.out, "".join(line + "\n" for line in lines))


def cmd_rescore_mbr(args, ov) -> None:
    manifest = load_manifest(args.manifest)
    mbr = _build("mbr", ov, candidate_source=args.source)
    if args.channel:
        channel = ChannelSpec.load(args.channel)
    else:
        channel = word_channel(_build("synth", ov, seed=args.seed))
    rng = substream(args.seed, "sampling")
    examples = []
    for e in manifest.examples:
        if mbr.candidate_source == "samples":
            samples = [sample_hypothesis(channel, e.transcript, rng) for _ in range(mbr.S)]
            ranked = mbr_rank(samples, samples, mbr.utility)
        else:
            provided = e.hypotheses.get("N-best")
            if not provided:
                raise DataError(f"clip {e.id!r} has no hyp_nbest list to rescore")
            # Anchors are the list itself, weighted by renormalised probability.
            lp = np.array([h.log_prob for h in provided], dtype=np.float64)
            w = np.exp(lp - lp.max())
            anchors = [Hypothesis(h.tokens, h.log_prob) for h in provided]
            ranked = mbr_rank(anchors, anchors, mbr.utility, list(w / w.sum()))
        hyps = dict(e.hypotheses)
        hyps["MBR"] = ranked
        examples.append(dataclasses.replace(e, hypotheses=hyps))
    save_manifest(Manifest(manifest.schema, examples), args.out, inline_features=args.inline_features)


def _read_predictions(path: str, schema: str) -> dict[str, LabelSet]:
    preds = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected id<TAB>labels[<TAB>raw]")
        if parts[0] in preds:
            raise DataError(f"{path}:{lineno}: duplicate clip id {parts[0]!r}")
        preds[parts[0]] = parse_labels(parts[1], schema)
    if not preds:
        raise DataError(f"{path}: no predictions")
    return preds


def cmd_evaluate(args, ov) -> None:
    manifest = load_manifest(args.manifest)
    preds = _read_predictions(args.predictions, manifest.schema)
    gold = manifest.by_id()
    missing = sorted(set(preds) - set(gold))
    if missing:
        raise DataError(f"{len(missing)} predicted clip ids are not in the manifest, e.g. {missing[0]!r}")
    ids = sorted(preds)
    report = multilabel_prf([preds[i] for i in ids], [gold[i].labels for i in ids], manifest.schema)
    text = report.to_table() + "\n" + report.to_key_values()
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(args.out, text)


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dysflm", description="Dysfluency detection as label generation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, sections: Sequence[str], seed: bool = True):
        if sections:
            sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                            help=f"config override; sections: {', '.join(sections)} (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
        sp.set_defaults(sections=tuple(sections))

    g = sub.add_parser("gen-data", help="generate a synthetic corpus manifest")
    g.add_argument("--out", required=True, help="manifest path (.jsonl); features go to <stem>.feats/")
    g.add_argument("--inline-features", action="store_true", help="store features inside the manifest")
    common(g, ["synth"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train adapters, projector and label-token rows")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out-dir", required=True, help="receives model.ckpt, train_log.jsonl and BEST")
    t.add_argument("--mode", choices=MODES, default="1-best", help="ASR decoder mode (default 1-best)")
    t.add_argument("--ablation", choices=ABLATIONS, default="fused")
    t.add_argument("--threads", type=int, default=1, help="torch CPU threads (default 1)")
    common(t, ["train", "model", "lora"])
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write id<TAB>labels<TAB>raw lines")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--mode", choices=MODES, default="1-best")
    pr.add_argument("--split", choices=SPLITS + ("all",), default="test")
    pr.add_argument("--ablation", choices=ABLATIONS, default="fused")
    pr.add_argument("--out", required=True)
    pr.add_argument("--threads", type=int, default=1, help="torch CPU threads (default 1)")
    common(pr, [], seed=False)
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("rescore-mbr", help="fill hyp_mbr by sampling-based MBR")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True, help="output manifest path")
    r.add_argument("--source", choices=("samples", "provided"), default="samples",
                   help="samples: draw from the ASR channel; provided: rescore hyp_nbest")
    r.add_argument("--channel", help="channel spec JSON (default: the synth word channel)")
    r.add_argument("--inline-features", action="store_true")
    common(r, ["mbr", "synth"])
    r.set_defaults(func=cmd_rescore_mbr)

    e = sub.add_parser("evaluate", help="per-class and macro F1 of a predictions file")
    e.add_argument("--predictions", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="also write the report here")
    common(e, [], seed=False)
    e.set_defaults(func=cmd_evaluate)
    return p


def _one_line(err: BaseException) -> str:
    if isinstance(err, ManifestError):
        return "invalid manifest: " + "; ".join(err.problems)
    return " ".join(str(err).split()) or type(err).__name__


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if hasattr(args, "threads"):
        torch.set_num_threads(max(1, args.threads))
    try:
        overrides = parse_overrides(getattr(args, "set", []), args.sections)
        args.func(args, overrides)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"dysflm: error: {_one_line(err)}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as err:
        print(f"dysflm: numeric failure: {_one_line(err)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ManifestError, CheckpointError, ChannelConfigError, SchemaError, OSError, ValueError) as err:
        print(f"dysflm: error: {_one_line(err)}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
