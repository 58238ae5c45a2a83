import json

import pytest

from dysflm.cli import build_parser, main, parse_overrides, UsageError
from dysflm.data import load_manifest
from dysflm.labels import serialize_labels

TINY = ["--set", "model.d_model=16", "--set", "model.n_heads=2", "--set", "model.d_ff=32",
        "--set", "model.max_seq_len=128", "--set", "model.projector_hidden=16", "--set", "lora.rank=2",
        "--set", "train.max_epochs=2"]


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "m.jsonl"
    assert main(["gen-data", "--out", str(path), "--seed", "7", "--set", "synth.n_clips=50"]) == 0
    return path


def test_gen_data_is_byte_identical(tmp_path, manifest):
    other = tmp_path / "m.jsonl"
    assert main(["gen-data", "--out", str(other), "--seed", "7", "--set", "synth.n_clips=50"]) == 0
    assert other.read_bytes() == manifest.read_bytes()
    assert (tmp_path / "m.spec.json").exists()


def test_overrides_parse_and_reject_unknown():
    ov = parse_overrides(["train.lr0=1e-3", "synth.thresholds=0.1,0.2,0.3", "lora.targets=q,k",
                          "synth.feature_finetuned=false"], ["train", "synth", "lora"])
    assert ov["train"] == {"lr0": 1e-3}
    assert ov["synth"] == {"thresholds": (0.1, 0.2, 0.3), "feature_finetuned": False}
    assert ov["lora"] == {"targets": ("q", "k")}
    for bad in (["train.nope=1"], ["train.lr0"], ["mbr.S=3"], ["train.max_epochs=abc"]):
        with pytest.raises(UsageError):
            parse_overrides(bad, ["train", "synth", "lora"])


def test_exit_codes(tmp_path, manifest, capsys):
    assert main(["gen-data"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "x.jsonl"), "--set", "synth.bogus=1"]) == 2
    assert main(["bogus-command"]) == 2
    assert main(["evaluate", "--predictions", str(tmp_path / "none.tsv"), "--manifest", str(manifest)]) == 3
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["predict", "--checkpoint", "x", "--manifest", str(bad), "--out", str(tmp_path / "p")]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("dysflm: error:") and len(err[-1].splitlines()) == 1
    assert main(["train", "--manifest", str(manifest), "--out-dir", str(tmp_path / "r"), *TINY,
                 "--set", "train.lr0=1e38"]) == 4


def test_evaluate_on_gold_is_perfect(tmp_path, manifest, capsys):
    m = load_manifest(manifest)
    preds = tmp_path / "gold.tsv"
    preds.write_text("".join(f"{e.id}\t{serialize_labels(e.labels, m.schema)}\t-\n" for e in m.examples))
    assert main(["evaluate", "--predictions", str(preds), "--manifest", str(manifest),
                 "--out", str(tmp_path / "r.txt")]) == 0
    table = capsys.readouterr().out.splitlines()
    f1_row = next(line for line in table if line.startswith("F1"))
    assert set(f1_row.split()[1:]) == {"1.00"}
    assert "macro_f1=1.000000" in (tmp_path / "r.txt").read_text()


def test_train_predict_evaluate_smoke(tmp_path, manifest, capsys):
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(manifest), "--out-dir", str(run), *TINY]) == 0
    assert {p.name for p in run.iterdir()} >= {"model.ckpt", "train_log.jsonl", "BEST"}
    logs = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in logs] == [1, 2]
    assert main(["predict", "--checkpoint", str(run / "model.ckpt"), "--manifest", str(manifest),
                 "--mode", "1-best", "--out", str(tmp_path / "p.tsv")]) == 0
    lines = (tmp_path / "p.tsv").read_text().splitlines()
    assert len(lines) == len(load_manifest(manifest).split("test"))
    assert all(len(line.split("\t")) == 3 for line in lines)
    assert main(["evaluate", "--predictions", str(tmp_path / "p.tsv"), "--manifest", str(manifest)]) == 0
    assert "macro_f1=" in capsys.readouterr().out


def test_rescore_mbr(tmp_path, manifest):
    out = tmp_path / "r.jsonl"
    assert main(["rescore-mbr", "--manifest", str(manifest), "--out", str(out), "--set", "mbr.S=4"]) == 0
    m = load_manifest(out)
    assert all(1 <= len(e.hypotheses["MBR"]) <= 4 for e in m.examples)
    out2 = tmp_path / "r2.jsonl"
    assert main(["rescore-mbr", "--manifest", str(manifest), "--out", str(out2), "--source", "provided"]) == 0
    for e in load_manifest(out2).examples:
        assert {h.tokens for h in e.hypotheses["MBR"]} <= {h.tokens for h in e.hypotheses["N-best"]}


def test_help_lists_every_flag():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0]
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
