import struct

import numpy as np
import pytest
import torch

from dysflm.checkpoint import MAGIC, VERSION, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from dysflm.lm import next_token_logits


def _perturb(det):
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in det.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * 0.05)


def test_roundtrip_preserves_outputs(tmp_path, tiny_detector):
    det = tiny_detector.eval()
    _perturb(det)
    save_checkpoint(det, tmp_path / "m.ckpt", extra={"note": 1})
    back = load_checkpoint(tmp_path / "m.ckpt").eval()
    feats = np.random.default_rng(0).normal(size=(4, 16))
    a = next_token_logits(det.lm, det.make_input(feats, ["rain"], None))
    b = next_token_logits(back.lm, back.make_input(feats, ["rain"], None))
    assert torch.equal(a, b)
    assert back.vocab.tokens == det.vocab.tokens and back.schema == det.schema


def test_namespaces_and_layout(tmp_path, tiny_detector):
    save_checkpoint(tiny_detector, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(MAGIC)
    assert struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])[0] == VERSION
    header, arrays = read_checkpoint(tmp_path / "m.ckpt")
    prefixes = {name.split("/")[0] for name in arrays}
    assert prefixes == {"base", "lora", "task", "projector"}
    assert all(a.dtype == np.float32 for a in arrays.values())
    assert "base/tok_emb" in arrays and "task/task_emb" in arrays


def test_load_without_adapters(tmp_path, tiny_detector):
    det = tiny_detector.eval()
    _perturb(det)
    save_checkpoint(det, tmp_path / "m.ckpt")
    bare = load_checkpoint(tmp_path / "m.ckpt", with_adapters=False)
    assert all(lin.adapter is None for lin in bare.lm.lora_layers())
    det.lm.detach_lora()
    ids = torch.tensor([[1, 2, 3]])
    assert torch.equal(det.lm(ids), bare.eval().lm(ids))


def test_version_mismatch_fails_loudly(tmp_path, tiny_detector):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_detector, path)
    raw = bytearray(path.read_bytes())
    raw[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")
