"""Single-file checkpoints.

Layout: ``MAGIC`` | u32 format version | u32 header length | UTF-8 JSON
header | raw little-endian float32 tensor data. The header holds the model
configuration, the vocabulary and a table of ``name -> (shape, offset)``.
Tensor names are namespaced: ``base/`` for frozen backbone weights,
``lora/`` for adapters, ``task/`` for the task-token rows and
``projector/`` for the acoustic projector, so a backbone can be restored
with or without its adapters.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .fusion import AcousticProjector, DysfluencyDetector
from .lm import CausalLM, LMConfig
from .lora import LoraConfig
from .vocab import Vocabulary

MAGIC = b"DYSFLMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _namespace(name: str) -> str:
    if name.startswith("projector."):
        return "projector/" + name[len("projector."):]
    name = name[len("lm."):]
    if ".adapter." in name:
        return "lora/" + name
    if name in ("task_emb", "task_out"):
        return "task/" + name
    return "base/" + name


def _lora_config(detector: DysfluencyDetector) -> dict | None:
    adapters = [lin.adapter for lin in detector.lm.lora_layers() if lin.adapter is not None]
    if not adapters:
        return None
    first = adapters[0]
    targets = sorted({a.target.rsplit(".", 1)[-1] for a in adapters})
    return asdict(LoraConfig(first.rank, first.alpha, first.dropout_p, tuple(targets)))


def save_checkpoint(detector: DysfluencyDetector, path: str | Path, extra: dict | None = None) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tensors = []
    blobs = []
    offset = 0
    for name, t in detector.state_dict().items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        tensors.append({"name": _namespace(name), "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    proj = detector.projector
    header = {
        "lm_config": detector.lm.cfg.to_dict(),
        "lora": _lora_config(detector),
        "projector": {"a": proj.in_dim, "hidden": proj.w1.shape[0], "dropout": proj.dropout_p},
        "schema": detector.schema,
        "vocab": detector.vocab.tokens,
        "extra": extra or {},
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(raw)) + raw)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[len(MAGIC): len(MAGIC) + 8])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + hlen].decode("utf-8"))
    body = memoryview(data)[start + hlen:]
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"])
        arrays[t["name"]] = arr.copy()
    return header, arrays


def load_checkpoint(path: str | Path, with_adapters: bool = True, dtype: torch.dtype = torch.float32) -> DysfluencyDetector:
    """Rebuild a detector; ``with_adapters=False`` restores the bare backbone."""
    header, arrays = read_checkpoint(path)
    cfg = LMConfig(**header["lm_config"])
    lm = CausalLM(cfg, dtype)
    lora = header.get("lora")
    if lora is not None and with_adapters:
        lora["targets"] = tuple(lora["targets"])
        lm.attach_lora(LoraConfig(**lora))
    p = header["projector"]
    projector = AcousticProjector(p["a"], cfg.d_model, p["hidden"], p["dropout"], dtype=dtype)
    detector = DysfluencyDetector(lm, projector, Vocabulary(header["vocab"]), header["schema"])
    state = detector.state_dict()
    by_ns = {_namespace(k): k for k in state}
    for ns_name, arr in arrays.items():
        if ns_name.startswith("lora/") and not with_adapters:
            continue
        if ns_name not in by_ns:
            raise CheckpointError(f"{path}: unexpected tensor {ns_name}")
        target = state[by_ns[ns_name]]
        if tuple(target.shape) != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {ns_name}: {arr.shape} vs {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr).to(target.dtype))
    missing = [ns for ns in by_ns if ns not in arrays]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks tensors {missing[:5]}")
    return detector
