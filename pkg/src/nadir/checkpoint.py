"""Binary checkpoint format.

Layout::

    b"NADR" | u32 version | u32 header_len | header (UTF-8 JSON) | float32 blobs

The header carries ``config``, ``src_vocab``, ``tgt_vocab``, ``extra`` and a
``tensors`` manifest of ``{name, shape, offset}`` entries, offsets counted in
bytes from the start of the blob region.  All integers and floats are
little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from ._io import atomic_write_bytes
from .model import ModelConfig, Nadir
from .tokenizer import Vocab

MAGIC = b"NADR"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    src_vocab: Vocab
    tgt_vocab: Vocab
    state: Dict[str, torch.Tensor]
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Nadir, src_vocab: Vocab, tgt_vocab: Vocab, extra: Optional[dict] = None) -> "Checkpoint":
        state = {k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()}
        return cls(model.cfg, src_vocab, tgt_vocab, state, dict(extra or {}))

    def build_model(self) -> Nadir:
        with torch.device("meta"):
            model = Nadir(self.config)
        model = model.to_empty(device="cpu")
        model.load_state_dict(self.state, strict=True)
        model.eval()
        return model


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, t in ckpt.state.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = np.ascontiguousarray(arr).tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "src_vocab": ckpt.src_vocab.to_json(),
        "tgt_vocab": ckpt.tgt_vocab.to_json(),
        "extra": ckpt.extra,
        "tensors": manifest,
    }
    hb = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + b"".join(blobs)


def save(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a NADIR checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    blob = memoryview(buf)[12 + hlen:]
    with torch.device("meta"):
        expected = {k: tuple(v.shape) for k, v in Nadir(config).state_dict().items()}
    state = {}
    for entry in header["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected:
            raise CheckpointError(f"tensor {name!r} is not part of the configured model")
        if expected[name] != shape:
            raise CheckpointError(f"tensor {name!r} has shape {shape}, config implies {expected[name]}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if off + 4 * n > len(blob):
            raise CheckpointError(f"tensor {name!r} runs past end of file")
        arr = np.frombuffer(blob[off:off + 4 * n], dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    return Checkpoint(config, Vocab.from_json(header["src_vocab"]), Vocab.from_json(header["tgt_vocab"]),
                      state, header.get("extra", {}))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def manifest(path) -> list:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("not a NADIR checkpoint (bad magic)")
    _, hlen = struct.unpack("<II", buf[4:12])
    return json.loads(buf[12:12 + hlen].decode("utf-8"))["tensors"]
