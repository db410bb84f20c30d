"""Portable checkpoints: a JSON manifest plus a raw little-endian float32 payload.

A checkpoint is a directory::

    manifest.json   format version, per-model topology and parameter table, run metadata
    params.bin      b"XMPAYLD1", uint32 tensor count, per tensor (uint32 ndim, uint32 dims...),
                    then every tensor's float32 data in manifest order

The payload carries its own shape table so a payload that does not belong to the
manifest is reported as a shape mismatch, and a short payload as corruption.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .adaptation import DomainAdapter, DomainCritic
from .segmenter import Segmenter, SegmenterConfig, build_segmenter

FORMAT_VERSION = 1
PAYLOAD_MAGIC = b"XMPAYLD1"


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def topology(module: nn.Module) -> dict:
    if isinstance(module, Segmenter):
        return {"kind": "segmenter", "config": module.cfg.to_dict()}
    if isinstance(module, DomainAdapter):
        return {"kind": "dam", "depth": module.depth, "config": module.source_cfg.to_dict()}
    if isinstance(module, DomainCritic):
        return {
            "kind": "dcm",
            "shapes": {str(k): list(v) for k, v in module.shapes.items()},
            "base_width": module.base_width,
            "width_cap": module.width_cap,
            "extra_stages": module.extra_stages,
        }
    raise TypeError(f"cannot describe topology of {type(module).__name__}")


def build_from_topology(topo: dict) -> nn.Module:
    kind = topo.get("kind")
    if kind == "segmenter":
        return build_segmenter(SegmenterConfig.from_dict(topo["config"]))
    if kind == "dam":
        return DomainAdapter(build_segmenter(SegmenterConfig.from_dict(topo["config"])), int(topo["depth"]))
    if kind == "dcm":
        shapes = {int(k): tuple(v) for k, v in topo["shapes"].items()}
        return DomainCritic(shapes, topo["base_width"], topo["width_cap"], topo["extra_stages"])
    raise CheckpointError(f"unknown model kind {kind!r} in manifest")


def save_checkpoint(path: Path | str, models: Mapping[str, nn.Module], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    header = bytearray(PAYLOAD_MAGIC)
    chunks = []
    offset = 0
    n_tensors = 0
    for model_name, module in models.items():
        params = []
        for pname, t in module.state_dict().items():
            arr = t.detach().cpu().numpy().astype("<f4")
            params.append({"name": pname, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
            header += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            chunks.append(arr.tobytes())
            n_tensors += 1
        entries[model_name] = {"topology": topology(module), "params": params}
    header[len(PAYLOAD_MAGIC) : len(PAYLOAD_MAGIC)] = struct.pack("<I", n_tensors)
    payload = bytes(header) + b"".join(chunks)
    manifest = {
        "format": FORMAT_VERSION,
        "dtype": "float32-le",
        "payload_bytes": offset,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "models": entries,
        "meta": dict(meta or {}),
    }
    (path / "params.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_payload_table(buf: bytes) -> tuple[list[tuple[int, ...]], int]:
    if not buf.startswith(PAYLOAD_MAGIC):
        raise CorruptCheckpointError("params.bin: bad magic")
    pos = len(PAYLOAD_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shapes.append(struct.unpack_from(f"<{ndim}I", buf, pos))
            pos += 4 * ndim
    except struct.error as exc:
        raise CorruptCheckpointError(f"params.bin: truncated shape table ({exc})") from None
    return shapes, pos


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def meta(self) -> dict:
        return self.manifest["meta"]

    def build(self, name: str) -> nn.Module:
        """Reconstruct model ``name`` from its manifest topology and load its weights."""
        module = build_from_topology(self.manifest["models"][name]["topology"])
        self.load_into(name, module)
        return module

    def models(self) -> dict[str, nn.Module]:
        return {name: self.build(name) for name in self.manifest["models"]}

    def load_into(self, name: str, module: nn.Module) -> nn.Module:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no model {name!r}; has {sorted(self.tensors)}")
        stored = self.tensors[name]
        target = module.state_dict()
        if set(stored) != set(target):
            missing, extra = sorted(set(target) - set(stored)), sorted(set(stored) - set(target))
            raise ShapeMismatchError(f"{name}: parameter sets differ (missing {missing}, unexpected {extra})")
        for pname, t in target.items():
            if tuple(t.shape) != stored[pname].shape:
                raise ShapeMismatchError(
                    f"{name}.{pname}: checkpoint shape {stored[pname].shape} != model shape {tuple(t.shape)}"
                )
        with torch.no_grad():
            for pname, t in target.items():
                t.copy_(torch.from_numpy(stored[pname]).to(t.dtype))
        return module


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}/manifest.json: {exc}") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")

    entries = [(m, p) for m, e in manifest["models"].items() for p in e["params"]]
    offset = 0
    for m, p in entries:
        if p["offset"] != offset:
            raise CorruptCheckpointError(f"manifest: {m}.{p['name']} offset {p['offset']} != expected {offset}")
        offset += 4 * math.prod(p["shape"])
    if offset != manifest["payload_bytes"]:
        raise CorruptCheckpointError(f"manifest: parameter table covers {offset} bytes, declares {manifest['payload_bytes']}")

    buf = (path / "params.bin").read_bytes()
    shapes, data_start = _read_payload_table(buf)
    if len(shapes) != len(entries):
        raise ShapeMismatchError(f"payload holds {len(shapes)} tensors, manifest lists {len(entries)}")
    for (m, p), shape in zip(entries, shapes):
        if tuple(p["shape"]) != tuple(shape):
            raise ShapeMismatchError(f"{m}.{p['name']}: manifest shape {tuple(p['shape'])} != payload shape {tuple(shape)}")
    data = buf[data_start:]
    if len(data) != offset:
        raise CorruptCheckpointError(f"params.bin: payload has {len(data)} data bytes, expected {offset} (truncated?)")
    if hashlib.sha256(buf).hexdigest() != manifest.get("payload_sha256"):
        raise CorruptCheckpointError("params.bin: checksum mismatch")

    ckpt = Checkpoint(manifest)
    for m, p in entries:
        n = math.prod(p["shape"])
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=p["offset"]).reshape(p["shape"])
        ckpt.tensors.setdefault(m, {})[p["name"]] = arr.astype(np.float32)
    for m in manifest["models"]:
        ckpt.tensors.setdefault(m, {})
    return ckpt


def file_digest(path: Path | str) -> str:
    """Content hash of a checkpoint directory (manifest + payload)."""
    path = Path(path)
    h = hashlib.sha256()
    for name in ("manifest.json", "params.bin"):
        h.update((path / name).read_bytes())
    return h.hexdigest()
