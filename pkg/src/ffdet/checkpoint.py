"""Checkpoint files.

Layout: the manifest byte length as a decimal ASCII line, the JSON manifest
(format version, precision, configs, step, rng state, tensor table with
name/shape/dtype/offset/nbytes), then a raw little-endian IEEE-754 blob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}
_NATIVE = {"float32": np.float32, "float64": np.float64}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int = 0
    rng: dict = field(default_factory=dict)
    precision: str = "float32"

    def to_bytes(self) -> bytes:
        table, chunks, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            dt = _DTYPES[self.precision]
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            table.append({"name": name, "shape": list(arr.shape), "dtype": self.precision,
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        manifest = {
            "format_version": FORMAT_VERSION,
            "precision": self.precision,
            "config": self.config,
            "step": int(self.step),
            "rng": self.rng,
            "tensors": table,
        }
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return str(len(head)).encode("ascii") + b"\n" + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        nl = data.find(b"\n")
        if nl <= 0 or not data[:nl].isdigit():
            raise CheckpointError("not a checkpoint: missing manifest length line")
        n = int(data[:nl])
        try:
            manifest = json.loads(data[nl + 1 : nl + 1 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
        blob = memoryview(data)[nl + 1 + n :]
        tensors = {}
        for t in manifest["tensors"]:
            end = t["offset"] + t["nbytes"]
            if end > len(blob):
                raise CheckpointError(f"tensor {t['name']} extends past end of file")
            arr = np.frombuffer(blob[t["offset"] : end], dtype=_DTYPES[t["dtype"]])
            tensors[t["name"]] = arr.reshape(t["shape"]).astype(_NATIVE[t["dtype"]])
        return cls(tensors, manifest["config"], manifest["step"], manifest["rng"], manifest["precision"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
        return cls.from_bytes(p.read_bytes())
