"""Checkpoints as a JSON header plus one little-endian float64 blob."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .diffengine import ParamSet

FORMAT = "clap-checkpoint/1"


@dataclass
class Checkpoint:
    params: ParamSet
    config: TrainConfig
    epoch: int = 0  # epochs completed
    step: int = 0  # optimizer steps taken
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @property
    def bank(self) -> np.ndarray:
        return self.params["proto.K"]

    def _arrays(self):
        for name, arr in self.params.items():
            yield "param", name, arr
        for name in sorted(self.adam_m):
            yield "adam_m", name, self.adam_m[name]
        for name in sorted(self.adam_v):
            yield "adam_v", name, self.adam_v[name]

    def save(self, path) -> Path:
        """Write ``path`` (.json) and its sibling .bin; returns the JSON path."""
        path = Path(path).with_suffix(".json")
        entries, blobs, offset = [], [], 0
        for kind, name, arr in self._arrays():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {"format": FORMAT, "config": self.config.to_dict(), "config_hash": self.config_hash,
                  "epoch": self.epoch, "step": self.step, "arrays": entries, "blob": path.with_suffix(".bin").name}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(".bin").write_bytes(b"".join(blobs))
        path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path).with_suffix(".json")
        header = json.loads(path.read_text())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not a checkpoint ({header.get('format')!r})")
        config = TrainConfig.from_dict(header["config"])
        if config.hash() != header["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        blob = (path.parent / header["blob"]).read_bytes()
        params, m, v = ParamSet(), {}, {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
            if e["kind"] == "param":
                params.add(e["name"], arr)
            else:
                (m if e["kind"] == "adam_m" else v)[e["name"]] = arr
        return cls(params, config, header["epoch"], header["step"], m, v)
