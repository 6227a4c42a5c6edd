"""Single-file checkpoint container.

Layout::

    LIPFLOW-CKPT\\n
    <format version>\\n
    <header byte length>\\n
    <JSON header>
    <raw little-endian array bytes, concatenated>

The header carries free-form metadata, the config snapshot, and for every
array its name, dtype, shape, byte offset, byte length and SHA-256.
Array names are ``namespace/param`` (``codec/...``, ``speechae/...``,
``backbone/...``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LIPFLOW-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def namespaces(self) -> set[str]:
        return {k.split("/", 1)[0] for k in self.arrays}

    def state_dict(self, namespace: str) -> dict[str, torch.Tensor]:
        prefix = namespace + "/"
        return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(prefix)}

    def put_module(self, namespace: str, module: torch.nn.Module) -> None:
        for k, v in module.state_dict().items():
            self.arrays[f"{namespace}/{k}"] = v.detach().cpu().numpy().copy()

    def load_module(self, namespace: str, module: torch.nn.Module) -> torch.nn.Module:
        state = self.state_dict(namespace)
        if not state:
            raise CheckpointError(f"checkpoint has no {namespace!r} namespace")
        module.load_state_dict(state)
        return module

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        a = np.ascontiguousarray(ckpt.arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({
            "name": name,
            "dtype": a.dtype.str,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": ckpt.version, "metadata": ckpt.metadata, "config": ckpt.config, "arrays": entries},
        indent=1, sort_keys=True,
    ).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{ckpt.version}\n{len(header)}\n".encode())
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    try:
        end = raw.index(b"\n", pos)
        version = int(raw[pos:end])
        pos = end + 1
        end = raw.index(b"\n", pos)
        hlen = int(raw[pos:end])
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed preamble") from exc
    if version > FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    pos = end + 1
    if len(raw) < pos + hlen:
        raise ChecksumError(f"{path}: header truncated")
    header = json.loads(raw[pos:pos + hlen])
    data = memoryview(raw)[pos + hlen:]
    arrays = {}
    for e in header["arrays"]:
        chunk = bytes(data[e["offset"]:e["offset"] + e["nbytes"]])
        if len(chunk) != e["nbytes"] or hashlib.sha256(chunk).hexdigest() != e["sha256"]:
            raise ChecksumError(f"{path}: array {e['name']!r} failed its checksum")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(arrays, header.get("metadata", {}), header.get("config", {}), version)
