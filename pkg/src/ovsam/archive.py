"""Named-tensor parameter archive.

Single-file format shared by every component:

    [8-byte little-endian u64: header length]
    [UTF-8 JSON header]
    [raw little-endian float32 payload]

The header carries {"tensors": {name: {"dtype": "f32", "shape": [...],
"byte_offset": int}}, "checksum": "sha256:<hex of payload>", "meta": {...}}.
Loads verify the checksum and reject unknown layout versions. Tensor names
are namespaced by component ("clip.*", "teacher.*", "decoder.*",
"sam2clip.*", "clip2sam.*").
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch


class ArchiveError(RuntimeError):
    pass


def state_to_arrays(state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in state.items()}


def save_archive(path: Path | str, tensors: dict, meta: dict | None = None) -> None:
    """tensors: name -> torch.Tensor or numpy array; written in sorted order."""
    arrays = {
        k: (v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v))
        for k, v in tensors.items()
    }
    payload = bytearray()
    index = {}
    for name in sorted(arrays):
        shape = list(arrays[name].shape)  # before ascontiguousarray (0-d quirk)
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        index[name] = {
            "dtype": "f32",
            "shape": shape,
            "byte_offset": len(payload),
        }
        payload.extend(a.tobytes())
    digest = hashlib.sha256(bytes(payload)).hexdigest()
    header = {
        "version": 1,
        "tensors": index,
        "checksum": f"sha256:{digest}",
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def load_archive(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (tensors, meta). Raises ArchiveError on corruption."""
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"no archive at {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ArchiveError(f"archive {path} truncated")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise ArchiveError(f"archive {path} header extends past end of file")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"archive {path} header unreadable: {e}") from e
    if header.get("version") != 1:
        raise ArchiveError(f"unsupported archive version {header.get('version')}")
    payload = raw[8 + hlen :]
    digest = hashlib.sha256(payload).hexdigest()
    if header["checksum"] != f"sha256:{digest}":
        raise ArchiveError(f"checksum mismatch in {path}")
    tensors = {}
    for name, rec in header["tensors"].items():
        if rec["dtype"] != "f32":
            raise ArchiveError(f"tensor {name}: unsupported dtype {rec['dtype']}")
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start = rec["byte_offset"]
        end = start + 4 * count
        if end > len(payload):
            raise ArchiveError(f"tensor {name} extends past payload end")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.reshape(rec["shape"]).copy()
    return tensors, header.get("meta", {})


def payload_hash(tensors: dict) -> str:
    """Stable hash of a named tensor set (name order independent)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        v = tensors[name]
        a = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return payload_hash(dict(module.state_dict()))


def load_into_module(
    module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str = ""
) -> None:
    """Copy archive tensors into a module's state dict, strictly."""
    state = module.state_dict()
    sub = {
        k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)
    }
    unknown = set(sub) - set(state)
    if unknown:
        raise ArchiveError(f"unknown tensor names: {sorted(unknown)[:5]}")
    missing = set(state) - set(sub)
    if missing:
        raise ArchiveError(f"missing tensors: {sorted(missing)[:5]}")
    new_state = {k: torch.from_numpy(np.array(v)) for k, v in sub.items()}
    module.load_state_dict(new_state)


def count_parameters(tensors: dict[str, np.ndarray], prefix: str = "") -> int:
    return int(
        sum(
            int(np.prod(v.shape)) if v.shape else 1
            for k, v in tensors.items()
            if k.startswith(prefix)
        )
    )
