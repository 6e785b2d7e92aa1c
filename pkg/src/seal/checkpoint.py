"""Checkpoint container: a directory of SEALEMB1 blobs plus ``manifest.json``.

The manifest records every array's name, file, shape, dtype and FNV-1a
digest of the blob file, the config echo, RNG state and free-form metadata.
Writes go to a sibling temp directory that is renamed into place.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .blob import decode_blob, encode_blob, fnv1a64
from .errors import IntegrityError

CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
_EXACT_INT_LIMIT = 2 ** 24


@dataclass
class CheckpointState:
    arrays: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    rng: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def _as_blob_array(name: str, arr: np.ndarray) -> np.ndarray:
    flat = arr.reshape(arr.shape[0] if arr.ndim > 1 else 1, -1) if arr.size else arr.reshape(0, 0)
    if arr.dtype == np.float32:
        return flat
    as32 = flat.astype(np.float32)
    if np.issubdtype(arr.dtype, np.integer) and np.abs(flat).max(initial=0) >= _EXACT_INT_LIMIT:
        raise ValueError(f"{name}: integer values too large for exact float32 storage")
    if not np.array_equal(as32.astype(arr.dtype), flat):
        raise ValueError(f"{name}: dtype {arr.dtype} does not round-trip through float32")
    return as32


def state_dict_arrays(prefix: str, state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": _to_numpy(v) for k, v in state.items()}


def arrays_with_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "/"
    return {k[len(p):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(p)}


def digest_arrays(arrays: dict[str, Any]) -> str:
    """Order-independent digest over names and raw bytes of a set of arrays."""
    parts = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(_to_numpy(arrays[name]))
        parts.append(name.encode() + b"\0" + str(a.dtype).encode() + b"\0" + a.tobytes())
    return f"{fnv1a64(b''.join(parts)):016x}"


def encode_manifest(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8")


def save_checkpoint(state: CheckpointState, path) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = []
        for i, name in enumerate(sorted(state.arrays)):
            arr = _to_numpy(state.arrays[name])
            raw = encode_blob(_as_blob_array(name, arr))
            fname = f"{i:04d}.blob"
            (tmp / fname).write_bytes(raw)
            entries.append({
                "name": name,
                "file": fname,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "digest": f"{fnv1a64(raw):016x}",
            })
        manifest = {
            "format": "seal-checkpoint",
            "version": CHECKPOINT_VERSION,
            "arrays": entries,
            "config": state.config,
            "rng": state.rng,
            "meta": state.meta,
        }
        (tmp / MANIFEST).write_bytes(encode_manifest(manifest))
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise IntegrityError(f"{path}: no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{mpath}: unreadable manifest ({exc})") from exc
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(
            f"{path}: checkpoint version {version!r} cannot be read by v{CHECKPOINT_VERSION} reader"
        )
    return manifest


def load_checkpoint(path) -> CheckpointState:
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for e in manifest["arrays"]:
        fpath = path / e["file"]
        if not fpath.is_file():
            raise IntegrityError(f"{path}: missing blob {e['file']} for {e['name']}")
        raw = fpath.read_bytes()
        if f"{fnv1a64(raw):016x}" != e["digest"]:
            raise IntegrityError(f"{path}: digest mismatch for {e['name']}")
        flat = decode_blob(raw)
        arrays[e["name"]] = flat.astype(np.dtype(e["dtype"])).reshape(e["shape"])
    return CheckpointState(arrays, manifest.get("config", {}), manifest.get("rng", {}), manifest.get("meta", {}))


# ------------------------------------------------------------ RNG state


def torch_rng_state(gen: torch.Generator) -> str:
    return gen.get_state().numpy().tobytes().hex()


def set_torch_rng_state(gen: torch.Generator, hexstate: str) -> None:
    gen.set_state(torch.from_numpy(np.frombuffer(bytes.fromhex(hexstate), dtype=np.uint8).copy()))


def numpy_rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_numpy_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
