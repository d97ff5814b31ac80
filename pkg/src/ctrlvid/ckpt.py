"""Deterministic named-tensor archives with JSON manifests.

Checkpoints are a flat binary blob of little-endian C-order tensors plus a
JSON header, written atomically.  The same tensors always produce the same
bytes, which is what the reproducibility contract leans on (save, load,
save again must be bit-identical).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"NTAR0001"


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | Path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]))
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries[name] = {"dtype": str(arr.dtype), "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, sort_keys=True).encode()
    return MAGIC + len(header).to_bytes(8, "little") + header + b"".join(blobs)


def unpack_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a tensor archive (bad magic)")
    hlen = int.from_bytes(data[len(MAGIC): len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + hlen].decode())
    base = start + hlen
    out = {}
    for name, meta in header["tensors"].items():
        buf = data[base + meta["offset"]: base + meta["offset"] + meta["nbytes"]]
        out[name] = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])).reshape(
            meta["shape"]).copy()
    return out


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> str:
    """Write the archive; returns its sha256 content hash."""
    data = pack_tensors(tensors)
    _atomic_write(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load_tensors(path: str | Path, expect_hash: str | None = None) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if expect_hash is not None:
        got = hashlib.sha256(data).hexdigest()
        if got != expect_hash:
            raise ValueError(
                f"checkpoint content hash mismatch for {path}: "
                f"expected {expect_hash[:12]}..., got {got[:12]}..."
            )
    return unpack_tensors(data)


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(root: str | Path) -> dict[str, str]:
    """Relative path -> sha256 for every file under a directory."""
    root = Path(root)
    return {str(p.relative_to(root)): file_hash(p)
            for p in sorted(root.rglob("*")) if p.is_file()}
