"""
Binary framing and provenance helpers shared by the dataset, checkpoint and
Fisher file formats. All integers are little-endian.
"""
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Tuple

import numpy as np

from errors import ArchMismatchError, ArtifactError


SIDECAR_SUFFIX = ".json"


# ========================
# PRIMITIVE WRITERS / READERS
# ========================

def write_u16(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<H", value))


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def write_u64(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<Q", value))


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    raw = f.read(size)
    if len(raw) != size:
        raise ArtifactError(f"truncated file while reading {what}")
    return raw


def read_u16(f: BinaryIO, what: str = "u16") -> int:
    return struct.unpack("<H", _read_exact(f, 2, what))[0]


def read_u32(f: BinaryIO, what: str = "u32") -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def read_u64(f: BinaryIO, what: str = "u64") -> int:
    return struct.unpack("<Q", _read_exact(f, 8, what))[0]


def write_header(f: BinaryIO, magic: bytes, version: int) -> None:
    f.write(magic)
    write_u32(f, version)


def read_header(f: BinaryIO, magic: bytes, supported_version: int) -> int:
    found = f.read(len(magic))
    if found != magic:
        raise ArtifactError(f"bad magic {found!r}, expected {magic!r}")
    version = read_u32(f, "version")
    if version != supported_version:
        raise ArtifactError(f"unsupported {magic.decode()} version {version}")
    return version


def write_name(f: BinaryIO, name: str) -> None:
    encoded = name.encode("utf-8")
    write_u16(f, len(encoded))
    f.write(encoded)


def read_name(f: BinaryIO) -> str:
    size = read_u16(f, "name length")
    return _read_exact(f, size, "name").decode("utf-8")


def write_f32_segments(f: BinaryIO, segments: List[Tuple[str, np.ndarray]]) -> None:
    """Segment table: u32 count, then (u16 name len, name, u64 count, f32 LE values)."""
    write_u32(f, len(segments))
    for name, values in segments:
        flat = np.asarray(values, dtype="<f4").ravel()
        write_name(f, name)
        write_u64(f, flat.size)
        f.write(flat.tobytes())


def read_f32_segments(f: BinaryIO) -> List[Tuple[str, np.ndarray]]:
    count = read_u32(f, "segment count")
    segments = []
    for _ in range(count):
        name = read_name(f)
        size = read_u64(f, f"{name} element count")
        raw = _read_exact(f, 4 * size, f"{name} values")
        segments.append((name, np.frombuffer(raw, dtype="<f4").astype(np.float64)))
    return segments


# ========================
# HASHING
# ========================

def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def digest(payload: Any) -> str:
    """SHA-256 hex digest of the canonical JSON form of payload."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def digest_u64(payload: Any) -> int:
    """First 8 bytes of the SHA-256 digest, read as a little-endian u64."""
    raw = hashlib.sha256(canonical_json(payload).encode("utf-8")).digest()
    return struct.unpack("<Q", raw[:8])[0]


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(master_seed: int, *labels: Any) -> int:
    """Fixed, run-independent child seed for a named stage."""
    raw = hashlib.sha256(canonical_json([int(master_seed), [str(x) for x in labels]]).encode("utf-8")).digest()
    return struct.unpack("<I", raw[:4])[0]


# ========================
# PROVENANCE SIDECARS
# ========================

def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def write_sidecar(path: Path, payload: Dict[str, Any]) -> Path:
    target = sidecar_path(path)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return target


def read_sidecar(path: Path) -> Optional[Dict[str, Any]]:
    target = sidecar_path(path)
    if not target.exists():
        return None
    with open(target, "r", encoding="utf-8") as f:
        return json.load(f)


def check_compatible(paths: List[Path], key: str = "config_digest") -> Optional[str]:
    """
    Reject mixing of artifacts whose sidecars disagree on `key`.

    Artifacts without a sidecar (hand-made inputs) are not checked.

    Returns:
        The shared value, or None when no sidecar carried it
    """
    seen: Dict[str, str] = {}
    for path in paths:
        meta = read_sidecar(path)
        if meta and key in meta:
            seen[str(path)] = meta[key]
    values = set(seen.values())
    if len(values) > 1:
        detail = ", ".join(f"{p}={v[:12]}" for p, v in sorted(seen.items()))
        raise ArchMismatchError(f"artifacts disagree on {key}: {detail}")
    return values.pop() if values else None
