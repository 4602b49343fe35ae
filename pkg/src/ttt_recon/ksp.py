"""KSP1 binary container: named typed sections behind a JSON header.

Layout:
    bytes 0..3   magic "KSP1"
    bytes 4..7   u32 little-endian header length L
    bytes 8..8+L JSON header {"version": 1, "sections": [
                     {"name", "dtype", "shape", "offset", "length"}, ...]}
    remainder    raw section payloads

dtype is one of "c64le" (complex64, interleaved re/im float32 little-endian),
"f32le", "u8". Section offsets are relative to the start of the payload
region (byte 8 + L); they must be non-overlapping, in-range, and each length
must equal itemsize * product(shape). Datasets store k-space/sens/reference
sections; checkpoints store "param:<name>" sections plus a JSON "config".
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"KSP1"
VERSION = 1

_DTYPES = {
    "c64le": np.dtype("<c8"),
    "f32le": np.dtype("<f4"),
    "u8": np.dtype("u1"),
}


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype == np.complex64:
        return "c64le"
    if arr.dtype == np.float32:
        return "f32le"
    if arr.dtype == np.uint8:
        return "u8"
    raise FormatError(f"unsupported section dtype {arr.dtype} (use complex64/float32/uint8)")


def write_ksp(path: str | Path, sections: dict[str, np.ndarray | bytes]) -> None:
    """Write sections (insertion order preserved) as a KSP1 container."""
    if len(sections) == 0:
        raise FormatError("a container needs at least one section")
    arrays: list[tuple[str, np.ndarray]] = []
    for name, value in sections.items():
        arr = np.frombuffer(value, dtype=np.uint8) if isinstance(value, (bytes, bytearray)) else np.asarray(value)
        arrays.append((name, arr))
    entries = []
    offset = 0
    for name, arr in arrays:
        length = arr.nbytes
        entries.append(
            {
                "name": name,
                "dtype": _dtype_name(arr),
                "shape": list(arr.shape),
                "offset": offset,
                "length": length,
            }
        )
        offset += length
    header = json.dumps({"version": VERSION, "sections": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in arrays:
            fh.write(arr.astype(_DTYPES[_dtype_name(arr)], copy=False).tobytes())


def read_ksp(path: str | Path) -> dict[str, np.ndarray]:
    """Read a KSP1 container, validating every format invariant."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated container (no header)")
    if blob[:4] != MAGIC:
        if blob[:3] == b"KSP":
            raise FormatError(f"{path}: unsupported container version {blob[:4]!r}")
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if 8 + header_len > len(blob):
        raise FormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported container version {header.get('version')!r}")
    payload = blob[8 + header_len :]
    out: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int, str]] = []
    for entry in header.get("sections", []):
        name = entry["name"]
        if name in out:
            raise FormatError(f"{path}: duplicate section {name!r}")
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"{path}: unknown dtype {entry['dtype']!r} in section {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["length"])
        expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if length != expected:
            raise FormatError(
                f"{path}: section {name!r} declares length {length}, dtype x shape implies {expected}"
            )
        if offset < 0 or offset + length > len(payload):
            raise FormatError(f"{path}: section {name!r} payload [{offset}, {offset + length}) out of range")
        spans.append((offset, offset + length, name))
        out[name] = np.frombuffer(payload, dtype=dtype, count=length // dtype.itemsize, offset=offset).reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"{path}: sections {n0!r} and {n1!r} overlap")
    return out


# --- checkpoints -------------------------------------------------------------

PARAM_PREFIX = "param:"
CONFIG_SECTION = "config"


def save_checkpoint(path: str | Path, config: dict, params: dict[str, np.ndarray]) -> None:
    sections: dict[str, np.ndarray | bytes] = {
        CONFIG_SECTION: json.dumps(config, sort_keys=True).encode()
    }
    for name, arr in params.items():
        sections[PARAM_PREFIX + name] = np.asarray(arr, dtype=np.float32)
    write_ksp(path, sections)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    sections = read_ksp(path)
    if CONFIG_SECTION not in sections:
        raise FormatError(f"{path}: checkpoint is missing its config section")
    config = json.loads(bytes(sections.pop(CONFIG_SECTION)).decode())
    params = {}
    for name, arr in sections.items():
        if name.startswith(PARAM_PREFIX):
            params[name[len(PARAM_PREFIX) :]] = arr
    return config, params
