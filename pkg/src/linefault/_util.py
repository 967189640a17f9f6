"""Seeded substreams, digests and the binary record container shared by file formats."""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Sequence

import numpy as np


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, name, *keys)``; no ambient RNG anywhere."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, keys)]))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def digest_bytes(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.hexdigest()


def digest_obj(obj: Any) -> str:
    return digest_bytes(canonical_json(obj).encode())


def digest_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_records(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Binary container: ``magic | u32 header_len | JSON header | raw little-endian arrays``.

    The header lists every array's name, dtype and shape in write order so the
    file is self-describing. Output depends only on the inputs (no timestamps).
    """
    specs = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        specs.append({"name": name, "dtype": np.lib.format.dtype_to_descr(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    head = canonical_json({**header, "arrays": specs}).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def read_records(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(magic):
        raise ValueError(f"{path}: not a {magic.decode(errors='replace')} file")
    off = len(magic)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen])
    off += hlen
    arrays = {}
    for spec in header.pop("arrays"):
        descr = spec["dtype"]
        if isinstance(descr, list):
            descr = [tuple(d) if len(d) == 2 else (d[0], d[1], tuple(d[2])) for d in descr]
        dt = np.lib.format.descr_to_dtype(descr)
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(spec["shape"]).copy()
        off += count * dt.itemsize
        arrays[spec["name"]] = arr
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return header, arrays


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Ordered map; results never depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
