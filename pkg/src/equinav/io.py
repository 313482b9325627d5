"""On-disk formats: array containers, 8-bit PGM images and JSON Lines dataset manifests.

Container layout::

    b"EQNVCONT"                 8-byte magic
    uint32 LE                   format version
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON: {"version", "entries": [{name, shape, offset}], "meta"}
    payload                     contiguous little-endian float32 arrays, offsets relative to payload start

All writes go to a temporary file first and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EQNVCONT"
CONTAINER_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# -- array container ----------------------------------------------------------

def pack_container(arrays: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            b = a.astype(np.float32)
            if a.size and not np.array_equal(b.astype(a.dtype), a, equal_nan=a.dtype.kind == "f"):
                raise FormatError(f"array {name!r} ({a.dtype}) is not exactly representable as float32")
            a = b
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": str(name), "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CONTAINER_VERSION, "entries": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(header)) + header + b"".join(chunks)


def unpack_container(data: bytes):
    if data[:8] != MAGIC:
        raise FormatError("not an array container (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    payload = memoryview(data)[20 + hlen:]
    arrays = {}
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        if start + 4 * n > len(payload):
            raise FormatError(f"entry {e['name']!r} runs past the end of the payload")
        arrays[e["name"]] = np.frombuffer(payload[start:start + 4 * n], dtype="<f4").astype(
            np.float32).reshape(shape)
    return arrays, header.get("meta", {})


def write_container(path, arrays: dict, meta: dict | None = None):
    atomic_write_bytes(path, pack_container(arrays, meta))


def read_container(path):
    return unpack_container(Path(path).read_bytes())


def arrays_hash(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# -- PGM ------------------------------------------------------------------------

def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM images must be 2-D uint8")
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# -- dataset directories ----------------------------------------------------------

def image_name(episode, step, viewpoint):
    return f"images/ep{int(episode):05d}_s{int(step):05d}_{viewpoint}.pgm"


def write_dataset(dataset, directory, extra: dict | None = None):
    """Write a DemoDataset as ``manifest.jsonl`` plus one PGM per (step, viewpoint).

    The first manifest line is a header with the format version, rig and world;
    every following line is one step record.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rig = dataset.rig
    lines = [json.dumps({"format_version": MANIFEST_VERSION, "rig": rig.to_dict(),
                         "world": dataset.world.to_dict(), **(extra or {})}, sort_keys=True)]
    for i in range(len(dataset)):
        ep, st = int(dataset.episodes[i]), int(dataset.steps[i])
        names = {}
        for j, v in enumerate(rig.viewpoints):
            name = image_name(ep, st, v)
            write_pgm(directory / name, dataset.images[i, j])
            names[v] = name
        lines.append(json.dumps({"episode": ep, "step": st,
                                 "state": [float(x) for x in dataset.states[i]],
                                 "action": [float(x) for x in dataset.actions[i]],
                                 "images": names}))
    atomic_write_text(directory / "manifest.jsonl", "\n".join(lines) + "\n")


def read_manifest(directory):
    """Parse and validate a manifest; returns (header, records)."""
    directory = Path(directory)
    path = directory / "manifest.jsonl"
    if not path.exists():
        raise ManifestError(f"missing manifest {path}")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    header, records = rows[0], rows[1:]
    if header.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported format version {header.get('format_version')}")
    viewpoints = [o[0] for o in header["rig"]["offsets"]]
    prev = None
    for r in records:
        key = (r["episode"], r["step"])
        if prev is not None and not key > prev:
            raise ManifestError(f"{path}: steps not strictly ordered at episode {key[0]} step {key[1]}")
        prev = key
        if list(r["images"]) != viewpoints:
            raise ManifestError(f"{path}: episode {key[0]} step {key[1]} viewpoints "
                                f"{list(r['images'])} do not match the rig {viewpoints}")
        for name in r["images"].values():
            if not (directory / name).exists():
                raise ManifestError(f"missing image file {name}")
    return header, records


def read_dataset(directory):
    from equinav.data import DemoDataset
    from equinav.worldsim import CameraRig, world_from_dict

    directory = Path(directory)
    header, records = read_manifest(directory)
    rig = CameraRig.from_dict(header["rig"])
    world = world_from_dict(header["world"])
    n, v = len(records), len(rig.offsets)
    images = np.zeros((n, v, *rig.image_shape), dtype=np.uint8)
    for i, r in enumerate(records):
        for j, name in enumerate(r["images"].values()):
            img = read_pgm(directory / name)
            if img.shape != rig.image_shape:
                raise ManifestError(f"image {name} has shape {img.shape}, rig expects {rig.image_shape}")
            images[i, j] = img
    k = len(records[0]["action"]) if records else 1
    return DemoDataset(images,
                       np.array([r["action"] for r in records], dtype=float).reshape(n, k),
                       np.array([r["state"] for r in records], dtype=float).reshape(n, 6),
                       np.array([r["episode"] for r in records], dtype=int),
                       np.array([r["step"] for r in records], dtype=int), rig, world)
