"""
On-disk formats: tensor files, clip manifests and model checkpoints.

Tensor file (bit-exact):
    b"CGA1" | dtype u8 (0x01 = float32) | rank u8 | rank x u64 LE extents | float32 LE payload

Checkpoint container:
    b"SQCK" | version u32 LE | header length u64 LE | header JSON (config + meta)
    | tensor count u32 LE | per tensor: name length u16 LE, utf-8 name,
      blob length u64 LE, CGA1 blob

Every write goes to a temp file first and is renamed into place.
"""

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from common.errors import DataError
from data_collection.simulation.toy_factory import SequenceClip

TENSOR_MAGIC = b"CGA1"
DTYPE_F32 = 0x01
CHECKPOINT_MAGIC = b"SQCK"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"


# --- ATOMIC WRITES ---


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_json(path, obj):
    atomic_write_bytes(path, json.dumps(obj, indent=2, sort_keys=True).encode())


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path, "r") as f:
        return json.load(f)


# --- TENSOR FORMAT ---


def encode_tensor(t):
    arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
    if arr.ndim > 255:
        raise DataError("tensor rank above 255")
    header = TENSOR_MAGIC + bytes([DTYPE_F32, arr.ndim]) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf, offset=0):
    """Decode one CGA1 tensor starting at `offset`; returns (tensor, end offset)."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise DataError("bad tensor magic")
    if len(buf) < offset + 6:
        raise DataError("truncated tensor header")
    dtype, rank = buf[offset + 4], buf[offset + 5]
    if dtype != DTYPE_F32:
        raise DataError(f"unsupported dtype code 0x{dtype:02x}")
    pos = offset + 6
    if len(buf) < pos + 8 * rank:
        raise DataError("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 4 * count
    if len(buf) < end:
        raise DataError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32)), end


def write_tensor(path, t):
    atomic_write_bytes(path, encode_tensor(t))


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise DataError(f"{path}: trailing bytes after tensor payload")
    return t


# --- CLIPS + MANIFEST ---


def save_clips(clips, out_dir, split):
    """
    Write every clip as a tensor file and merge its entries into the
    directory manifest (entries of the same split are replaced).
    """
    out_dir = Path(out_dir)
    entries = []
    for clip in clips:
        rel = Path("clips") / f"{clip.clip_id}.cga"
        write_tensor(out_dir / rel, clip.pixels)
        entries.append(
            {
                "clip_id": clip.clip_id,
                "path": str(rel),
                "class_id": int(clip.class_id),
                "tokens": [int(t) for t in clip.tokens],
                "source": clip.source,
                "split": split,
            }
        )

    manifest_path = out_dir / MANIFEST_NAME
    manifest = read_json(manifest_path) if manifest_path.exists() else {"clips": []}
    manifest["clips"] = [e for e in manifest["clips"] if e["split"] != split] + entries
    atomic_write_json(manifest_path, manifest)
    return entries


def load_clips(out_dir, split=None):
    out_dir = Path(out_dir)
    manifest = read_json(out_dir / MANIFEST_NAME)
    clips = []
    for entry in manifest["clips"]:
        if split is not None and entry["split"] != split:
            continue
        clips.append(
            SequenceClip(
                pixels=read_tensor(out_dir / entry["path"]),
                class_id=entry["class_id"],
                tokens=entry["tokens"],
                source=entry["source"],
                clip_id=entry["clip_id"],
            )
        )
    return clips


# --- CHECKPOINTS ---


def save_checkpoint(path, state_dict, config=None, meta=None):
    header = json.dumps({"config": config or {}, "meta": meta or {}}, sort_keys=True).encode()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", len(header)),
        header,
        struct.pack("<I", len(state_dict)),
    ]
    for name, tensor in state_dict.items():
        raw_name = name.encode()
        blob = encode_tensor(tensor.float())
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<Q", len(blob)), blob]
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path):
    """Returns (state_dict, config dict, meta dict)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", buf, 8)
    pos = 16
    header = json.loads(buf[pos : pos + header_len].decode())
    pos += header_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4

    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode()
        pos += name_len
        (blob_len,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        tensor, end = decode_tensor(buf, pos)
        if end != pos + blob_len:
            raise DataError(f"{path}: tensor {name} has inconsistent length")
        state[name] = tensor
        pos = end
    return state, header["config"], header["meta"]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
