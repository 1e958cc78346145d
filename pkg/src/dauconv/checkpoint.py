"""Binary checkpoint container.

Layout: 8-byte magic "DAUCKPT1", little-endian u32 format version, then
length-prefixed named blocks, each followed by a CRC32 of its payload:

    u32 name_len | name utf-8 | u64 payload_len | payload | u32 crc32

Blocks: "meta" (canonical JSON: step, seed, RNG algorithm id, network spec),
one "arr:<name>" block per parameter/state array, and one "vel:<group>" block
per optimizer velocity buffer. Arrays serialize as u8 dtype code, u8 ndim,
u64 dims, then raw little-endian data, so a round trip is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .network import NetworkSpec, build_network

MAGIC = b"DAUCKPT1"
VERSION = 1
RNG_ALGORITHM = "philox4x64-keyed"

_DTYPE_CODES = {0: "<f8", 1: "<i8", 2: "|u1"}
_CODE_FOR = {np.dtype("float64"): 0, np.dtype("int64"): 1,
             np.dtype("uint8"): 2, np.dtype("bool"): 2}


class CheckpointError(RuntimeError):
    """Unreadable, corrupted, or invariant-violating checkpoint."""


def _encode_array(arr):
    arr = np.asarray(arr)
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    data = arr.astype(_DTYPE_CODES[code], copy=False)
    head = struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + data.tobytes()


def _decode_array(payload, name):
    if len(payload) < 2:
        raise CheckpointError(f"block {name}: truncated array header")
    code, ndim = struct.unpack_from("<BB", payload)
    if code not in _DTYPE_CODES:
        raise CheckpointError(f"block {name}: unknown dtype code {code}")
    off = 2 + 8 * ndim
    shape = struct.unpack_from(f"<{ndim}Q", payload, 2)
    arr = np.frombuffer(payload, dtype=_DTYPE_CODES[code], offset=off)
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"block {name}: payload size does not match shape {shape}")
    return arr.reshape(shape).copy()


def _write_block(fh, name, payload):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def _read_blocks(raw):
    pos = 0
    blocks = {}
    order = []
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise CheckpointError(f"truncated block header at byte {pos}")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + name_len + 8 > len(raw):
            raise CheckpointError(f"truncated block name at byte {pos}")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (payload_len,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if pos + payload_len + 4 > len(raw):
            raise CheckpointError(f"truncated payload for block {name!r} at byte {pos}")
        payload = raw[pos:pos + payload_len]
        pos += payload_len
        (crc,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch in block {name!r}")
        blocks[name] = payload
        order.append(name)
    return blocks, order


def save_checkpoint(path, network, groups=None, step=0, extra_meta=None):
    """Atomic write: serialize fully, then replace the target path."""
    meta = {"format_version": VERSION,
            "rng_algorithm": RNG_ALGORITHM,
            "seed": network.spec.seed,
            "step": int(step),
            "spec": network.spec.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_block(fh, "meta", json.dumps(meta, sort_keys=True).encode("utf-8"))
        for name, arr in network.state_arrays().items():
            _write_block(fh, f"arr:{name}", _encode_array(arr))
        for group in groups or []:
            _write_block(fh, f"vel:{group.name}", _encode_array(group.velocity))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild the network from the embedded spec and restore all state.

    Parses and validates everything, checksums included, before any object is
    constructed, so a corrupt file never yields a half-restored network.
    Returns (network, meta, velocities).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    blocks, _ = _read_blocks(raw[12:])
    if "meta" not in blocks:
        raise CheckpointError(f"{path}: missing meta block")
    meta = json.loads(blocks["meta"].decode("utf-8"))
    arrays = {name[4:]: _decode_array(payload, name)
              for name, payload in blocks.items() if name.startswith("arr:")}
    velocities = {name[4:]: _decode_array(payload, name)
                  for name, payload in blocks.items() if name.startswith("vel:")}

    spec = NetworkSpec.from_dict(meta["spec"])
    network = build_network(spec)
    state = network.state_arrays()
    if set(state) != set(arrays):
        missing = set(state) ^ set(arrays)
        raise CheckpointError(
            f"{path}: state blocks do not match the embedded network spec: {missing}")
    for name, arr in state.items():
        loaded = arrays[name]
        if loaded.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        if arr.dtype == bool:
            loaded = loaded.astype(bool)
        arr[...] = loaded
    try:
        network.validate_invariants()
    except Exception as exc:
        raise CheckpointError(f"{path}: restored state violates invariants: {exc}")
    return network, meta, velocities


def restore_velocities(groups, velocities):
    for group in groups:
        if group.name in velocities:
            vel = velocities[group.name]
            if vel.shape != group.velocity.shape:
                raise CheckpointError(f"velocity shape mismatch for {group.name}")
            group.velocity[...] = vel
