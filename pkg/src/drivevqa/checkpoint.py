"""Single-file binary checkpoint.

Layout (all integers little-endian):

    magic   b"DVQA"
    u32     format version (currently 1)
    u32     section count
    section:
        u16 + bytes   section name (utf-8)
        u8            payload kind: 0 = tensor map, 1 = JSON document
        u64           payload byte length
        payload

    tensor-map payload:
        u32 tensor count
        entry:
            u16 + bytes  tensor name (utf-8)
            u8           dtype code (0 f32, 1 f64, 2 i64)
            u8           rank
            u32 * rank   dims
            raw little-endian C-order data

Typical sections: vision_encoder / seq_model / optimizer (tensor maps) and
buffer / vocab / config (JSON).
"""

import json
import struct

import numpy as np

MAGIC = b"DVQA"
VERSION = 1
KIND_TENSORS = 0
KIND_JSON = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _pack_name(name):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long: {name[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def _pack_tensor_map(tensors):
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        parts.append(_pack_name(name))
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _unpack_tensor_map(blob, path):
    rd = _Reader(blob, path)
    (count,) = rd.unpack("<I")
    out = {}
    for _ in range(count):
        name = rd.name()
        code, ndim = rd.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = rd.unpack(f"<{ndim}I")
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(rd.take(nbytes), dtype=dt).reshape(shape).copy()
        out[name] = arr
    if rd.pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes in tensor section")
    return out


def save_checkpoint(path, tensor_sections, json_sections):
    """tensor_sections: {section: {name: array}}; json_sections: {section: obj}."""
    overlap = set(tensor_sections) & set(json_sections)
    if overlap:
        raise CheckpointError(f"duplicate section names: {sorted(overlap)}")
    chunks = [MAGIC, struct.pack("<II", VERSION,
                                 len(tensor_sections) + len(json_sections))]
    for name, tensors in tensor_sections.items():
        payload = _pack_tensor_map(tensors)
        chunks.append(_pack_name(name))
        chunks.append(struct.pack("<BQ", KIND_TENSORS, len(payload)))
        chunks.append(payload)
    for name, obj in json_sections.items():
        payload = json.dumps(obj).encode("utf-8")
        chunks.append(_pack_name(name))
        chunks.append(struct.pack("<BQ", KIND_JSON, len(payload)))
        chunks.append(payload)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Returns (tensor_sections, json_sections)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob, path)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensor_sections, json_sections = {}, {}
    for _ in range(count):
        name = rd.name()
        kind, length = rd.unpack("<BQ")
        payload = rd.take(length)
        if kind == KIND_TENSORS:
            tensor_sections[name] = _unpack_tensor_map(payload, path)
        elif kind == KIND_JSON:
            json_sections[name] = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"{path}: unknown section kind {kind}")
    if rd.pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    return tensor_sections, json_sections
