"""Binary checkpoint format.

Layout (little-endian):
    b"IMDM" | u32 version | u8 kind | u32 n_data | u32 length | u32 n_arrays
    per array: u16 name_len | name (utf-8) | u32 ndim | u32 dims...
    f64 weights of every array in manifest order
    u32 CRC32 of the weight block
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .denoiser import IMDM, MDM, DenoiserParams

MAGIC = b"IMDM"
VERSION = 1
KIND_TAGS = {MDM: 0, IMDM: 1}


class CheckpointError(ValueError):
    pass


def dumps(params: DenoiserParams) -> bytes:
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<IBIII", VERSION, KIND_TAGS[params.kind], params.n_data, params.length, len(params.arrays)))
    blocks = []
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        head.write(struct.pack("<H", len(raw)))
        head.write(raw)
        head.write(struct.pack("<I", arr.ndim))
        head.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blocks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    weights = b"".join(blocks)
    return head.getvalue() + weights + struct.pack("<I", zlib.crc32(weights))


def loads(data: bytes) -> DenoiserParams:
    buf = memoryview(data)
    if bytes(buf[:4]) != MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, tag, n_data, length, n_arrays = struct.unpack_from("<IBIII", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        kinds = {v: k for k, v in KIND_TAGS.items()}
        if tag not in kinds:
            raise CheckpointError(f"unknown model kind tag {tag}")
        pos = 4 + struct.calcsize("<IBIII")
        manifest = []
        for _ in range(n_arrays):
            (n_name,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = bytes(buf[pos : pos + n_name]).decode("utf-8")
            pos += n_name
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            manifest.append((name, shape))
        n_bytes = 8 * sum(int(np.prod(shape)) for _, shape in manifest)
        weights = bytes(buf[pos : pos + n_bytes])
        if len(weights) != n_bytes or len(buf) != pos + n_bytes + 4:
            raise CheckpointError("truncated or oversized checkpoint")
        (crc,) = struct.unpack_from("<I", buf, pos + n_bytes)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if zlib.crc32(weights) != crc:
        raise CheckpointError("CRC mismatch in weight block")
    arrays = {}
    offset = 0
    for name, shape in manifest:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(weights, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    params = DenoiserParams(kinds[tag], n_data, length, arrays)
    _check_structure(params)
    return params


def _expected_shapes(params: DenoiserParams) -> dict[str, tuple]:
    d, w = params.d_model, params.width
    n, length = params.n_data, params.length
    shapes = {"tok_emb": (n, d), "mask_emb": (d,)}
    if params.kind == IMDM:
        dn, hidden = params.arrays["noise_w1"].shape
        shapes.update({"noise_w1": (dn, hidden), "noise_b1": (hidden,), "noise_w2": (hidden, d), "noise_b2": (d,)})
    shapes.update(
        {
            "w1": (length * d, w),
            "time_w": (w,),
            "b1": (w,),
            "w2": (w, w),
            "b2": (w,),
            "w_out": (w, length * n),
            "b_out": (length * n,),
        }
    )
    return shapes


def _check_structure(params: DenoiserParams) -> None:
    """Header fields, names and shapes must describe one consistent network."""
    try:
        expected = _expected_shapes(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"inconsistent manifest: {exc}") from exc
    actual = {k: v.shape for k, v in params.arrays.items()}
    if list(actual) != list(expected) or actual != expected:
        raise CheckpointError("manifest does not match the declared architecture")


def save(params: DenoiserParams, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> DenoiserParams:
    return loads(Path(path).read_bytes())
