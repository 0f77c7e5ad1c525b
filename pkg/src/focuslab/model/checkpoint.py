"""Single-file binary checkpoints for :class:`ModelParams`.

Layout (all little-endian):

    magic      8 bytes  b"FOCUSLAB"
    version    u32
    config     u32 width, u32 height, u32 c1, u32 c2, u32 c3,
               u32 n_categories, u32 recurrent_width, f64 lambda_heatmap
    n_tensors  u32
    per tensor (declaration order):
        u16 name length, name (ascii), u32 ndim, u32 * ndim shape,
        float32 data (C order)

Weights are stored as float32, so a round trip is exact only up to float32
rounding.
"""
import struct

import numpy as np

from .network import ModelConfig, ModelParams, param_shapes

MAGIC = b"FOCUSLAB"
VERSION = 1
_CFG = struct.Struct("<7Id")


class CheckpointError(ValueError):
    pass


def save_params(path, params):
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(_CFG.pack(*cfg.input_size, *cfg.encoder_channels, cfg.n_categories_C,
                           cfg.recurrent_width, float(cfg.lambda_heatmap)))
        shapes = param_shapes(cfg)
        fh.write(struct.pack("<I", len(shapes)))
        for name, _ in shapes:
            arr = params[name]
            raw = name.encode("ascii")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a focuslab checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    w, h, c1, c2, c3, ncat, nh, lam = _CFG.unpack(take(_CFG.size))
    cfg = ModelConfig((w, h), (c1, c2, c3), ncat, nh, lam)
    expected = param_shapes(cfg)
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} tensors, expected {len(expected)}")
    tensors = {}
    for want_name, want_shape in expected:
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("ascii")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if name != want_name or tuple(shape) != want_shape:
            raise CheckpointError(f"{path}: tensor {name}{shape}, expected {want_name}{want_shape}")
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelParams(cfg, tensors)
