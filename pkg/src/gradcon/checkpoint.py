"""Versioned binary model checkpoint ("GCON" container).

Byte layout (all integers little-endian):

    offset  size  field
    0       4     magic b"GCON"
    4       4     uint32 format version (currently 1)
    8       1     uint8 variant (0 = CAE, 1 = VAE)
    9       1     uint8 input channel count
    10      1     uint8 encoder layer count
    11      1     uint8 decoder layer count
    then per layer (encoder layers first, decoder layers second):
            1     uint8 kind (0 = conv, 1 = conv_transpose)
            2     uint16 in_channels
            2     uint16 out_channels
            1     uint8 kernel
            1     uint8 stride
            1     uint8 pad
            1     uint8 activation (0 = none, 1 = relu, 2 = sigmoid)
            1     uint8 has_bias
    then parameter tensors in declaration order (encoder then decoder,
    weight then bias per layer) as raw little-endian float64 values,
    then the gradient memory:
            8     uint64 iteration count
            1     uint8 include_biases flag
            4     uint32 number of decoder layers with memory entries
            per entry: uint64 vector length + raw little-endian float64 data
"""

from __future__ import annotations

import struct

import numpy as np

from . import nn
from .autodiff import Var

MAGIC = b"GCON"
VERSION = 1

_KINDS = {"conv": 0, "conv_transpose": 1}
_KINDS_INV = {v: k for k, v in _KINDS.items()}
_ACTS = {"none": 0, "relu": 1, "sigmoid": 2}
_ACTS_INV = {v: k for k, v in _ACTS.items()}
_VARIANTS = {nn.CAE: 0, nn.VAE: 1}
_VARIANTS_INV = {v: k for k, v in _VARIANTS.items()}


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


def _pack_spec(spec: nn.LayerSpec) -> bytes:
    return struct.pack("<BHHBBBBB", _KINDS[spec.kind], spec.in_channels,
                       spec.out_channels, spec.kernel, spec.stride, spec.pad,
                       _ACTS[spec.activation], int(spec.has_bias))


def _unpack_spec(buf: bytes, off: int):
    kind, cin, cout, k, s, p, act, has_bias = struct.unpack_from("<BHHBBBBB", buf, off)
    spec = nn.LayerSpec(_KINDS_INV[kind], cin, cout, kernel=k, stride=s, pad=p,
                        activation=_ACTS_INV[act], has_bias=bool(has_bias))
    return spec, off + 10


def save_checkpoint(path, model: nn.ModelParams, memory) -> None:
    """Write model parameters and gradient memory; always stores float64."""
    parts = [MAGIC, struct.pack("<IBBBB", VERSION, _VARIANTS[model.variant],
                                model.in_channels, len(model.encoder_specs),
                                len(model.decoder_specs))]
    for spec in model.encoder_specs + model.decoder_specs:
        parts.append(_pack_spec(spec))
    for w, b in model.encoder + model.decoder:
        parts.append(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
        if b is not None:
            parts.append(np.ascontiguousarray(b.data, dtype="<f8").tobytes())
    parts.append(struct.pack("<QBI", memory.count, int(memory.include_biases),
                             len(memory.averages)))
    for avg in memory.averages:
        parts.append(struct.pack("<Q", avg.size))
        parts.append(np.ascontiguousarray(avg, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, GradientMemory)."""
    from .training import GradientMemory

    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, variant_code, channels, n_enc, n_dec = struct.unpack_from("<IBBBB", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    enc_specs, dec_specs = [], []
    for _ in range(n_enc):
        spec, off = _unpack_spec(buf, off)
        enc_specs.append(spec)
    for _ in range(n_dec):
        spec, off = _unpack_spec(buf, off)
        dec_specs.append(spec)

    model = nn.ModelParams(_VARIANTS_INV[variant_code], channels, enc_specs, dec_specs)

    def read_layer(spec):
        nonlocal off
        if spec.kind == "conv":
            wshape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        else:
            wshape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        n = int(np.prod(wshape))
        w = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(wshape)
        off += 8 * n
        weight = Var(w.copy(), requires_grad=True)
        bias = None
        if spec.has_bias:
            b = np.frombuffer(buf, dtype="<f8", count=spec.out_channels, offset=off)
            off += 8 * spec.out_channels
            bias = Var(b.copy(), requires_grad=True)
        return weight, bias

    try:
        model.encoder = [read_layer(s) for s in enc_specs]
        model.decoder = [read_layer(s) for s in dec_specs]
        count, include_biases, n_mem = struct.unpack_from("<QBI", buf, off)
        off += 13
        averages = []
        for _ in range(n_mem):
            (length,) = struct.unpack_from("<Q", buf, off)
            off += 8
            avg = np.frombuffer(buf, dtype="<f8", count=length, offset=off).copy()
            off += 8 * length
            averages.append(avg)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint at byte {off}: {exc}") from exc

    memory = GradientMemory(averages=averages, count=count,
                            include_biases=bool(include_biases))
    return model, memory
