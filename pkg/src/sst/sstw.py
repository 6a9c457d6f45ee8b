"""Binary weight container ("SSTW") for layer stacks.

Layout, all integers little-endian u32 unless noted:

    magic   4 bytes  b"SSTW"
    version u32      currently 1
    count   u32      number of layers
    per layer:
        kind     u32   1=convolution 2=maxpool 3=dense 4=flatten 5=sigmoid
        nparams  u32   length of the parameter block
        params   u32[] convolution: K, fh, fw, padding(0=valid,1=same), relu(0/1)
                       maxpool: ph, pw
                       dense: units
                       flatten, sigmoid: (empty)
        ntensors u32   0 for parameter-free kinds, 2 (weights, biases) otherwise
        per tensor:
            rank    u32
            extents u32[rank]
            values  float64[product(extents)], little-endian IEEE-754

Round-trips are bit-exact: values are written as the raw float64 bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from . import nn
from .errors import ModelLoadError

MAGIC = b"SSTW"
VERSION = 1

KIND_CONV = 1
KIND_MAXPOOL = 2
KIND_DENSE = 3
KIND_FLATTEN = 4
KIND_SIGMOID = 5

_U32 = struct.Struct("<I")


def _u32(value):
    return _U32.pack(value)


def layers_to_bytes(layers):
    out = [MAGIC, _u32(VERSION), _u32(len(layers))]
    for layer in layers:
        if isinstance(layer, nn.Conv2D):
            k, fh, fw, _ = layer.w.shape
            params = [k, fh, fw,
                      1 if layer.padding == nn.SAME else 0,
                      1 if layer.activation == "relu" else 0]
            out.append(_u32(KIND_CONV))
            tensors = [layer.w, layer.b]
        elif isinstance(layer, nn.MaxPool2D):
            params = [layer.ph, layer.pw]
            out.append(_u32(KIND_MAXPOOL))
            tensors = []
        elif isinstance(layer, nn.Dense):
            params = [layer.w.shape[1]]
            out.append(_u32(KIND_DENSE))
            tensors = [layer.w, layer.b]
        elif isinstance(layer, nn.Flatten):
            params = []
            out.append(_u32(KIND_FLATTEN))
            tensors = []
        elif isinstance(layer, nn.Sigmoid):
            params = []
            out.append(_u32(KIND_SIGMOID))
            tensors = []
        else:
            raise ModelLoadError(f"cannot serialize layer of type {type(layer).__name__}")
        out.append(_u32(len(params)))
        out.extend(_u32(p) for p in params)
        out.append(_u32(len(tensors)))
        for t in tensors:
            out.append(_u32(t.ndim))
            out.extend(_u32(e) for e in t.shape)
            out.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, count):
        end = self.pos + count
        if end > len(self.blob):
            raise ModelLoadError(
                f"truncated container: needed {count} bytes at offset {self.pos}"
            )
        chunk = self.blob[self.pos : end]
        self.pos = end
        return chunk

    def u32(self):
        return _U32.unpack(self.take(4))[0]


def layers_from_bytes(blob):
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ModelLoadError("not an SSTW container (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ModelLoadError(f"unsupported container version {version}")
    count = r.u32()
    layers = []
    for i in range(count):
        kind = r.u32()
        params = [r.u32() for _ in range(r.u32())]
        tensors = []
        for _ in range(r.u32()):
            rank = r.u32()
            extents = [r.u32() for _ in range(rank)]
            n = int(np.prod(extents, dtype=np.int64)) if extents else 1
            raw = r.take(8 * n)
            tensors.append(np.frombuffer(raw, dtype="<f8").reshape(extents).copy())
        layers.append(_build_layer(i, kind, params, tensors))
    if r.pos != len(blob):
        raise ModelLoadError(f"{len(blob) - r.pos} trailing bytes after last layer")
    return layers


def _build_layer(index, kind, params, tensors):
    def check(ok, why):
        if not ok:
            raise ModelLoadError(f"layer {index}: {why}")

    if kind == KIND_CONV:
        check(len(params) == 5, f"convolution expects 5 parameters, got {len(params)}")
        check(len(tensors) == 2, "convolution expects weight and bias tensors")
        k, fh, fw, pad, act = params
        check(pad in (0, 1), f"bad padding code {pad}")
        check(act in (0, 1), f"bad activation code {act}")
        w, b = tensors
        check(w.ndim == 4 and w.shape[:3] == (k, fh, fw),
              f"filter tensor {w.shape} does not match parameters {(k, fh, fw)}")
        check(b.shape == (k,), f"bias tensor {b.shape} does not match filter count {k}")
        return nn.Conv2D(w, b, padding=nn.SAME if pad else nn.VALID,
                         activation="relu" if act else None)
    if kind == KIND_MAXPOOL:
        check(len(params) == 2, "maxpool expects 2 parameters")
        check(not tensors, "maxpool carries no tensors")
        return nn.MaxPool2D(*params)
    if kind == KIND_DENSE:
        check(len(params) == 1, "dense expects 1 parameter")
        check(len(tensors) == 2, "dense expects weight and bias tensors")
        w, b = tensors
        check(w.ndim == 2 and w.shape[1] == params[0],
              f"weight tensor {w.shape} does not match unit count {params[0]}")
        check(b.shape == (params[0],), f"bias tensor {b.shape} has wrong extent")
        return nn.Dense(w, b)
    if kind == KIND_FLATTEN:
        check(not params and not tensors, "flatten carries no parameters")
        return nn.Flatten()
    if kind == KIND_SIGMOID:
        check(not params and not tensors, "sigmoid carries no parameters")
        return nn.Sigmoid()
    raise ModelLoadError(f"layer {index}: unknown kind tag {kind}")


def write_weights(path, layers):
    blob = layers_to_bytes(layers)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_weights(path):
    # Missing/unreadable files surface as OSError (an environment problem,
    # distinct from a malformed container).
    with open(path, "rb") as fh:
        blob = fh.read()
    return layers_from_bytes(blob)
