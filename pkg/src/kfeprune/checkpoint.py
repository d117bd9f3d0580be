"""Binary container for networks and curvature factor snapshots.

Layout (integers little-endian unless noted):

    magic   4 bytes  "KFEP"
    version u32      currently 1
    kind    u8       1 = network, 2 = curvature factors
    records u32

Each record is a layer-type tag byte, a meta block (u8 count of
key/value pairs, keys length-prefixed ASCII, values u32), and a tensor
block (u8 count of entries, each a length-prefixed ASCII tag, dtype
byte, ndim byte, u32 dims, raw payload).  Weight payloads are float64
little-endian; kept-index arrays are u32.  Writing the same object
twice produces identical bytes.

Tensor tags: plain layers "W"/"b"; bottleneck layers "QA"/"Wp" (full
core) or "D" (depthwise core)/"QS"/"b" plus kept-index lists; factor
records "A"/"S" and optionally "QA"/"QS"/"LA"/"LS".
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .kfac import EigenFactors, KronFactors
from .layers import (
    BottleneckConvLayer,
    BottleneckDenseLayer,
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    ReluLayer,
)
from .network import Network

MAGIC = b"KFEP"
VERSION = 1

KIND_NETWORK = 1
KIND_FACTORS = 2

TAG_DENSE = 1
TAG_CONV = 2
TAG_RELU = 3
TAG_FLATTEN = 4
TAG_BN_DENSE = 5
TAG_BN_CONV = 6
TAG_KRON = 7

DTYPE_F64 = 0
DTYPE_U32 = 1

_BASIS_CODE = {"channel": 0, "patch": 1}
_BASIS_NAME = {v: k for k, v in _BASIS_CODE.items()}
_CORE_CODE = {"full": 0, "diag": 1}
_CORE_NAME = {v: k for k, v in _CORE_CODE.items()}
_VARIANT_CODE = {"dense": 0, "conv_full": 1, "conv_channel": 2}
_VARIANT_NAME = {v: k for k, v in _VARIANT_CODE.items()}


def _key_bytes(key: str) -> bytes:
    raw = key.encode("ascii")
    if not 1 <= len(raw) <= 255:
        raise FormatError(f"bad record key {key!r}")
    return struct.pack("<B", len(raw)) + raw


def _write_meta(out: list, meta: dict):
    out.append(struct.pack("<B", len(meta)))
    for key, value in meta.items():
        out.append(_key_bytes(key))
        out.append(struct.pack("<I", int(value)))


def _write_tensors(out: list, tensors: dict):
    out.append(struct.pack("<B", len(tensors)))
    for key, arr in tensors.items():
        out.append(_key_bytes(key))
        if arr.dtype == np.uint32:
            code, payload = DTYPE_U32, arr.astype("<u4").tobytes(order="C")
        else:
            code, payload = DTYPE_F64, arr.astype("<f8").tobytes(order="C")
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(payload)


def _bottleneck_tensors(layer) -> dict:
    core_tag = "D" if layer.core_mode == "diag" else "Wp"
    return {
        "QA": layer.qa,
        core_tag: layer.core,
        "QS": layer.qs,
        "b": layer.b,
        "kept_rows": layer.kept_rows,
        "kept_cols": layer.kept_cols,
    }


def _layer_record(layer) -> tuple:
    if isinstance(layer, DenseLayer):
        return TAG_DENSE, {}, {"W": layer.w, "b": layer.b}
    if isinstance(layer, ConvLayer):
        meta = {
            "c_in": layer.c_in,
            "k": layer.k,
            "stride": layer.stride,
            "padding": layer.padding,
        }
        return TAG_CONV, meta, {"W": layer.w, "b": layer.b}
    if isinstance(layer, ReluLayer):
        return TAG_RELU, {}, {}
    if isinstance(layer, FlattenLayer):
        return TAG_FLATTEN, {}, {}
    if isinstance(layer, BottleneckDenseLayer):
        meta = {"core_mode": _CORE_CODE[layer.core_mode]}
        return TAG_BN_DENSE, meta, _bottleneck_tensors(layer)
    if isinstance(layer, BottleneckConvLayer):
        meta = {
            "c_in": layer.c_in,
            "k": layer.k,
            "stride": layer.stride,
            "padding": layer.padding,
            "basis": _BASIS_CODE[layer.basis],
            "core_mode": _CORE_CODE[layer.core_mode],
        }
        return TAG_BN_CONV, meta, _bottleneck_tensors(layer)
    raise FormatError(f"cannot serialize layer of type {type(layer).__name__}")


def network_bytes(net: Network) -> bytes:
    out = [MAGIC, struct.pack("<IBI", VERSION, KIND_NETWORK, len(net.layers))]
    for layer in net.layers:
        tag, meta, tensors = _layer_record(layer)
        out.append(struct.pack("<B", tag))
        _write_meta(out, meta)
        _write_tensors(out, tensors)
    return b"".join(out)


def save_network(path, net: Network):
    with open(path, "wb") as fh:
        fh.write(network_bytes(net))


def save_factors(path, factors: dict, eigen: dict | None = None):
    """Persist per-layer curvature factors (and eigenbases when given)."""
    out = [MAGIC, struct.pack("<IBI", VERSION, KIND_FACTORS, len(factors))]
    for layer_id in sorted(factors):
        kf = factors[layer_id]
        out.append(struct.pack("<B", TAG_KRON))
        _write_meta(
            out,
            {
                "layer_id": layer_id,
                "variant": _VARIANT_CODE[kf.variant],
                "count": kf.count,
                "a_locs": kf.a_locs,
                "s_locs": kf.s_locs,
            },
        )
        tensors = {"A": kf.a, "S": kf.s}
        if eigen is not None and layer_id in eigen:
            ef = eigen[layer_id]
            tensors.update({"QA": ef.qa, "LA": ef.lam_a, "QS": ef.qs, "LS": ef.lam_s})
        _write_tensors(out, tensors)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def key(self) -> str:
        (n,) = self.unpack("<B")
        return self.take(n).decode("ascii")

    def done(self) -> bool:
        return self.pos == len(self.raw)


def _read_meta(r: _Reader) -> dict:
    (count,) = r.unpack("<B")
    meta = {}
    for _ in range(count):
        key = r.key()
        (meta[key],) = r.unpack("<I")
    return meta


def _read_tensors(r: _Reader) -> dict:
    (count,) = r.unpack("<B")
    tensors = {}
    for _ in range(count):
        key = r.key()
        code, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I")
        n = int(np.prod(dims)) if ndim else 1
        if code == DTYPE_F64:
            arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims)
        elif code == DTYPE_U32:
            arr = np.frombuffer(r.take(4 * n), dtype="<u4").reshape(dims)
        else:
            raise FormatError(f"unknown tensor dtype code {code}")
        tensors[key] = arr.copy()
    return tensors


def _build_layer(tag: int, meta: dict, tensors: dict):
    try:
        if tag == TAG_DENSE:
            return DenseLayer(tensors["W"], tensors["b"])
        if tag == TAG_CONV:
            return ConvLayer(
                tensors["W"],
                tensors["b"],
                c_in=meta["c_in"],
                k=meta["k"],
                stride=meta["stride"],
                padding=meta["padding"],
            )
        if tag == TAG_RELU:
            return ReluLayer()
        if tag == TAG_FLATTEN:
            return FlattenLayer()
        if tag == TAG_BN_DENSE:
            mode = _CORE_NAME[meta["core_mode"]]
            core = tensors["D" if mode == "diag" else "Wp"]
            return BottleneckDenseLayer(
                tensors["QA"],
                core.reshape(-1) if mode == "diag" else core,
                tensors["QS"],
                tensors["b"],
                core_mode=mode,
                kept_rows=tensors["kept_rows"],
                kept_cols=tensors["kept_cols"],
            )
        if tag == TAG_BN_CONV:
            mode = _CORE_NAME[meta["core_mode"]]
            return BottleneckConvLayer(
                tensors["QA"],
                tensors["D" if mode == "diag" else "Wp"],
                tensors["QS"],
                tensors["b"],
                c_in=meta["c_in"],
                k=meta["k"],
                stride=meta["stride"],
                padding=meta["padding"],
                basis=_BASIS_NAME[meta["basis"]],
                core_mode=mode,
                kept_rows=tensors["kept_rows"],
                kept_cols=tensors["kept_cols"],
            )
    except KeyError as err:
        raise FormatError(f"layer record missing field {err}") from err
    raise FormatError(f"unknown layer tag {tag}")


def _parse_header(raw: bytes) -> tuple:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version, kind, count = r.unpack("<IBI")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    return r, kind, count


def network_from_bytes(raw: bytes) -> Network:
    r, kind, count = _parse_header(raw)
    if kind != KIND_NETWORK:
        raise FormatError("checkpoint does not hold a network")
    layers = []
    for _ in range(count):
        (tag,) = r.unpack("<B")
        meta = _read_meta(r)
        tensors = _read_tensors(r)
        layers.append(_build_layer(tag, meta, tensors))
    if not r.done():
        raise FormatError("trailing bytes after last layer record")
    return Network(layers)


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())


def load_factors(path) -> tuple:
    """Read a factor snapshot; returns (factors, eigen) keyed by layer id."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r, kind, count = _parse_header(raw)
    if kind != KIND_FACTORS:
        raise FormatError("checkpoint does not hold curvature factors")
    factors, eigen = {}, {}
    for _ in range(count):
        (tag,) = r.unpack("<B")
        if tag != TAG_KRON:
            raise FormatError(f"unexpected record tag {tag} in factor file")
        meta = _read_meta(r)
        tensors = _read_tensors(r)
        try:
            layer_id = meta["layer_id"]
            factors[layer_id] = KronFactors(
                a=tensors["A"],
                s=tensors["S"],
                count=meta["count"],
                a_locs=meta["a_locs"],
                s_locs=meta["s_locs"],
                variant=_VARIANT_NAME[meta["variant"]],
            )
            if "QA" in tensors:
                eigen[layer_id] = EigenFactors(
                    qa=tensors["QA"],
                    lam_a=tensors["LA"],
                    qs=tensors["QS"],
                    lam_s=tensors["LS"],
                    variant=_VARIANT_NAME[meta["variant"]],
                )
        except KeyError as err:
            raise FormatError(f"factor record missing field {err}") from err
    if not r.done():
        raise FormatError("trailing bytes after last factor record")
    return factors, eigen
