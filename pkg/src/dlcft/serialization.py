"""Flat little-endian binary containers for networks, models and curvature.

Every file starts with the 4-byte magic ``DLCF``, a version byte and an
object tag byte (``N`` network, ``L`` linearised model, ``C`` curvature
store). Arrays are written as ``u8 ndim``, ``u32`` extents and a raw
``float64`` payload in row-major order.

Network body::

    u32 ndim, u32 dims...          input shape
    u32 layer_count
    per layer: u8 kind, i32 units, i32 kernel, i32 stride, f64 slope,
               u8 n_arrays, arrays (weight then bias)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .curvature import CurvatureStore, KroneckerBlock
from .errors import ValidationError
from .linearization import LinearizedModel
from .nn import LAYER_KINDS, LayerSpec, Network, Segment, build_layer

MAGIC = b"DLCF"
VERSION = 1
_STORE_KINDS = ("diagonal", "kfac", "tkfac", "exact")
_LOSSES = ("mse", "sce")


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def array(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.pack("B", a.ndim)
        for d in a.shape:
            self.pack("I", d)
        self.buf.write(a.tobytes())

    def text(self, s: str):
        raw = s.encode()
        self.pack("H", len(raw))
        self.buf.write(raw)

    def blob(self, raw: bytes):
        self.pack("Q", len(raw))
        self.buf.write(raw)

    def header(self, tag: bytes):
        self.buf.write(MAGIC)
        self.pack("B", VERSION)
        self.buf.write(tag)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.buf = io.BytesIO(raw)

    def read(self, n):
        out = self.buf.read(n)
        if len(out) != n:
            raise ValidationError("truncated container")
        return out

    def unpack(self, fmt):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.read(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def array(self):
        ndim = self.unpack("B")
        shape = tuple(self.unpack("I") for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    def text(self) -> str:
        return self.read(self.unpack("H")).decode()

    def blob(self) -> bytes:
        return self.read(self.unpack("Q"))

    def header(self, tag: bytes):
        if self.read(4) != MAGIC:
            raise ValidationError("not a dlcft container")
        version = self.unpack("B")
        if version != VERSION:
            raise ValidationError(f"unsupported container version {version}")
        got = self.read(1)
        if got != tag:
            raise ValidationError(f"expected object tag {tag!r}, found {got!r}")


def _layer_key(layer) -> str:
    return f"i:{layer}" if isinstance(layer, (int, np.integer)) else f"s:{layer}"


def _parse_key(key: str):
    kind, _, val = key.partition(":")
    return int(val) if kind == "i" else val


# -- networks ---------------------------------------------------------------


def network_to_bytes(net: Network) -> bytes:
    w = _Writer()
    w.header(b"N")
    w.pack("I", len(net.input_shape))
    for d in net.input_shape:
        w.pack("I", d)
    w.pack("I", len(net.layers))
    for layer, p in zip(net.layers, net.params):
        s = layer.spec
        w.pack("B", LAYER_KINDS.index(s.kind))
        w.pack("iiid", s.units, s.kernel, s.stride, s.slope)
        roles = list(layer.param_shapes())
        w.pack("B", len(roles))
        for role in roles:
            w.array(p[role])
    return w.getvalue()


def network_from_bytes(raw: bytes) -> Network:
    r = _Reader(raw)
    r.header(b"N")
    input_shape = tuple(r.unpack("I") for _ in range(r.unpack("I")))
    specs, arrays = [], []
    for _ in range(r.unpack("I")):
        kind = LAYER_KINDS[r.unpack("B")]
        units, kernel, stride, slope = r.unpack("iiid")
        specs.append(LayerSpec(kind, units, kernel, stride, slope))
        arrays.append([r.array() for _ in range(r.unpack("B"))])
    params = []
    shape = input_shape
    for spec, arrs in zip(specs, arrays):
        layer = build_layer(spec, shape)
        params.append(dict(zip(layer.param_shapes(), arrs)))
        shape = layer.out_shape
    return Network(specs, input_shape, params=params)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())


# -- linearised models ------------------------------------------------------


def model_to_bytes(model: LinearizedModel) -> bytes:
    w = _Writer()
    w.header(b"L")
    w.pack("B", int(model.linearized))
    w.blob(network_to_bytes(model.base))
    segs = model.base.layout()
    w.pack("I", len(segs))
    for s in segs:
        w.array(model.delta[s.layer][s.role])
    w.pack("I", len(model.heads))
    for task, (hw, hb) in model.heads.items():
        w.text(_layer_key(task))
        w.pack("II", hw.shape[0], hw.shape[1])
        w.buf.write(np.ascontiguousarray(hw, dtype="<f8").tobytes())
        w.buf.write(np.ascontiguousarray(hb, dtype="<f8").tobytes())
    return w.getvalue()


def model_from_bytes(raw: bytes) -> LinearizedModel:
    r = _Reader(raw)
    r.header(b"L")
    linearized = bool(r.unpack("B"))
    model = LinearizedModel(network_from_bytes(r.blob()), linearized=linearized)
    segs = model.base.layout()
    if r.unpack("I") != len(segs):
        raise ValidationError("delta segment count does not match base network")
    for s in segs:
        model.delta[s.layer][s.role] = r.array()
    for _ in range(r.unpack("I")):
        task = _parse_key(r.text())
        c, f = r.unpack("II")
        hw = np.frombuffer(r.read(8 * c * f), dtype="<f8").reshape(c, f).astype(np.float64)
        hb = np.frombuffer(r.read(8 * c), dtype="<f8").astype(np.float64)
        model.heads[task] = (hw, hb)
    return model


def save_model(model: LinearizedModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> LinearizedModel:
    return model_from_bytes(Path(path).read_bytes())


# -- curvature stores -------------------------------------------------------


def store_to_bytes(store: CurvatureStore) -> bytes:
    w = _Writer()
    w.header(b"C")
    w.pack("BBI", _STORE_KINDS.index(store.kind), _LOSSES.index(store.loss), store.task_count)
    w.pack("I", len(store.segments))
    for s in store.segments:
        w.text(_layer_key(s.layer))
        w.text(s.role)
        w.pack("B", len(s.shape))
        for d in s.shape:
            w.pack("I", d)
    w.array(store.reference)
    if store.kind == "diagonal":
        w.array(store.diag)
    elif store.kind == "exact":
        w.array(store.H)
    else:
        w.pack("I", len(store.blocks))
        for layer, blk in store.blocks.items():
            w.text(_layer_key(layer))
            if isinstance(blk, KroneckerBlock):
                w.pack("B", 0)
                w.array(blk.A)
                w.array(blk.G)
                w.pack("dQB", blk.tau, blk.sample_count, int(blk.degenerate))
            else:
                w.pack("B", 1)
                w.array(blk)
    w.pack("I", len(store.head_moment))
    for layer, m in store.head_moment.items():
        w.text(_layer_key(layer))
        w.array(m)
    return w.getvalue()


def store_from_bytes(raw: bytes) -> CurvatureStore:
    r = _Reader(raw)
    r.header(b"C")
    kind_i, loss_i, task_count = r.unpack("BBI")
    kind = _STORE_KINDS[kind_i]
    segments = []
    for _ in range(r.unpack("I")):
        layer = _parse_key(r.text())
        role = r.text()
        shape = tuple(r.unpack("I") for _ in range(r.unpack("B")))
        segments.append(Segment(layer, role, shape))
    kw = dict(kind=kind, loss=_LOSSES[loss_i], segments=tuple(segments), reference=r.array(), task_count=task_count)
    if kind == "diagonal":
        kw["diag"] = r.array()
    elif kind == "exact":
        kw["H"] = r.array()
    else:
        blocks = {}
        for _ in range(r.unpack("I")):
            layer = _parse_key(r.text())
            if r.unpack("B") == 0:
                A, G = r.array(), r.array()
                tau, count, degenerate = r.unpack("dQB")
                blocks[layer] = KroneckerBlock(layer, A, G, tau, count, bool(degenerate))
            else:
                blocks[layer] = r.array()
        kw["blocks"] = blocks
    kw["head_moment"] = {_parse_key(r.text()): r.array() for _ in range(r.unpack("I"))}
    return CurvatureStore(**kw)


def save_store(store: CurvatureStore, path) -> None:
    Path(path).write_bytes(store_to_bytes(store))


def load_store(path) -> CurvatureStore:
    return store_from_bytes(Path(path).read_bytes())
