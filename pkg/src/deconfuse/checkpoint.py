"""Versioned binary checkpoint container.

Layout (all integers ``uint32``, all reals ``float64``, little-endian)::

    magic b"DECONFUS" | version | n_sections
    n_sections x ( tag: 4 ASCII bytes | payload length: uint64 | payload )

Sections:

``MODL``  window, C, L; then for each channel and layer
          M, in_channels, P, stride, padding, pool_kernel, pool_stride,
          activation code, followed by the M*in*P row-major weights;
          then for each channel I, O and the I*O row-major fusion weights.
          ``pool_kernel == 0`` means no pooling.
``RIDG``  n_features, n_targets, alpha, intercept[n_targets], coef[n_features*n_targets]
``FRST``  n_trees, max_depth, n_features; per tree n_nodes then
          feature (int32), threshold, left (int32), right (int32), proba arrays.

A JSON sidecar (same stem, ``.json``) mirrors every dimension.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .downstream import ForestModel, RidgeModel, Tree
from .errors import CheckpointError
from .model import ChannelPipeline, DeconfuseModel, Layer
from .tensor_ops import FilterBank

MAGIC = b"DECONFUS"
VERSION = 1
_ACT_CODES = {"identity": 0, "relu": 1, "selu": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class Checkpoint:
    model: DeconfuseModel | None = None
    ridge: RidgeModel | None = None
    forest: ForestModel | None = None


def _u32(buf: io.BytesIO, *vals: int) -> None:
    buf.write(struct.pack(f"<{len(vals)}I", *vals))


def _f64(buf: io.BytesIO, arr) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _i32(buf: io.BytesIO, arr) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<i4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else vals

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def i32(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<i4").astype(np.int64)


def _model_payload(model: DeconfuseModel) -> bytes:
    buf = io.BytesIO()
    L = len(model.pipelines[0].layers)
    _u32(buf, model.window, model.num_channels, L)
    for pipe in model.pipelines:
        for layer in pipe.layers:
            b = layer.bank
            pk, ps = layer.pool if layer.pool is not None else (0, 0)
            _u32(buf, b.out_channels, b.in_channels, b.kernel_size, b.stride, b.padding, pk, ps, _ACT_CODES[layer.activation])
            _f64(buf, b.weights)
    for F in model.fusion:
        _u32(buf, *F.shape)
        _f64(buf, F)
    return buf.getvalue()


def _read_model(r: _Reader) -> DeconfuseModel:
    window, C, L = r.u32(3)
    pipes = []
    for c in range(C):
        layers = []
        for _ in range(L):
            M, cin, P, stride, pad, pk, ps, act = r.u32(8)
            if act not in _ACT_NAMES:
                raise CheckpointError(f"unknown activation code {act}")
            w = r.f64(M * cin * P).reshape(M, cin, P)
            layers.append(Layer(FilterBank(w, stride, pad), _ACT_NAMES[act], (pk, ps) if pk else None))
        pipes.append(ChannelPipeline(layers, c))
    fusion = []
    for _ in range(C):
        I, O = r.u32(2)
        fusion.append(r.f64(I * O).reshape(I, O))
    return DeconfuseModel(pipes, fusion, window)


def _ridge_payload(m: RidgeModel) -> bytes:
    buf = io.BytesIO()
    coef = m.coef if m.coef.ndim == 2 else m.coef[:, None]
    _u32(buf, coef.shape[0], coef.shape[1])
    _f64(buf, [m.alpha_reg])
    _f64(buf, np.atleast_1d(m.intercept))
    _f64(buf, coef)
    return buf.getvalue()


def _read_ridge(r: _Reader) -> RidgeModel:
    n, t = r.u32(2)
    alpha = float(r.f64(1)[0])
    intercept = r.f64(t)
    coef = r.f64(n * t).reshape(n, t)
    if t == 1:
        return RidgeModel(coef[:, 0], np.asarray(intercept[0]), alpha)
    return RidgeModel(coef, intercept, alpha)


def _forest_payload(m: ForestModel) -> bytes:
    buf = io.BytesIO()
    _u32(buf, len(m.trees), m.max_depth, m.n_features)
    for t in m.trees:
        _u32(buf, t.feature.size)
        _i32(buf, t.feature)
        _f64(buf, t.threshold)
        _i32(buf, t.left)
        _i32(buf, t.right)
        _f64(buf, t.proba)
    return buf.getvalue()


def _read_forest(r: _Reader) -> ForestModel:
    n_trees, depth, n_features = r.u32(3)
    trees = []
    for _ in range(n_trees):
        n = r.u32()
        trees.append(Tree(r.i32(n), r.f64(n), r.i32(n), r.i32(n), r.f64(n)))
    return ForestModel(trees, n_features, depth)


def dumps(ckpt: Checkpoint) -> bytes:
    sections = []
    if ckpt.model is not None:
        sections.append((b"MODL", _model_payload(ckpt.model)))
    if ckpt.ridge is not None:
        sections.append((b"RIDG", _ridge_payload(ckpt.ridge)))
    if ckpt.forest is not None:
        sections.append((b"FRST", _forest_payload(ckpt.forest)))
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION, len(sections))
    for tag, payload in sections:
        buf.write(tag)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n = r.u32(2)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint()
    readers = {b"MODL": ("model", _read_model), b"RIDG": ("ridge", _read_ridge), b"FRST": ("forest", _read_forest)}
    for _ in range(n):
        tag = r.take(4)
        length = r.u64()
        payload = r.take(length)
        if tag not in readers:
            continue
        attr, fn = readers[tag]
        sub = _Reader(payload)
        setattr(ckpt, attr, fn(sub))
        if sub.pos != len(payload):
            raise CheckpointError(f"section {tag.decode()} has {len(payload) - sub.pos} trailing bytes")
    return ckpt


def sidecar(ckpt: Checkpoint) -> dict:
    info: dict = {"format": MAGIC.decode(), "version": VERSION, "sections": []}
    if ckpt.model is not None:
        m = ckpt.model
        info["sections"].append("MODL")
        info["model"] = {
            "window": m.window,
            "channels": m.num_channels,
            "layers": [
                {
                    "out_channels": L.bank.out_channels,
                    "in_channels": L.bank.in_channels,
                    "kernel_size": L.bank.kernel_size,
                    "stride": L.bank.stride,
                    "padding": L.bank.padding,
                    "pool": list(L.pool) if L.pool else None,
                    "activation": L.activation,
                }
                for L in m.pipelines[0].layers
            ],
            "feature_shape": list(m.feature_shape),
            "features_per_channel": m.features_per_channel,
            "fusion_shape": list(m.fusion[0].shape),
            "output_dim": m.output_dim,
        }
    if ckpt.ridge is not None:
        info["sections"].append("RIDG")
        info["ridge"] = {"n_features": ckpt.ridge.n_features, "alpha_reg": ckpt.ridge.alpha_reg}
    if ckpt.forest is not None:
        info["sections"].append("FRST")
        info["forest"] = {
            "n_trees": len(ckpt.forest.trees),
            "max_depth": ckpt.forest.max_depth,
            "n_features": ckpt.forest.n_features,
            "nodes": [int(t.feature.size) for t in ckpt.forest.trees],
        }
    return info


def save_checkpoint(path, model=None, ridge=None, forest=None) -> Path:
    path = Path(path)
    ckpt = Checkpoint(model, ridge, forest)
    path.write_bytes(dumps(ckpt))
    path.with_suffix(".json").write_text(json.dumps(sidecar(ckpt), indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
