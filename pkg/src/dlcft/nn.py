"""Small numpy networks with exact reverse-mode gradients.

Every layer works on a batch: dense layers take ``(N, features)`` and the
spatial layers take ``(N, channels, height, width)``. Besides the usual
forward/backward pair each layer knows how to push a tangent through itself
(used by :mod:`dlcft.linearization`) and how to form per-sample parameter
gradients (used by the curvature estimators).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError, ValidationError
from .numerics import RngState, check_finite

LAYER_KINDS = (
    "dense",
    "conv2d",
    "leaky_relu",
    "relu",
    "max_pool",
    "avg_pool",
    "flatten",
    "identity",
)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``units`` is the output width of a dense layer or the output channel count
    of a convolution. ``kernel`` is the convolution kernel or pooling window.
    """

    kind: str
    units: int = 0
    kernel: int = 0
    stride: int = 1
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d") and self.units < 1:
            raise ValidationError(f"{self.kind} needs units >= 1")
        if self.kind in ("conv2d", "max_pool", "avg_pool") and self.kernel < 1:
            raise ValidationError(f"{self.kind} needs kernel >= 1")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv2d(channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", units=channels, kernel=kernel, stride=stride)


def leaky_relu(slope: float = 0.01) -> LayerSpec:
    return LayerSpec("leaky_relu", slope=slope)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def max_pool(size: int) -> LayerSpec:
    return LayerSpec("max_pool", kernel=size, stride=size)


def avg_pool(size: int) -> LayerSpec:
    return LayerSpec("avg_pool", kernel=size, stride=size)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def identity() -> LayerSpec:
    return LayerSpec("identity")


# --------------------------------------------------------------------------
# layers


class Layer:
    has_params = False

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...]):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.out_shape = self._infer_out_shape()

    @property
    def kind(self) -> str:
        return self.spec.kind

    def _infer_out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, rng: RngState) -> dict[str, np.ndarray]:
        return {}

    def forward(self, p, x):
        raise NotImplementedError

    def backward(self, p, cache, dy):
        raise NotImplementedError

    def tangent(self, p, dp, cache, tx):
        """Directional derivative of the output given input tangent ``tx``
        and parameter direction ``dp``; gating comes from the value cache."""
        raise NotImplementedError

    def per_sample_grads(self, cache, dy) -> dict[str, np.ndarray]:
        return {}


class Dense(Layer):
    has_params = True

    def _infer_out_shape(self):
        if len(self.in_shape) != 1:
            raise DimensionError(f"dense layer needs flat input, got {self.in_shape}")
        return (self.spec.units,)

    def param_shapes(self):
        return {"weight": (self.spec.units, self.in_shape[0]), "bias": (self.spec.units,)}

    def init_params(self, rng):
        fan_in = self.in_shape[0]
        w = rng.standard_normal((self.spec.units, fan_in)) * np.sqrt(2.0 / fan_in)
        return {"weight": w, "bias": np.zeros(self.spec.units)}

    def forward(self, p, x):
        return x @ p["weight"].T + p["bias"], x

    def backward(self, p, x, dy):
        return dy @ p["weight"], {"weight": dy.T @ x, "bias": dy.sum(axis=0)}

    def tangent(self, p, dp, x, tx):
        out = tx @ p["weight"].T
        if dp is not None:
            out = out + x @ dp["weight"].T + dp["bias"]
        return out

    def per_sample_grads(self, x, dy):
        return {"weight": np.einsum("no,ni->noi", dy, x), "bias": dy.copy()}


class Conv2d(Layer):
    """Valid (unpadded) convolution through explicit patch extraction."""

    has_params = True

    def _infer_out_shape(self):
        if len(self.in_shape) != 3:
            raise DimensionError(f"conv2d needs (C, H, W) input, got {self.in_shape}")
        c, h, w = self.in_shape
        k, s = self.spec.kernel, self.spec.stride
        if h < k or w < k:
            raise DimensionError(f"kernel {k} larger than input {h}x{w}")
        return (self.spec.units, (h - k) // s + 1, (w - k) // s + 1)

    def param_shapes(self):
        c = self.in_shape[0]
        k = self.spec.kernel
        return {"weight": (self.spec.units, c, k, k), "bias": (self.spec.units,)}

    def init_params(self, rng):
        c = self.in_shape[0]
        k = self.spec.kernel
        fan_in = c * k * k
        w = rng.standard_normal((self.spec.units, c, k, k)) * np.sqrt(2.0 / fan_in)
        return {"weight": w, "bias": np.zeros(self.spec.units)}

    def _cols(self, x):
        k, s = self.spec.kernel, self.spec.stride
        _, oh, ow = self.out_shape
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        n = x.shape[0]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, -1)

    def _to_image(self, y):
        n = y.shape[0]
        _, oh, ow = self.out_shape
        return y.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)

    def _from_image(self, dy):
        n, oc = dy.shape[:2]
        return dy.transpose(0, 2, 3, 1).reshape(n, -1, oc)

    def forward(self, p, x):
        cols = self._cols(x)
        wm = p["weight"].reshape(self.spec.units, -1)
        return self._to_image(cols @ wm.T + p["bias"]), cols

    def backward(self, p, cols, dy):
        dyr = self._from_image(dy)
        wm = p["weight"].reshape(self.spec.units, -1)
        grads = {
            "weight": np.einsum("npo,npk->ok", dyr, cols).reshape(p["weight"].shape),
            "bias": dyr.sum(axis=(0, 1)),
        }
        n = dy.shape[0]
        c, _, _ = self.in_shape
        k, s = self.spec.kernel, self.spec.stride
        _, oh, ow = self.out_shape
        dcols = (dyr @ wm).reshape(n, oh, ow, c, k, k)
        dx = np.zeros((n,) + self.in_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        return dx, grads

    def tangent(self, p, dp, cols, tx):
        wm = p["weight"].reshape(self.spec.units, -1)
        out = self._cols(tx) @ wm.T
        if dp is not None:
            out = out + cols @ dp["weight"].reshape(self.spec.units, -1).T + dp["bias"]
        return self._to_image(out)

    def per_sample_grads(self, cols, dy):
        dyr = self._from_image(dy)
        n = dy.shape[0]
        w = np.einsum("npo,npk->nok", dyr, cols).reshape((n,) + self.param_shapes()["weight"])
        return {"weight": w, "bias": dyr.sum(axis=1)}


class LeakyReLU(Layer):
    def _slope(self):
        return 0.0 if self.kind == "relu" else self.spec.slope

    def forward(self, p, x):
        mask = x > 0
        return np.where(mask, x, self._slope() * x), mask

    def backward(self, p, mask, dy):
        return np.where(mask, dy, self._slope() * dy), {}

    def tangent(self, p, dp, mask, tx):
        return np.where(mask, tx, self._slope() * tx)


class _Pool(Layer):
    def _infer_out_shape(self):
        if len(self.in_shape) != 3:
            raise DimensionError(f"pooling needs (C, H, W) input, got {self.in_shape}")
        c, h, w = self.in_shape
        k = self.spec.kernel
        if h % k or w % k:
            raise DimensionError(f"pool window {k} does not tile {h}x{w}")
        return (c, h // k, w // k)

    def _windows(self, x):
        n = x.shape[0]
        c, oh, ow = self.out_shape
        k = self.spec.kernel
        return x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)

    def _unwindow(self, w):
        n = w.shape[0]
        c, oh, ow = self.out_shape
        k = self.spec.kernel
        return w.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape((n,) + self.in_shape)


class MaxPool(_Pool):
    def forward(self, p, x):
        win = self._windows(x)
        idx = np.argmax(win, axis=-1)[..., None]
        return np.take_along_axis(win, idx, axis=-1)[..., 0], idx

    def backward(self, p, idx, dy):
        win = np.zeros(dy.shape + (self.spec.kernel**2,))
        np.put_along_axis(win, idx, dy[..., None], axis=-1)
        return self._unwindow(win), {}

    def tangent(self, p, dp, idx, tx):
        return np.take_along_axis(self._windows(tx), idx, axis=-1)[..., 0]


class AvgPool(_Pool):
    def forward(self, p, x):
        return self._windows(x).mean(axis=-1), None

    def backward(self, p, cache, dy):
        k2 = self.spec.kernel**2
        win = np.repeat(dy[..., None] / k2, k2, axis=-1)
        return self._unwindow(win), {}

    def tangent(self, p, dp, cache, tx):
        return self._windows(tx).mean(axis=-1)


class Flatten(Layer):
    def _infer_out_shape(self):
        return (int(np.prod(self.in_shape)),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, p, cache, dy):
        return dy.reshape((dy.shape[0],) + self.in_shape), {}

    def tangent(self, p, dp, cache, tx):
        return tx.reshape(tx.shape[0], -1)


class Identity(Layer):
    def forward(self, p, x):
        return x, None

    def backward(self, p, cache, dy):
        return dy, {}

    def tangent(self, p, dp, cache, tx):
        return tx


_LAYER_TYPES = {
    "dense": Dense,
    "conv2d": Conv2d,
    "leaky_relu": LeakyReLU,
    "relu": LeakyReLU,
    "max_pool": MaxPool,
    "avg_pool": AvgPool,
    "flatten": Flatten,
    "identity": Identity,
}


def build_layer(spec: LayerSpec, in_shape) -> Layer:
    return _LAYER_TYPES[spec.kind](spec, in_shape)


# --------------------------------------------------------------------------
# flat parameter vectors


@dataclass(frozen=True)
class Segment:
    layer: int | str
    role: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParameterVector:
    """A flat float64 array together with the segment layout it packs."""

    def __init__(self, segments: Sequence[Segment], data=None):
        self.segments = tuple(segments)
        total = sum(s.size for s in self.segments)
        if data is None:
            data = np.zeros(total)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (total,):
            raise DimensionError(f"layout needs {total} entries, got array of shape {data.shape}")
        self.data = data

    @classmethod
    def pack(cls, segments: Sequence[Segment], arrays: Sequence[np.ndarray]) -> "ParameterVector":
        segments = tuple(segments)
        if len(arrays) != len(segments):
            raise DimensionError("segment/array count mismatch")
        for s, a in zip(segments, arrays):
            if tuple(np.shape(a)) != s.shape:
                raise DimensionError(f"segment {s} got array of shape {np.shape(a)}")
        if not segments:
            return cls(segments, np.zeros(0))
        return cls(segments, np.concatenate([np.ravel(a).astype(np.float64) for a in arrays]))

    def unpack(self) -> list[np.ndarray]:
        """Reshaped views into ``data`` (writes go through)."""
        out, start = [], 0
        for s in self.segments:
            out.append(self.data[start : start + s.size].reshape(s.shape))
            start += s.size
        return out

    def offsets(self) -> dict[tuple, slice]:
        res, start = {}, 0
        for s in self.segments:
            res[(s.layer, s.role)] = slice(start, start + s.size)
            start += s.size
        return res

    def get(self, layer, role) -> np.ndarray:
        for s, a in zip(self.segments, self.unpack()):
            if s.layer == layer and s.role == role:
                return a
        raise KeyError((layer, role))

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.segments, self.data.copy())

    def like(self, data) -> "ParameterVector":
        return ParameterVector(self.segments, data)

    def __len__(self):
        return self.data.size

    def __repr__(self):
        return f"ParameterVector({len(self.segments)} segments, {self.data.size} entries)"


# --------------------------------------------------------------------------
# networks


@dataclass
class Cache:
    inputs: list
    layer_caches: list
    version: int
    owner: int


@dataclass
class BackwardResult:
    grads: ParameterVector
    dx: np.ndarray
    out_grads: dict[int, np.ndarray] = field(default_factory=dict)


class Network:
    """An ordered stack of layers with its parameters.

    ``input_shape`` excludes the batch dimension.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape, params=None, rng: RngState | None = None):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(d) for d in np.atleast_1d(input_shape))
        self.layers: list[Layer] = []
        shape = self.input_shape
        for spec in self.specs:
            layer = build_layer(spec, shape)
            self.layers.append(layer)
            shape = layer.out_shape
        self.output_shape = shape
        if params is None:
            if rng is None:
                raise ValidationError("either params or rng is required")
            params = [layer.init_params(rng) for layer in self.layers]
        self.params = [dict(p) for p in params]
        for layer, p in zip(self.layers, self.params):
            shapes = layer.param_shapes()
            if set(p) != set(shapes):
                raise DimensionError(f"layer {layer.kind} expects params {sorted(shapes)}")
            for role, shp in shapes.items():
                p[role] = np.asarray(p[role], dtype=np.float64)
                if p[role].shape != shp:
                    raise DimensionError(f"{layer.kind}.{role}: expected {shp}, got {p[role].shape}")
        self._version = 0

    @property
    def version(self) -> int:
        return self._version

    def touch(self) -> None:
        """Mark parameters as modified, invalidating outstanding caches."""
        self._version += 1

    def layout(self) -> tuple[Segment, ...]:
        segs = []
        for i, layer in enumerate(self.layers):
            for role, shape in layer.param_shapes().items():
                segs.append(Segment(i, role, shape))
        return tuple(segs)

    def param_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    def num_params(self) -> int:
        return sum(s.size for s in self.layout())

    def get_vector(self) -> ParameterVector:
        segs = self.layout()
        return ParameterVector.pack(segs, [self.params[s.layer][s.role] for s in segs])

    def set_vector(self, pv: ParameterVector) -> None:
        if pv.segments != self.layout():
            raise DimensionError("parameter vector layout does not match network")
        for s, a in zip(pv.segments, pv.unpack()):
            self.params[s.layer][s.role] = a.copy()
        self.touch()

    def copy(self) -> "Network":
        return Network(self.specs, self.input_shape, [{k: v.copy() for k, v in p.items()} for p in self.params])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} != network input {self.input_shape}")
        return x

    def forward(self, x, params=None) -> tuple[np.ndarray, Cache]:
        """Run the batch ``x``; ``params`` overrides the stored parameters."""
        x = self._check_input(x)
        params = self.params if params is None else params
        inputs, caches = [], []
        for layer, p in zip(self.layers, params):
            inputs.append(x)
            x, c = layer.forward(p, x)
            caches.append(c)
        return x, Cache(inputs, caches, self._version, id(self))

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def check_cache(self, cache: Cache) -> None:
        if cache.owner != id(self) or cache.version != self._version:
            raise UsageError("stale cache: parameters changed since the forward pass")

    def backward(self, cache: Cache, dy, params=None) -> BackwardResult:
        """Reverse-mode pass. ``dy`` has the batch layout of the output.

        Parameter gradients are summed over the batch; ``out_grads`` keeps the
        per-sample gradient arriving at each parametrised layer's output.
        """
        if params is None:
            self.check_cache(cache)
            params = self.params
        dy = np.asarray(dy, dtype=np.float64)
        grads: list[dict] = [None] * len(self.layers)
        out_grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.has_params:
                out_grads[i] = dy
            dy, grads[i] = layer.backward(params[i], cache.layer_caches[i], dy)
        segs = self.layout()
        gv = ParameterVector.pack(segs, [grads[s.layer][s.role] for s in segs])
        return BackwardResult(gv, dy, out_grads)

    def per_sample_grads(self, cache: Cache, out_grads: dict[int, np.ndarray]) -> np.ndarray:
        """``(N, P)`` matrix of per-sample gradients in :meth:`layout` order."""
        cols = []
        for i in self.param_layers():
            g = self.layers[i].per_sample_grads(cache.layer_caches[i], out_grads[i])
            for role in self.layers[i].param_shapes():
                cols.append(g[role].reshape(g[role].shape[0], -1))
        if not cols:
            return np.zeros((0, 0))
        return np.concatenate(cols, axis=1)

    def dense_stats(self, cache: Cache, out_grads) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Per dense layer: input activations ``a`` and pre-activation gradients ``g``."""
        return {
            i: (cache.inputs[i], out_grads[i])
            for i in self.param_layers()
            if self.layers[i].kind == "dense"
        }


# --------------------------------------------------------------------------
# losses


def _labels(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError("one label per row is required")
    c = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValidationError(f"label out of range for {c} classes")
    return logits, labels.astype(np.int64), single


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sce_loss(logits, labels):
    """Softmax cross-entropy averaged over the batch, and its gradient."""
    logits, labels, single = _labels(logits, labels)
    if logits.shape[1] < 2:
        raise ValidationError("softmax cross-entropy needs at least two classes")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def one_hot(labels, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mse_loss(output, labels, alpha: float = 15.0):
    """``0.5 * ||alpha * onehot(y) - output||^2`` averaged over the batch."""
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    output, labels, single = _labels(output, labels)
    n = output.shape[0]
    resid = output - alpha * one_hot(labels, output.shape[1])
    loss = 0.5 * np.sum(resid**2) / n
    grad = resid / n
    return float(loss), (grad[0] if single else grad)


LOSSES = {"sce": sce_loss, "mse": mse_loss}


def loss_fn(kind: str, alpha: float = 15.0):
    if kind == "mse":
        return lambda out, y: mse_loss(out, y, alpha)
    if kind == "sce":
        return sce_loss
    raise ValidationError(f"unknown loss {kind!r}")


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValidationError(f"unknown optimizer {self.kind!r}")

    def reset(self) -> None:
        self.step = 0
        self.slots = {}


def optimizer_step(state: OptimizerState, params, grads) -> np.ndarray:
    """Return updated parameters; ``state`` advances only on success.

    Weight decay is decoupled: parameters shrink by ``lr * weight_decay``
    independently of the gradient statistics.
    """
    is_pv = isinstance(params, ParameterVector)
    p = params.data if is_pv else np.asarray(params, dtype=np.float64)
    g = grads.data if isinstance(grads, ParameterVector) else np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    check_finite(g, "gradient")
    if state.kind == "sgd_momentum":
        buf = state.slots.get("momentum")
        buf = g.copy() if buf is None or state.momentum == 0 else state.momentum * buf + g
        new = p - state.lr * buf
        slots = {"momentum": buf}
    else:
        t = state.step + 1
        m = state.beta1 * state.slots.get("m", np.zeros_like(p)) + (1 - state.beta1) * g
        v = state.beta2 * state.slots.get("v", np.zeros_like(p)) + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        new = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        slots = {"m": m, "v": v}
    if state.weight_decay:
        new = new - state.lr * state.weight_decay * p
    if not np.all(np.isfinite(new)):
        raise NumericError("optimizer produced non-finite parameters")
    state.slots.update(slots)
    state.step += 1
    return params.like(new) if is_pv else new
