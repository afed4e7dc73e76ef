"""First-order expansion of a pre-trained network in its parameters.

The feature extractor is ``g_lin(x; psi) = g(x; psi0) + J(x; psi0) psi``, where
the Jacobian-vector product is carried alongside the ordinary activations in
a single augmented forward pass. Classification heads act on the summed
feature. Setting ``linearized=False`` gives the ordinary nonlinear network
``g(x; psi0 + psi)`` with the same parameter layout, which the benchmarks
use as the non-linearised baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError, ValidationError
from .nn import Cache, Network, ParameterVector, Segment


@dataclass
class DualTensor:
    value: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.tangent.shape:
            raise DimensionError(f"value {self.value.shape} and tangent {self.tangent.shape} differ")

    @property
    def primal_plus_tangent(self) -> np.ndarray:
        return self.value + self.tangent


@dataclass
class BaseValues:
    """Frozen value-stream activations of the base network for a batch."""

    cache: Cache
    output: np.ndarray

    def take(self, idx) -> "BaseValues":
        def cut(c):
            return None if c is None else c[idx]

        c = self.cache
        sliced = Cache([x[idx] for x in c.inputs], [cut(lc) for lc in c.layer_caches], c.version, c.owner)
        return BaseValues(sliced, self.output[idx])


@dataclass
class ForwardCache:
    base: Cache
    feature: np.ndarray
    task: object
    version: int


@dataclass
class LinearBackward:
    grads: ParameterVector
    dfeature: np.ndarray
    out_grads: dict


def head_id(task) -> str:
    return f"head:{task}"


class LinearizedModel:
    """Frozen base ``psi0``, zero-initialised delta ``psi``, and per-task heads."""

    def __init__(self, base: Network, linearized: bool = True):
        if len(base.output_shape) != 1:
            raise DimensionError("base network must end in a flat feature vector")
        self.base = base
        self.linearized = linearized
        self.feature_dim = base.output_shape[0]
        self.delta = [{k: np.zeros_like(v) for k, v in p.items()} for p in base.params]
        self.heads: dict = {}
        self._version = 0

    # -- bookkeeping --------------------------------------------------------

    def touch(self) -> None:
        self._version += 1

    def add_head(self, task, classes: int) -> None:
        if task in self.heads:
            raise UsageError(f"head for task {task!r} already exists")
        if classes < 1:
            raise ValidationError("a head needs at least one class")
        self.heads[task] = (np.zeros((classes, self.feature_dim)), np.zeros(classes))
        self.touch()

    def expand_head(self, task, extra: int) -> None:
        """Append ``extra`` zero-initialised output units to an existing head."""
        if task not in self.heads:
            raise UsageError(f"no head for task {task!r}")
        if extra < 0:
            raise ValidationError("extra must be non-negative")
        if extra == 0:
            return
        w, b = self.heads[task]
        self.heads[task] = (
            np.vstack([w, np.zeros((extra, self.feature_dim))]),
            np.concatenate([b, np.zeros(extra)]),
        )
        self.touch()

    def head_classes(self, task) -> int:
        return self.heads[task][0].shape[0]

    def layout(self, head_tasks=()) -> tuple[Segment, ...]:
        segs = list(self.base.layout())
        for t in head_tasks:
            c = self.head_classes(t)
            segs.append(Segment(head_id(t), "weight", (c, self.feature_dim)))
            segs.append(Segment(head_id(t), "bias", (c,)))
        return tuple(segs)

    def get_theta(self, head_tasks=()) -> ParameterVector:
        arrays = []
        for s in self.base.layout():
            arrays.append(self.delta[s.layer][s.role])
        for t in head_tasks:
            arrays.extend(self.heads[t])
        return ParameterVector.pack(self.layout(head_tasks), arrays)

    def set_theta(self, theta: ParameterVector) -> None:
        heads = {}
        for s, a in zip(theta.segments, theta.unpack()):
            if isinstance(s.layer, int):
                if self.delta[s.layer][s.role].shape != a.shape:
                    raise DimensionError(f"delta segment {s} has wrong shape")
                self.delta[s.layer][s.role] = a.copy()
            else:
                task = _task_of(s.layer, self.heads)
                w, b = heads.get(task, self.heads[task])
                if s.role == "weight":
                    w = a.copy()
                else:
                    b = a.copy()
                heads[task] = (w, b)
        for task, (w, b) in heads.items():
            if w.shape[0] != b.shape[0]:
                raise DimensionError("head weight/bias disagree on class count")
            self.heads[task] = (w, b)
        self.touch()

    def base_values(self, x) -> BaseValues:
        """Value-stream pass of the frozen base, reusable across epochs."""
        if not self.linearized:
            raise UsageError("value caching only applies to the linearised model")
        out, cache = self.base.forward(x)
        return BaseValues(cache, out)

    def effective_params(self) -> list[dict]:
        return [{k: p[k] + d[k] for k in p} for p, d in zip(self.base.params, self.delta)]

    # -- forward ------------------------------------------------------------

    def augmented_forward(self, x, values: BaseValues | None = None) -> tuple[DualTensor, Cache]:
        """Return ``(g(x; psi0), J psi)`` and the value-stream cache."""
        if values is None:
            out, cache = self.base.forward(x)
        else:
            out, cache = values.output, values.cache
        tx = np.zeros_like(cache.inputs[0])
        for i, layer in enumerate(self.base.layers):
            dp = self.delta[i] if layer.has_params else None
            tx = layer.tangent(self.base.params[i], dp, cache.layer_caches[i], tx)
        return DualTensor(out, tx), cache

    def forward_features(self, x, values: BaseValues | None = None) -> tuple[np.ndarray, Cache]:
        if self.linearized:
            dual, cache = self.augmented_forward(x, values)
            return dual.value + dual.tangent, cache
        return self.base.forward(x, params=self.effective_params())

    def features(self, x) -> np.ndarray:
        return self.forward_features(x)[0]

    def predict(self, x, task, values: BaseValues | None = None) -> tuple[np.ndarray, ForwardCache]:
        """Logits ``w_t (value + tangent) + b_t`` and a cache for :meth:`backward`."""
        if task not in self.heads:
            raise KeyError(f"no head for task {task!r}")
        z, cache = self.forward_features(x, values)
        w, b = self.heads[task]
        return z @ w.T + b, ForwardCache(cache, z, task, self._version)

    def __call__(self, x, task) -> np.ndarray:
        return self.predict(x, task)[0]

    # -- backward -----------------------------------------------------------

    def backward(self, fc: ForwardCache, dlogits, include_head: bool = True) -> LinearBackward:
        """Exact gradients over ``(psi, w_t, b_t)`` for upstream ``dlogits``.

        In linearised mode the reverse pass runs through the frozen base with
        the value-stream gating, which is precisely the transpose of the
        tangent map.
        """
        if fc.version != self._version:
            raise UsageError("stale cache: model changed since the forward pass")
        dlogits = np.asarray(dlogits, dtype=np.float64)
        w, _ = self.heads[fc.task]
        dfeat = dlogits @ w
        params = self.base.params if self.linearized else self.effective_params()
        bw = self.base.backward(fc.base, dfeat, params=params)
        arrays = bw.grads.unpack()
        segs = list(bw.grads.segments)
        if include_head:
            c = w.shape[0]
            segs += [
                Segment(head_id(fc.task), "weight", (c, self.feature_dim)),
                Segment(head_id(fc.task), "bias", (c,)),
            ]
            arrays += [dlogits.T @ fc.feature, dlogits.sum(axis=0)]
        return LinearBackward(ParameterVector.pack(segs, arrays), dfeat, bw.out_grads)

    def per_sample_grads(self, fc: ForwardCache, dlogits, include_head: bool = True) -> np.ndarray:
        """``(N, P)`` per-sample gradients in ``layout([task] if include_head)`` order."""
        bw = self.backward(fc, dlogits, include_head=False)
        mats = [self.base.per_sample_grads(fc.base, bw.out_grads)]
        if include_head:
            n = dlogits.shape[0]
            mats.append(np.einsum("nc,nf->ncf", dlogits, fc.feature).reshape(n, -1))
            mats.append(dlogits)
        return np.concatenate([m for m in mats if m.size], axis=1)

    def kfac_stats(self, fc: ForwardCache, dlogits, include_head: bool = True) -> dict:
        """Per dense layer ``(a, g)``: ``a`` from the value stream, ``g`` the
        gradient reaching the tangent pre-activation. The head contributes
        ``(feature, dlogits)``."""
        bw = self.backward(fc, dlogits, include_head=False)
        stats = self.base.dense_stats(fc.base, bw.out_grads)
        if include_head:
            stats[head_id(fc.task)] = (fc.feature, np.asarray(dlogits))
        return stats


def _task_of(layer_name: str, heads: dict):
    for t in heads:
        if head_id(t) == layer_name:
            return t
    raise KeyError(layer_name)


def linearized_predict(model: LinearizedModel, x, task) -> np.ndarray:
    return model.predict(x, task)[0]


def augmented_forward(model: LinearizedModel, x) -> DualTensor:
    return model.augmented_forward(x)[0]
