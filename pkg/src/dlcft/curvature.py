"""Curvature estimators and quadratic parameter penalties.

Four representations are supported:

* ``diagonal``: squared per-parameter log-likelihood gradients (EWC style);
* ``kfac``: one Kronecker block ``A (x) G`` per dense layer, where ``A`` is
  the second moment of the homogeneous input activation and ``G`` that of
  the pre-activation gradient; convolution layers fall back to a diagonal;
* ``tkfac``: K-FAC blocks rescaled at use time so that each block's trace
  equals a directly tracked Monte-Carlo trace estimate;
* ``exact``: the full ``P x P`` Fisher matrix, for small models only.

Vectorisation of a layer's ``out x (in + 1)`` weight-and-bias matrix is
column-stacking, so a per-sample gradient ``g a~^T`` vectorises to
``a~ (x) g`` and the block reads ``A (x) G``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CapacityError,
    ContractError,
    DegenerateCurvatureError,
    DimensionError,
    UsageError,
    ValidationError,
)
from .linearization import LinearizedModel, head_id
from .nn import ParameterVector, Segment, softmax
from .numerics import RngState, kron, kron_quadratic_form

KINDS = ("diagonal", "kfac", "tkfac", "exact")
EXACT_CAP = 5000
CHUNK = 256


@dataclass
class KroneckerBlock:
    layer: int | str
    A: np.ndarray
    G: np.ndarray
    tau: float
    sample_count: int = 0
    degenerate: bool = False

    def matrix(self) -> np.ndarray:
        return kron(self.A, self.G)

    def copy(self) -> "KroneckerBlock":
        return replace(self, A=self.A.copy(), G=self.G.copy())


@dataclass
class DiagonalCurvature:
    diag: np.ndarray

    def __post_init__(self):
        if np.any(self.diag < 0):
            raise ValidationError("diagonal curvature must be non-negative")


@dataclass
class CurvatureStore:
    """Accumulated curvature of the source-task objectives around ``reference``.

    ``blocks`` maps a layer id to a :class:`KroneckerBlock`, or to a 1-D
    diagonal array for layers without a Kronecker factorisation. ``head_moment``
    keeps ``E[z~ z~^T]`` for each regularised head so the classifier can be
    grown without revisiting data.
    """

    kind: str
    loss: str
    segments: tuple[Segment, ...]
    reference: np.ndarray
    task_count: int = 1
    diag: np.ndarray | None = None
    blocks: dict = field(default_factory=dict)
    H: np.ndarray | None = None
    head_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown curvature kind {self.kind!r}")
        populated = {
            "diagonal": self.diag is not None,
            "kfac": bool(self.blocks),
            "tkfac": bool(self.blocks),
            "exact": self.H is not None,
        }
        if not populated[self.kind]:
            raise ValidationError(f"{self.kind} store has no {self.kind} representation")

    @property
    def size(self) -> int:
        return int(self.reference.size)

    def copy(self) -> "CurvatureStore":
        return CurvatureStore(
            self.kind,
            self.loss,
            self.segments,
            self.reference.copy(),
            self.task_count,
            None if self.diag is None else self.diag.copy(),
            {k: (v.copy()) for k, v in self.blocks.items()},
            None if self.H is None else self.H.copy(),
            {k: v.copy() for k, v in self.head_moment.items()},
        )

    def effective_block(self, layer) -> KroneckerBlock | np.ndarray:
        b = self.blocks[layer]
        if self.kind == "tkfac" and isinstance(b, KroneckerBlock):
            return tkfac_rescale(b, strict=False)
        return b

    def dense_matrix(self) -> np.ndarray:
        """Materialise the represented ``P x P`` matrix in segment order."""
        n = self.size
        if self.kind == "exact":
            return self.H.copy()
        if self.kind == "diagonal":
            return np.diag(self.diag)
        out = np.zeros((n, n))
        offs = _offsets(self.segments)
        for layer in self.blocks:
            blk = self.effective_block(layer)
            if isinstance(blk, KroneckerBlock):
                idx = kron_indices(offs, layer, self.segments)
                out[np.ix_(idx, idx)] = blk.matrix()
            else:
                idx = np.concatenate([np.arange(offs[(layer, r)].start, offs[(layer, r)].stop) for r in _roles(self.segments, layer)])
                out[idx, idx] = blk
        return out


# --------------------------------------------------------------------------
# layout helpers


def _offsets(segments) -> dict:
    res, start = {}, 0
    for s in segments:
        res[(s.layer, s.role)] = slice(start, start + s.size)
        start += s.size
    return res


def _roles(segments, layer):
    return [s.role for s in segments if s.layer == layer]


def _seg(segments, layer, role) -> Segment:
    for s in segments:
        if s.layer == layer and s.role == role:
            return s
    raise KeyError((layer, role))


def kron_indices(offs: dict, layer, segments) -> np.ndarray:
    """Flat positions of the column-stacked ``[W | b]`` of a dense layer."""
    out_dim, in_dim = _seg(segments, layer, "weight").shape
    w0, b0 = offs[(layer, "weight")].start, offs[(layer, "bias")].start
    idx = np.empty((in_dim + 1) * out_dim, dtype=np.int64)
    for j in range(in_dim + 1):
        for i in range(out_dim):
            idx[j * out_dim + i] = w0 + i * in_dim + j if j < in_dim else b0 + i
    return idx


def _wtilde(delta: np.ndarray, offs, layer, segments) -> np.ndarray:
    out_dim, in_dim = _seg(segments, layer, "weight").shape
    w = delta[offs[(layer, "weight")]].reshape(out_dim, in_dim)
    b = delta[offs[(layer, "bias")]]
    return np.hstack([w, b[:, None]])


# --------------------------------------------------------------------------
# log-likelihood gradient directions


def loglik_directions(logits: np.ndarray, loss_kind: str, rng: RngState, samples: int = 1, fisher: str = "sampled"):
    """Yield ``(weight, dlogits)`` pairs whose weighted outer products average
    to the model's output-space Fisher.

    ``sampled`` draws labels from the predictive distribution (a unit-variance
    Gaussian around the output for MSE). ``analytic`` takes the expectation
    over labels exactly: unit vectors for MSE, and the columns
    ``sqrt(p_k) (e_k - p)`` of ``diag(p) - p p^T`` for softmax.
    """
    n, c = logits.shape
    if fisher == "sampled":
        out = []
        for _ in range(samples):
            if loss_kind == "mse":
                d = -rng.standard_normal((n, c))
            elif loss_kind == "sce":
                p = softmax(logits)
                u = rng.random(n)[:, None]
                y = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), c - 1)
                d = p.copy()
                d[np.arange(n), y] -= 1.0
            else:
                raise ValidationError(f"unknown loss {loss_kind!r}")
            out.append((1.0 / samples, d))
        return out
    if fisher == "analytic":
        if loss_kind == "mse":
            return [(1.0, np.tile(np.eye(c)[k], (n, 1))) for k in range(c)]
        if loss_kind == "sce":
            p = softmax(logits)
            return [(1.0, np.sqrt(p[:, k : k + 1]) * (np.eye(c)[k] - p)) for k in range(c)]
        raise ValidationError(f"unknown loss {loss_kind!r}")
    raise ValidationError(f"unknown fisher mode {fisher!r}")


def _inputs(data):
    x = getattr(data, "inputs", data)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValidationError("curvature estimation needs at least one input")
    return x


def _passes(model: LinearizedModel, x, task, loss_kind, rng, samples, fisher):
    """Iterate ``(fc, [(weight, dlogits), ...])`` over chunks of ``x``."""
    for start in range(0, x.shape[0], CHUNK):
        logits, fc = model.predict(x[start : start + CHUNK], task)
        yield fc, loglik_directions(logits, loss_kind, rng, samples, fisher)


# --------------------------------------------------------------------------
# estimators


def estimate_fisher_diagonal(
    model: LinearizedModel,
    data,
    loss_kind: str,
    rng: RngState,
    task=0,
    include_head: bool = True,
    samples_per_input: int = 1,
    fisher: str = "sampled",
) -> DiagonalCurvature:
    x = _inputs(data)
    total = 0.0
    for fc, dirs in _passes(model, x, task, loss_kind, rng, samples_per_input, fisher):
        for w, d in dirs:
            g = model.per_sample_grads(fc, d, include_head)
            total = total + w * np.sum(g * g, axis=0)
    return DiagonalCurvature(total / x.shape[0])


def estimate_kfac(
    model: LinearizedModel,
    data,
    loss_kind: str,
    rng: RngState,
    task=0,
    include_head: bool = True,
    samples_per_input: int = 1,
    fisher: str = "sampled",
) -> dict:
    """Kronecker blocks for dense layers (and the head), diagonal for conv.

    ``tau`` is the mean of ``||a~||^2 ||g||^2``, the trace of the exact
    per-layer Fisher block.
    """
    x = _inputs(data)
    n = x.shape[0]
    sums: dict = {}
    conv_layers = [i for i in model.base.param_layers() if model.base.layers[i].kind != "dense"]
    for fc, dirs in _passes(model, x, task, loss_kind, rng, samples_per_input, fisher):
        for k, (w, d) in enumerate(dirs):
            for layer, (a, g) in model.kfac_stats(fc, d, include_head).items():
                A, G, tau = sums.setdefault(layer, [0.0, 0.0, 0.0])
                at = np.hstack([a, np.ones((a.shape[0], 1))])
                if k == 0:
                    A = A + at.T @ at
                G = G + w * (g.T @ g)
                tau = tau + w * float(np.sum(np.sum(at * at, axis=1) * np.sum(g * g, axis=1)))
                sums[layer] = [A, G, tau]
            if conv_layers:
                bw = model.backward(fc, d, include_head=False)
                for i in conv_layers:
                    layer = model.base.layers[i]
                    pg = layer.per_sample_grads(fc.base.layer_caches[i], bw.out_grads[i])
                    sq = np.concatenate([pg[r].reshape(pg[r].shape[0], -1) for r in layer.param_shapes()], axis=1)
                    sums[i] = sums.get(i, 0.0) + w * np.sum(sq * sq, axis=0)
    blocks: dict = {}
    for layer, v in sums.items():
        if isinstance(v, list):
            A, G, tau = v
            blocks[layer] = KroneckerBlock(layer, A / n, G / n, tau / n, n)
        else:
            blocks[layer] = v / n
    return blocks


def tkfac_rescale(block: KroneckerBlock, strict: bool = True) -> KroneckerBlock:
    """Scale the block so that ``trace(A (x) G) == tau``.

    A zero factor trace raises :class:`DegenerateCurvatureError` when
    ``strict``; otherwise the block comes back unscaled and flagged.
    """
    tr = float(np.trace(block.A) * np.trace(block.G))
    if tr <= 0.0:
        if strict:
            raise DegenerateCurvatureError(f"block {block.layer} has zero factor trace")
        return replace(block.copy(), degenerate=True)
    return replace(block, A=block.A.copy(), G=block.G * (block.tau / tr))


def exact_fim(
    model: LinearizedModel,
    data,
    loss_kind: str,
    rng: RngState,
    task=0,
    include_head: bool = True,
    samples_per_input: int = 1,
    fisher: str = "sampled",
    cap: int = EXACT_CAP,
) -> np.ndarray:
    """Explicit ``P x P`` Fisher: mean of per-sample gradient outer products."""
    x = _inputs(data)
    p = sum(s.size for s in model.layout([task] if include_head else []))
    if p > cap:
        raise CapacityError(f"{p} parameters exceed the exact-curvature cap of {cap}")
    F = np.zeros((p, p))
    for fc, dirs in _passes(model, x, task, loss_kind, rng, samples_per_input, fisher):
        for w, d in dirs:
            g = model.per_sample_grads(fc, d, include_head)
            F += w * (g.T @ g)
    F /= x.shape[0]
    return 0.5 * (F + F.T)


def head_second_moment(model: LinearizedModel, data, task) -> np.ndarray:
    x = _inputs(data)
    F = model.feature_dim
    m = np.zeros((F + 1, F + 1))
    for start in range(0, x.shape[0], CHUNK):
        z = model.features(x[start : start + CHUNK])
        zt = np.hstack([z, np.ones((z.shape[0], 1))])
        m += zt.T @ zt
    return m / x.shape[0]


def estimate_curvature(
    kind: str,
    model: LinearizedModel,
    data,
    loss_kind: str,
    rng: RngState,
    task=0,
    include_head: bool = True,
    samples_per_input: int = 1,
    fisher: str = "sampled",
    cap: int = EXACT_CAP,
) -> CurvatureStore:
    """Estimate one task's curvature at the model's current parameters."""
    head_tasks = [task] if include_head else []
    theta = model.get_theta(head_tasks)
    kw = dict(task=task, include_head=include_head, samples_per_input=samples_per_input, fisher=fisher)
    store = dict(kind=kind, loss=loss_kind, segments=theta.segments, reference=theta.data.copy())
    if kind == "diagonal":
        store["diag"] = estimate_fisher_diagonal(model, data, loss_kind, rng, **kw).diag
    elif kind in ("kfac", "tkfac"):
        store["blocks"] = estimate_kfac(model, data, loss_kind, rng, **kw)
    elif kind == "exact":
        store["H"] = exact_fim(model, data, loss_kind, rng, cap=cap, **kw)
    else:
        raise ValidationError(f"unknown curvature kind {kind!r}")
    if include_head:
        hid = head_id(task)
        blk = store.get("blocks", {}).get(hid)
        store["head_moment"] = {hid: blk.A.copy() if blk is not None else head_second_moment(model, data, task)}
    return CurvatureStore(**store)


# --------------------------------------------------------------------------
# store algebra


def accumulate(store: CurvatureStore | None, new: CurvatureStore, t: int) -> CurvatureStore:
    """Blend ``new`` (task ``t``) into ``store`` with weights ``(t-1)/t : 1/t``.

    Kronecker factors ``A``, ``G`` and the trace ``tau`` are blended
    separately. The reference point moves to ``new.reference``.
    """
    if t < 1:
        raise ValidationError("task index starts at 1")
    if store is None or t == 1:
        out = new.copy()
        out.task_count = 1 if store is None else t
        return out
    if store.kind != new.kind:
        raise UsageError(f"cannot accumulate {new.kind} into {store.kind}")
    if store.segments != new.segments:
        raise UsageError("stores cover different parameter layouts")
    a, b = (t - 1) / t, 1.0 / t
    out = store.copy()
    out.reference = new.reference.copy()
    out.task_count = t
    if store.kind == "diagonal":
        out.diag = a * store.diag + b * new.diag
    elif store.kind == "exact":
        out.H = a * store.H + b * new.H
    else:
        for k, blk in store.blocks.items():
            nb = new.blocks[k]
            if isinstance(blk, KroneckerBlock):
                out.blocks[k] = KroneckerBlock(
                    k,
                    a * blk.A + b * nb.A,
                    a * blk.G + b * nb.G,
                    a * blk.tau + b * nb.tau,
                    blk.sample_count + nb.sample_count,
                )
            else:
                out.blocks[k] = a * blk + b * nb
    for k, m in store.head_moment.items():
        out.head_moment[k] = a * m + b * new.head_moment[k]
    return out


def penalty(store: CurvatureStore | None, theta: ParameterVector) -> tuple[float, ParameterVector]:
    """``0.5 d^T H d`` and ``H d`` with ``d = theta - reference``.

    Kronecker blocks are applied as ``G dW A`` without forming ``A (x) G``.
    """
    if store is None:
        raise UsageError("no curvature store to evaluate")
    if theta.segments != store.segments:
        raise DimensionError("theta layout does not match the curvature store")
    d = theta.data - store.reference
    if store.kind == "diagonal":
        hd = store.diag * d
    elif store.kind == "exact":
        hd = store.H @ d
    else:
        hd = np.zeros_like(d)
        offs = _offsets(store.segments)
        for layer in store.blocks:
            blk = store.effective_block(layer)
            if isinstance(blk, KroneckerBlock):
                wt = _wtilde(d, offs, layer, store.segments)
                gwa = blk.G @ wt @ blk.A
                hd[offs[(layer, "weight")]] = gwa[:, :-1].ravel()
                hd[offs[(layer, "bias")]] = gwa[:, -1]
            else:
                sl = [offs[(layer, r)] for r in _roles(store.segments, layer)]
                start, stop = sl[0].start, sl[-1].stop
                hd[start:stop] = blk * d[start:stop]
    return 0.5 * float(d @ hd), theta.like(hd)


def block_penalty(blk: KroneckerBlock, dW: np.ndarray) -> float:
    """Half the Kronecker quadratic form for one ``[W | b]`` displacement."""
    return 0.5 * kron_quadratic_form(dW, blk.A, blk.G)


def expand_classifier_curvature(store: CurvatureStore, head_layer: str, old_out: int, new_out: int) -> CurvatureStore:
    """Grow the head's curvature from ``old_out`` to ``new_out`` output units.

    Under MSE the head Hessian is ``E[z~ z~^T] (x) I``; appended units are
    zero-initialised, so their block is the stored feature moment times the
    identity, with no coupling to existing parameters. Only stored factors
    are used: no data is touched.
    """
    if store.loss != "mse":
        raise ContractError("classifier expansion is only defined for the MSE loss")
    if new_out < old_out:
        raise ValidationError("a head cannot shrink")
    if head_layer not in store.head_moment:
        raise UsageError(f"store holds no feature moment for {head_layer}")
    wseg = _seg(store.segments, head_layer, "weight")
    if wseg.shape[0] != old_out:
        raise DimensionError(f"head has {wseg.shape[0]} units, not {old_out}")
    extra = new_out - old_out
    if extra == 0:
        return store.copy()
    A = store.head_moment[head_layer]
    feat = wseg.shape[1]
    new_segments = tuple(
        Segment(s.layer, s.role, (new_out,) + s.shape[1:]) if s.layer == head_layer else s for s in store.segments
    )
    old_offs, new_offs = _offsets(store.segments), _offsets(new_segments)
    # map each old flat index to its position in the grown layout
    mapping = np.empty(store.size, dtype=np.int64)
    for s in store.segments:
        o, nw = old_offs[(s.layer, s.role)], new_offs[(s.layer, s.role)]
        mapping[o] = np.arange(nw.start, nw.start + s.size)
    n_new = sum(s.size for s in new_segments)
    ref = np.zeros(n_new)
    ref[mapping] = store.reference
    out = store.copy()
    out.segments = new_segments
    out.reference = ref
    wn, bn = new_offs[(head_layer, "weight")], new_offs[(head_layer, "bias")]
    new_w_idx = np.arange(wn.start + old_out * feat, wn.stop).reshape(extra, feat)
    new_b_idx = np.arange(bn.start + old_out, bn.stop)
    if store.kind == "diagonal":
        diag = np.zeros(n_new)
        diag[mapping] = store.diag
        diag[new_w_idx] = np.diag(A)[:feat]
        diag[new_b_idx] = A[feat, feat]
        out.diag = diag
    elif store.kind == "exact":
        H = np.zeros((n_new, n_new))
        H[np.ix_(mapping, mapping)] = store.H
        for i in range(extra):
            idx = np.concatenate([new_w_idx[i], new_b_idx[i : i + 1]])
            H[np.ix_(idx, idx)] = A
        out.H = H
    else:
        blk = store.blocks[head_layer]
        # tkfac rescales G by s = tau / (tr A tr G) at use time; padding with
        # I / s and raising tau by tr(A) * extra leaves s unchanged, so the
        # effective block of the new units is exactly A (x) I
        s = 1.0
        tr = float(np.trace(blk.A) * np.trace(blk.G))
        if store.kind == "tkfac" and tr > 0 and blk.tau > 0:
            s = blk.tau / tr
        G = np.zeros((new_out, new_out))
        G[:old_out, :old_out] = blk.G
        G[old_out:, old_out:] = np.eye(extra) / s
        out.blocks[head_layer] = KroneckerBlock(
            head_layer, blk.A.copy(), G, blk.tau + float(np.trace(blk.A)) * extra, blk.sample_count
        )
    return out


def softmax_hessian_analytic(logits) -> np.ndarray:
    """Hessian of softmax cross-entropy in the logits: ``diag(p) - p p^T``.

    It does not depend on the target label.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise DimensionError("expects a vector of at least two logits")
    p = softmax(logits)
    return np.diag(p) - np.outer(p, p)
