"""Sequential training over data-, task- and class-incremental streams.

The per-task objective is

    (1/t) * lambda_t * E_{D_t}[loss] + ((t-1)/t) * R

with ``R`` the quadratic penalty around the previous solution, or, in the
class-incremental setting, ``lam * penalty + (1 - lam) * E_M[loss]`` over a
reservoir-sampled replay buffer ``M``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .curvature import CurvatureStore, accumulate, estimate_curvature, expand_classifier_curvature, penalty
from .errors import ContractError, NumericError, UsageError, ValidationError
from .linearization import LinearizedModel, head_id
from .nn import OptimizerState, loss_fn, optimizer_step
from .numerics import RngState

log = logging.getLogger(__name__)

MODES = ("data_il", "task_il", "class_il")


@dataclass
class TaskBatch:
    """One task's training data plus an optional held-out split.

    Labels index the output units of the head the task is evaluated with.
    """

    inputs: np.ndarray
    labels: np.ndarray
    task_id: int
    classes: tuple = ()
    test_inputs: np.ndarray | None = None
    test_labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] < 1:
            raise ValidationError("a task needs at least one sample")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValidationError("one label per input is required")
        if self.classes and not np.all(np.isin(self.labels, self.classes)):
            raise ValidationError("labels fall outside the task's declared classes")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def test_split(self):
        if self.test_inputs is None:
            return self.inputs, self.labels
        return self.test_inputs, self.test_labels


@dataclass
class Scenario:
    mode: str
    tasks: list
    task_weights: list | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown scenario mode {self.mode!r}")
        if not self.tasks:
            raise ValidationError("a scenario needs at least one task")
        if self.task_weights is None:
            self.task_weights = [1.0] * len(self.tasks)
        if len(self.task_weights) != len(self.tasks):
            raise ValidationError("one task weight per task is required")
        if self.mode == "class_il":
            seen: set = set()
            for task in self.tasks:
                if seen & set(task.classes):
                    raise ValidationError("class-incremental tasks must have disjoint classes")
                seen |= set(task.classes)
        if self.mode == "data_il":
            spaces = {tuple(t.classes) for t in self.tasks}
            if len(spaces) != 1:
                raise ValidationError("data-incremental tasks must share one label space")


@dataclass
class ReplayBuffer:
    capacity: int
    slots: list = field(default_factory=list)
    seen: int = 0

    def __len__(self):
        return len(self.slots)

    def arrays(self):
        xs = np.stack([s[0] for s in self.slots])
        ys = np.array([s[1] for s in self.slots], dtype=np.int64)
        return xs, ys


def reservoir_update(buf: ReplayBuffer, item, rng: RngState) -> ReplayBuffer:
    """Algorithm R: every item offered so far is retained with equal probability."""
    if buf.capacity > 0:
        if buf.seen < buf.capacity:
            buf.slots.append(item)
        else:
            k = int(rng.integers(0, buf.seen + 1))
            if k < buf.capacity:
                buf.slots[k] = item
    buf.seen += 1
    return buf


@dataclass
class MetricsMatrix:
    """``R[i, j]``: accuracy on task ``j`` after training task ``i`` (NaN for ``j > i``)."""

    R: np.ndarray

    @classmethod
    def empty(cls, T: int) -> "MetricsMatrix":
        return cls(np.full((T, T), np.nan))

    @property
    def T(self) -> int:
        return self.R.shape[0]

    def to_csv(self) -> str:
        rows = []
        for i in range(self.T):
            rows.append(",".join("" if np.isnan(v) else repr(float(v)) for v in self.R[i]))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MetricsMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        return cls(np.array([[float(v) if v else np.nan for v in ln.split(",")] for ln in lines]))


def compute_acc_bwt(m: MetricsMatrix | np.ndarray) -> tuple[float, float | None]:
    """Final average accuracy and backward transfer (GEM convention).

    BWT is ``None`` for a single task.
    """
    R = m.R if isinstance(m, MetricsMatrix) else np.asarray(m, dtype=np.float64)
    T = R.shape[0]
    last = R[T - 1]
    if np.any(np.isnan(last)):
        raise ValidationError("metrics matrix is incomplete")
    acc = float(np.mean(last))
    if T < 2:
        return acc, None
    bwt = float(np.mean([R[T - 1, j] - R[j, j] for j in range(T - 1)]))
    return acc, bwt


def knn_probe(model: LinearizedModel, train_set, test_set, k: int = 5) -> float:
    """Accuracy of a k-NN classifier on the pre-head features.

    Votes are unweighted; ties go to the smallest class index and equidistant
    neighbours are taken in training-set order.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    xtr, ytr = train_set
    xte, yte = test_set
    if len(xtr) == 0:
        raise ValidationError("k-NN needs a non-empty training set")
    ytr = np.asarray(ytr, dtype=np.int64)
    ftr = model.features(np.asarray(xtr, dtype=np.float64))
    fte = model.features(np.asarray(xte, dtype=np.float64))
    k = min(k, len(ftr))
    ncls = int(ytr.max()) + 1
    correct = 0
    for start in range(0, len(fte), 512):
        q = fte[start : start + 512]
        d2 = (q * q).sum(1)[:, None] - 2 * q @ ftr.T + (ftr * ftr).sum(1)[None, :]
        nn_idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
        votes = np.zeros((len(q), ncls), dtype=np.int64)
        np.add.at(votes, (np.repeat(np.arange(len(q)), k), ytr[nn_idx].ravel()), 1)
        pred = np.argmax(votes, axis=1)
        correct += int(np.sum(pred == np.asarray(yte)[start : start + 512]))
    return correct / len(fte)


# --------------------------------------------------------------------------
# training


def head_for(mode: str, task: TaskBatch):
    return task.task_id if mode == "task_il" else 0


def regularizes_head(mode: str) -> bool:
    return mode != "task_il"


def accuracy(model: LinearizedModel, x, y, head) -> float:
    logits = model(x, head)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def objective_weights(t: int) -> tuple[float, float]:
    """Weights of the current-task loss and the source-task regulariser."""
    if t < 1:
        raise ValidationError("task index starts at 1")
    return 1.0 / t, (t - 1) / t


def make_optimizer(cfg) -> OptimizerState:
    return OptimizerState(
        kind=cfg.optimizer,
        lr=cfg.lr,
        momentum=cfg.momentum,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def task_objective(model, store, task, t, cfg, mode, xb=None, yb=None, values=None, replay=None, weight=1.0):
    """Value and gradient of the task objective at the model's parameters.

    ``xb``/``yb`` select a minibatch of ``task`` (full task when omitted).
    Returns ``(value, grad ParameterVector over layout([head]))``.
    """
    head = head_for(mode, task)
    loss = loss_fn(cfg.loss, cfg.alpha)
    w_data, w_reg = objective_weights(t)
    w_data *= weight
    if xb is None:
        xb, yb = task.inputs, task.labels
    logits, fc = model.predict(xb, head, values)
    lval, dl = loss(logits, yb)
    g = model.backward(fc, w_data * dl).grads
    total = w_data * lval
    if t > 1:
        lam = cfg.lam if mode == "class_il" else 1.0
        if store is not None and lam > 0:
            reg_heads = [head] if regularizes_head(mode) else []
            pval, pgrad = penalty(store, model.get_theta(reg_heads))
            total += w_reg * lam * pval
            g.data[: pgrad.data.size] += w_reg * lam * pgrad.data
        if replay is not None and lam < 1:
            xr, yr = replay
            rlogits, rfc = model.predict(xr, head)
            rval, rdl = loss(rlogits, yr)
            scale = w_reg * (1 - lam)
            total += scale * rval
            g.data += model.backward(rfc, scale * rdl).grads.data
    return total, g


def train_task(
    model: LinearizedModel,
    store: CurvatureStore | None,
    task: TaskBatch,
    t: int,
    buf: ReplayBuffer | None,
    cfg,
    rng: RngState,
    mode: str = "data_il",
    weight: float = 1.0,
) -> list[float]:
    """Minimise the task objective with minibatch steps; returns per-epoch losses."""
    if t > 1 and store is None and cfg.curvature != "none":
        raise UsageError(f"task {t} needs a curvature store")
    head = head_for(mode, task)
    if head not in model.heads:
        raise UsageError(f"no head for task {head}")
    opt = make_optimizer(cfg)
    values = model.base_values(task.inputs) if model.linearized else None
    n = task.inputs.shape[0]
    bs = n if cfg.batch_size <= 0 else min(cfg.batch_size, n)
    use_replay = mode == "class_il" and t > 1 and buf is not None and len(buf) > 0 and cfg.lam < 1
    if use_replay:
        bx, by = buf.arrays()
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            replay = None
            if use_replay:
                ridx = rng.integers(0, len(bx), size=min(bs, len(bx)))
                replay = (bx[ridx], by[ridx])
            val, grad = task_objective(
                model,
                store,
                task,
                t,
                cfg,
                mode,
                task.inputs[idx],
                task.labels[idx],
                None if values is None else values.take(idx),
                replay,
                weight,
            )
            if not np.isfinite(val):
                raise NumericError(f"non-finite objective at task {t}, epoch {epoch}")
            theta = model.get_theta([head])
            model.set_theta(optimizer_step(opt, theta, grad))
            total += val
            batches += 1
        curve.append(total / max(batches, 1))
    return curve


@dataclass
class ScenarioResult:
    metrics: MetricsMatrix
    records: list
    store: CurvatureStore | None
    knn: list


def run_scenario(
    scenario: Scenario,
    model: LinearizedModel,
    cfg,
    rng: RngState,
    on_task: Callable | None = None,
) -> ScenarioResult:
    """Train every task in order, estimating and accumulating curvature after each.

    ``on_task(t, model, store, record)`` runs after each task (checkpointing).
    """
    mode = scenario.mode
    if any(np.any(d) for p in model.delta for d in p.values()):
        raise UsageError("run_scenario expects a fresh model with zero delta")
    if mode == "class_il" and cfg.curvature != "none" and cfg.lam > 0 and cfg.loss != "mse":
        raise ContractError("class-incremental parameter penalties require the MSE loss")
    T = len(scenario.tasks)
    R = MetricsMatrix.empty(T)
    store = None
    buf = ReplayBuffer(cfg.buffer_capacity)
    records, knn = [], []
    pool_x = np.concatenate([tk.inputs for tk in scenario.tasks])
    pool_y = np.concatenate([tk.labels for tk in scenario.tasks])
    tests = [tk.test_split() for tk in scenario.tasks]
    test_x = np.concatenate([x for x, _ in tests])
    test_y = np.concatenate([y for _, y in tests])
    for t, task in enumerate(scenario.tasks, start=1):
        head = head_for(mode, task)
        if mode == "class_il":
            if head not in model.heads:
                model.add_head(head, task.num_classes)
            else:
                old = model.head_classes(head)
                model.expand_head(head, task.num_classes)
                if store is not None:
                    store = expand_classifier_curvature(store, head_id(head), old, old + task.num_classes)
        elif head not in model.heads:
            model.add_head(head, task.num_classes)
        curve = train_task(model, store, task, t, buf, cfg, rng, mode, scenario.task_weights[t - 1])
        if cfg.curvature != "none":
            new = estimate_curvature(
                cfg.curvature,
                model,
                task.inputs,
                cfg.loss,
                rng,
                task=head,
                include_head=regularizes_head(mode),
                samples_per_input=cfg.samples_per_input,
                fisher=cfg.fisher,
                cap=cfg.exact_cap,
            )
            store = accumulate(store, new, t)
        for item in zip(task.inputs, task.labels):
            reservoir_update(buf, item, rng)
        for j in range(t):
            x, y = tests[j]
            R.R[t - 1, j] = accuracy(model, x, y, head_for(mode, scenario.tasks[j]))
        acc_so_far, bwt_so_far = compute_acc_bwt(MetricsMatrix(R.R[:t, :t]))
        record = {
            "task": t,
            "losses": curve,
            "R_row": [float(v) for v in R.R[t - 1, :t]],
            "acc": acc_so_far,
            "bwt": bwt_so_far,
        }
        if cfg.knn_k:
            seen = pool_x.shape[0] if mode == "data_il" else sum(len(tk.inputs) for tk in scenario.tasks[:t])
            probe = knn_probe(model, (pool_x[:seen], pool_y[:seen]), (test_x, test_y), cfg.knn_k)
            knn.append(probe)
            record["knn"] = probe
        log.info("task %d/%d acc=%.4f", t, T, acc_so_far)
        records.append(record)
        if on_task is not None:
            on_task(t, model, store, record)
    return ScenarioResult(R, records, store, knn)
