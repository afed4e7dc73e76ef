"""Synthetic 2-D classification data and incremental task streams.

The desk-scale analogue of pre-training on a large dataset and fine-tuning
on a related one: a base network is trained on a many-class variant of a
generator, downstream tasks are drawn from a rotated, fewer-class variant.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Scenario, TaskBatch
from .errors import ValidationError
from .numerics import RngState

KINDS = ("blobs", "spirals", "rings")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    position: np.ndarray | None = None  # generator coordinate used for covariate-shift splits

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], None if self.position is None else self.position[idx])


def generate_dataset(
    kind: str,
    classes: int,
    samples: int,
    noise: float,
    rng: RngState,
    rotation: float = 0.0,
) -> Dataset:
    """Balanced synthetic data; labels cycle through the classes.

    blobs: isotropic clusters around points on a radius-3 circle;
    spirals: interleaved arms of radius 1 spanning 1.5 turns;
    rings: concentric annuli of radius ``k + 1``.
    """
    if kind not in KINDS:
        raise ValidationError(f"unknown dataset kind {kind!r}")
    if classes < 2:
        raise ValidationError("need at least two classes")
    if samples < 1:
        raise ValidationError("need at least one sample")
    if noise < 0:
        raise ValidationError("noise must be non-negative")
    y = np.arange(samples) % classes
    eps = rng.standard_normal((samples, 2))
    if kind == "blobs":
        ang = 2 * np.pi * y / classes + rotation
        x = 3.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1) + noise * eps
        pos = np.arctan2(eps[:, 1], eps[:, 0])
    elif kind == "spirals":
        s = rng.random(samples)
        ang = 2 * np.pi * y / classes + rotation + 3 * np.pi * s
        r = 0.1 + 0.9 * s
        x = r[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1) + noise * eps
        pos = s
    else:
        phi = 2 * np.pi * rng.random(samples)
        r = (y + 1.0)[:, None]
        x = r * np.stack([np.cos(phi + rotation), np.sin(phi + rotation)], axis=1) + noise * eps
        pos = phi
    return Dataset(x, y.astype(np.int64), pos)


def save_dataset_csv(ds: Dataset, path: str | Path, header: bool = True) -> None:
    d = ds.x.shape[1]
    lines = []
    if header:
        lines.append(",".join([f"x{i}" for i in range(d)] + ["label"]))
    for row, label in zip(ds.x, ds.y):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset_csv(path: str | Path) -> Dataset:
    """Rows of features followed by an integer label; a header row is optional."""
    rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows:
        raise ValidationError(f"{path} is empty")
    try:
        [float(v) for v in rows[0].split(",")]
    except ValueError:
        rows = rows[1:]
    data = np.array([[float(v) for v in ln.split(",")] for ln in rows])
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValidationError("expected at least one feature column and a label column")
    labels = data[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise ValidationError("labels must be non-negative integers")
    return Dataset(data[:, :-1], labels.astype(np.int64))


def _split_train_test(ds: Dataset, n_train: int, rng: RngState):
    idx = rng.permutation(len(ds))
    return ds.subset(idx[:n_train]), ds.subset(idx[n_train:])


def data_incremental(ds: Dataset, tasks: int, n_train: int, n_test: int, rng: RngState, split: str = "sector") -> Scenario:
    """Cut ``ds`` into ``tasks`` chunks of ``n_train + n_test`` samples.

    ``sector`` orders samples by their generator coordinate first, so each
    task sees a different region of the input space; ``iid`` shuffles.
    """
    per = n_train + n_test
    if len(ds) < tasks * per:
        raise ValidationError(f"dataset has {len(ds)} samples, scenario needs {tasks * per}")
    if split == "sector":
        if ds.position is None:
            raise ValidationError("sector split needs generator positions")
        order = np.argsort(ds.position, kind="stable")
    elif split == "iid":
        order = rng.permutation(len(ds))
    else:
        raise ValidationError(f"unknown split {split!r}")
    classes = tuple(range(int(ds.y.max()) + 1))
    out = []
    for t in range(tasks):
        chunk = ds.subset(order[t * per : (t + 1) * per])
        tr, te = _split_train_test(chunk, n_train, rng)
        out.append(TaskBatch(tr.x, tr.y, t, classes, te.x, te.y))
    return Scenario("data_il", out)


def class_incremental(ds: Dataset, tasks: int, n_train: int, n_test: int, rng: RngState, mode: str = "class_il") -> Scenario:
    """Partition classes into ``tasks`` disjoint groups.

    Class-IL labels are renumbered by order of arrival (the units of the
    single growing head); task-IL labels are local to each task's head.
    """
    classes = int(ds.y.max()) + 1
    if classes % tasks:
        raise ValidationError("classes must split evenly across tasks")
    per_task = classes // tasks
    perm = rng.permutation(classes)
    out = []
    for t in range(tasks):
        group = perm[t * per_task : (t + 1) * per_task]
        sel = np.flatnonzero(np.isin(ds.y, group))
        if len(sel) < n_train + n_test:
            raise ValidationError(f"task {t} has {len(sel)} samples, needs {n_train + n_test}")
        sel = rng.permutation(sel)[: n_train + n_test]
        sub = ds.subset(sel)
        local = np.searchsorted(np.sort(group), sub.y)
        rank = np.argsort(group)[local]
        labels = rank if mode == "task_il" else rank + t * per_task
        cls = tuple(range(per_task)) if mode == "task_il" else tuple(range(t * per_task, (t + 1) * per_task))
        sub = Dataset(sub.x, labels.astype(np.int64))
        tr, te = _split_train_test(sub, n_train, rng)
        out.append(TaskBatch(tr.x, tr.y, t, cls, te.x, te.y))
    return Scenario(mode, out)


def build_scenario(cfg, rng: RngState) -> Scenario:
    per = cfg.samples_per_task + cfg.test_per_task
    if cfg.data_file:
        ds = load_dataset_csv(cfg.data_file)
    else:
        total = cfg.tasks * per if cfg.mode == "data_il" else cfg.tasks * per + cfg.classes
        ds = generate_dataset(cfg.dataset, cfg.classes, total, cfg.noise, rng, cfg.rotation)
    if cfg.mode == "data_il":
        sc = data_incremental(ds, cfg.tasks, cfg.samples_per_task, cfg.test_per_task, rng, cfg.split)
    else:
        sc = class_incremental(ds, cfg.tasks, cfg.samples_per_task, cfg.test_per_task, rng, cfg.mode)
    w = cfg.weights()
    if w is not None:
        sc.task_weights = w
    return sc
