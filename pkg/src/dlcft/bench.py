"""Benchmark stages: pre-training, scenario runs and curvature tracing."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_arch
from .curvature import exact_fim
from .data import build_scenario, generate_dataset
from .engine import MetricsMatrix, compute_acc_bwt, run_scenario
from .errors import CapacityError, NumericError
from .linearization import LinearizedModel
from .nn import Network, OptimizerState, dense, loss_fn, optimizer_step
from .numerics import derive_rng, max_eigenvalue
from .serialization import load_network, save_model, save_store

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DLCFT_OUTPUT_ROOT"

# rng streams of one seeded run
STREAM_INIT, STREAM_PRETRAIN, STREAM_SCENARIO_DATA, STREAM_TRAIN, STREAM_TRACE = range(5)


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _fit(model: LinearizedModel, head, x, y, loss: str, alpha: float, opt: OptimizerState, epochs: int, batch: int, rng):
    """Plain minibatch training of delta and ``head``; returns per-epoch losses."""
    fn = loss_fn(loss, alpha)
    n = len(y)
    bs = n if batch <= 0 else min(batch, n)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            logits, fc = model.predict(x[idx], head)
            val, dl = fn(logits, y[idx])
            if not np.isfinite(val):
                raise NumericError(f"pre-training diverged at epoch {epoch}")
            grad = model.backward(fc, dl).grads
            model.set_theta(optimizer_step(opt, model.get_theta([head]), grad))
            total += val * len(idx)
        curve.append(total / n)
    return curve


def pretrain(cfg: RunConfig) -> tuple[Network, list[float]]:
    """Train the base feature extractor on the many-class source distribution."""
    data_rng = derive_rng(cfg.seed, STREAM_PRETRAIN)
    ds = generate_dataset(cfg.pretrain_kind, cfg.pretrain_classes, cfg.pretrain_samples, cfg.pretrain_noise, data_rng)
    net = Network(parse_arch(cfg.arch, cfg.slope), (ds.x.shape[1],), rng=derive_rng(cfg.seed, STREAM_INIT))
    model = LinearizedModel(net, linearized=False)
    model.add_head("pretrain", cfg.pretrain_classes)
    init = derive_rng(cfg.seed, STREAM_INIT + 100)
    w = init.standard_normal((cfg.pretrain_classes, model.feature_dim)) * np.sqrt(1.0 / model.feature_dim)
    model.heads["pretrain"] = (w, np.zeros(cfg.pretrain_classes))
    opt = OptimizerState("adam", lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
    curve = _fit(model, "pretrain", ds.x, ds.y, "sce", cfg.alpha, opt, cfg.pretrain_epochs, cfg.pretrain_batch, data_rng)
    base = Network(net.specs, net.input_shape, params=model.effective_params())
    return base, curve


def load_or_pretrain(cfg: RunConfig) -> Network:
    if cfg.checkpoint:
        return load_network(cfg.checkpoint)
    return pretrain(cfg)[0]


@dataclass
class RunReport:
    config: dict
    metrics: MetricsMatrix
    acc: float
    bwt: float | None
    records: list
    knn: list = field(default_factory=list)
    wall_clock: float = 0.0
    version: str = __version__
    timestamp: str = ""

    def to_dict(self) -> dict:
        R = [[None if np.isnan(v) else float(v) for v in row] for row in self.metrics.R]
        return {
            "config": self.config,
            "metrics": R,
            "acc": self.acc,
            "bwt": self.bwt,
            "records": self.records,
            "knn": self.knn,
            "wall_clock": self.wall_clock,
            "version": self.version,
            "timestamp": self.timestamp,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        R = np.array([[np.nan if v is None else v for v in row] for row in d["metrics"]], dtype=np.float64)
        return cls(
            d["config"], MetricsMatrix(R), d["acc"], d["bwt"], d["records"], d.get("knn", []),
            d.get("wall_clock", 0.0), d.get("version", ""), d.get("timestamp", ""),
        )


def build_model(cfg: RunConfig, base: Network) -> LinearizedModel:
    model = LinearizedModel(base, linearized=cfg.linearized)
    if cfg.curvature == "exact":
        n = base.num_params() + model.feature_dim * (cfg.classes + 1)
        if n > cfg.exact_cap:
            raise CapacityError(f"{n} parameters exceed exact_cap={cfg.exact_cap}")
    return model


def run(cfg: RunConfig, base: Network | None = None, write: bool = True, checkpoints: bool = False) -> RunReport:
    """Execute one configured scenario and (optionally) write its outputs."""
    start = time.perf_counter()
    cfg.validate()
    if base is None:
        base = load_or_pretrain(cfg)
    model = build_model(cfg, base)
    scenario = build_scenario(cfg, derive_rng(cfg.seed, STREAM_SCENARIO_DATA))
    out = output_dir(cfg)
    save_every = write and checkpoints
    if save_every:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    def on_task(t, m, store, record):
        save_model(m, out / "checkpoints" / f"model_task{t}.bin")
        if store is not None:
            save_store(store, out / "checkpoints" / f"curvature_task{t}.bin")

    res = run_scenario(scenario, model, cfg, derive_rng(cfg.seed, STREAM_TRAIN), on_task=on_task if save_every else None)
    acc, bwt = compute_acc_bwt(res.metrics)
    report = RunReport(
        cfg.to_dict(), res.metrics, acc, bwt, res.records, res.knn,
        round(time.perf_counter() - start, 3), __version__, time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    if write:
        write_report(report, out)
    return report


def write_report(report: RunReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.metrics.to_csv())
    with open(out / "tasks.jsonl", "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# curvature tracing

TRACE_COLUMNS = ("loss", "step", "train_loss", "test_loss", "lambda_max")


def _trace_one(cfg: RunConfig, loss: str, net0: Network, train, test) -> list[tuple]:
    classes = int(train[1].max()) + 1
    model = LinearizedModel(net0.copy(), linearized=False)
    model.heads["out"] = (np.eye(classes), np.zeros(classes))
    p = model.base.num_params()
    if p > cfg.exact_cap:
        raise CapacityError(f"{p} parameters exceed exact_cap={cfg.exact_cap}")
    fn = loss_fn(loss, cfg.alpha)
    opt = OptimizerState("adam", lr=cfg.trace_lr, weight_decay=0.0)
    rows = []
    for step in range(cfg.trace_steps + 1):
        logits, fc = model.predict(train[0], "out")
        tr_loss, dl = fn(logits, train[1])
        if step % cfg.trace_every == 0 or step == cfg.trace_steps:
            te_loss = fn(model(test[0], "out"), test[1])[0]
            F = exact_fim(
                model, train[0], loss, derive_rng(cfg.seed, STREAM_TRACE), task="out",
                include_head=False, samples_per_input=cfg.samples_per_input, fisher=cfg.fisher, cap=cfg.exact_cap,
            )
            lam = max_eigenvalue(F, derive_rng(cfg.seed, STREAM_TRACE + 1), iters=2000, tol=1e-9)
            rows.append((loss, step, tr_loss, te_loss, lam))
        if step == cfg.trace_steps:
            break
        if not np.isfinite(tr_loss):
            raise NumericError(f"{loss} trace diverged at step {step}")
        grad = model.backward(fc, dl, include_head=False).grads
        model.set_theta(optimizer_step(opt, model.get_theta([]), grad))
    return rows


def trace_curvature(cfg: RunConfig) -> list[tuple]:
    """Train the same small MLP under SCE and under MSE, tracing the largest
    Fisher eigenvalue along the way. Rows follow :data:`TRACE_COLUMNS`."""
    rng = derive_rng(cfg.seed, STREAM_SCENARIO_DATA)
    train = generate_dataset(cfg.dataset, cfg.classes, cfg.trace_samples, cfg.noise, rng, cfg.rotation)
    test = generate_dataset(cfg.dataset, cfg.classes, cfg.trace_samples, cfg.noise, rng, cfg.rotation)
    specs = parse_arch(cfg.trace_arch, cfg.slope) + [dense(cfg.classes)]
    net0 = Network(specs, (2,), rng=derive_rng(cfg.seed, STREAM_INIT))
    rows = []
    for loss in ("sce", "mse"):
        rows += _trace_one(cfg, loss, net0, (train.x, train.y), (test.x, test.y))
    return rows


def trace_to_csv(rows) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for loss, step, tr, te, lam in rows:
        lines.append(f"{loss},{step},{tr!r},{te!r},{lam!r}")
    return "\n".join(lines) + "\n"


def trace_from_csv(text: str) -> list[tuple]:
    rows = []
    for ln in text.splitlines()[1:]:
        if ln.strip():
            loss, step, tr, te, lam = ln.split(",")
            rows.append((loss, int(step), float(tr), float(te), float(lam)))
    return rows
