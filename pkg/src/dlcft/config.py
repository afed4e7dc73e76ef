"""Flat ``key = value`` run configuration with command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError
from .nn import LayerSpec


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint: str = ""
    # base network; input width comes from the dataset
    arch: str = "dense:64,leaky_relu,dense:64,leaky_relu,dense:32"
    slope: float = 0.01
    # pre-training stage
    pretrain_kind: str = "spirals"
    pretrain_classes: int = 8
    pretrain_samples: int = 2400
    pretrain_noise: float = 0.05
    pretrain_epochs: int = 60
    pretrain_batch: int = 64
    pretrain_lr: float = 3e-3
    # downstream scenario
    mode: str = "data_il"
    dataset: str = "spirals"
    classes: int = 4
    tasks: int = 10
    samples_per_task: int = 60
    test_per_task: int = 100
    noise: float = 0.02
    rotation: float = 0.5
    split: str = "sector"
    data_file: str = ""
    task_weights: str = ""
    # model and objective
    linearized: bool = True
    loss: str = "mse"
    alpha: float = 15.0
    curvature: str = "tkfac"
    fisher: str = "sampled"
    samples_per_input: int = 1
    exact_cap: int = 5000
    lam: float = 0.5
    buffer_capacity: int = 500
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    knn_k: int = 0
    # curvature tracing
    trace_steps: int = 3000
    trace_every: int = 100
    trace_lr: float = 1e-2
    trace_samples: int = 200
    trace_arch: str = "dense:24,leaky_relu,dense:24,leaky_relu"

    def validate(self) -> "RunConfig":
        choices = {
            "mode": ("data_il", "task_il", "class_il"),
            "loss": ("mse", "sce"),
            "curvature": ("none", "diagonal", "kfac", "tkfac", "exact"),
            "fisher": ("sampled", "analytic"),
            "optimizer": ("adam", "sgd_momentum"),
            "split": ("sector", "iid"),
            "dataset": ("blobs", "spirals", "rings"),
            "pretrain_kind": ("blobs", "spirals", "rings"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ValidationError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.mode == "class_il" and self.curvature != "none" and self.lam > 0 and self.loss != "mse":
            raise ValidationError("class_il with a parameter penalty requires loss = mse")
        for key in ("tasks", "samples_per_task", "classes", "epochs"):
            if getattr(self, key) < (0 if key == "epochs" else 1):
                raise ValidationError(f"{key} must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lam must lie in [0, 1]")
        if self.mode != "data_il" and self.classes % self.tasks:
            raise ValidationError("classes must split evenly across tasks")
        parse_arch(self.arch, self.slope)
        self.weights()
        return self

    def weights(self) -> list[float] | None:
        if not self.task_weights:
            return None
        try:
            w = [float(v) for v in self.task_weights.split(",")]
        except ValueError as exc:
            raise ValidationError(f"bad task_weights: {self.task_weights!r}") from exc
        if len(w) != self.tasks:
            raise ValidationError("task_weights needs one entry per task")
        return w

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def parse_arch(text: str, slope: float = 0.01) -> list[LayerSpec]:
    """``dense:64,leaky_relu,conv2d:8x3,max_pool:2,flatten`` to layer specs.

    ``conv2d:CxK`` or ``conv2d:CxKsS`` gives channels, kernel and stride.
    """
    specs = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        kind, _, arg = tok.partition(":")
        try:
            if kind == "dense":
                specs.append(LayerSpec("dense", units=int(arg)))
            elif kind == "conv2d":
                ch, _, rest = arg.partition("x")
                k, _, s = rest.partition("s")
                specs.append(LayerSpec("conv2d", units=int(ch), kernel=int(k), stride=int(s or 1)))
            elif kind in ("max_pool", "avg_pool"):
                specs.append(LayerSpec(kind, kernel=int(arg), stride=int(arg)))
            elif kind == "leaky_relu":
                specs.append(LayerSpec(kind, slope=float(arg) if arg else slope))
            else:
                specs.append(LayerSpec(kind))
        except ValueError as exc:
            raise ValidationError(f"bad layer token {tok!r}") from exc
    if not specs:
        raise ValidationError("empty architecture")
    return specs


def _coerce(raw: str, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}[typ]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    return typ(raw.strip())


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for key, raw in pairs.items():
        key = key.replace("-", "_")
        if key not in types:
            raise ValidationError(f"unknown config key {key!r}")
        try:
            updates[key] = _coerce(raw, types[key])
        except ValueError as exc:
            raise ValidationError(f"bad value for {key}: {raw!r}") from exc
    return cfg.replace(**updates)


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {n}: expected key = value")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
