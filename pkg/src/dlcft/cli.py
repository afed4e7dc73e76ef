"""``dlcft`` command-line entry point.

Exit status: 0 success, 2 configuration error, 3 numeric failure,
4 capacity error, 1 anything else raised by the library.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .config import dump_config, load_config
from .data import generate_dataset, load_dataset_csv, save_dataset_csv
from .errors import CapacityError, DLCFTError, NumericError, ValidationError
from .numerics import derive_rng
from .serialization import save_network

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAPACITY = 0, 1, 2, 3, 4

log = logging.getLogger("dlcft")


def _split_overrides(extra: list[str]) -> dict[str, str]:
    """``--key value`` and ``--key=value`` pairs left over by argparse."""
    pairs = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ValidationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, _, value = key.partition("=")
        else:
            if i + 1 >= len(extra):
                raise ValidationError(f"missing value for {tok}")
            i += 1
            value = extra[i]
        pairs[key] = value
        i += 1
    return pairs


def parse_sweep(text: str) -> list[int]:
    """``seeds=a..b`` (inclusive) or ``seeds=a,b,c``."""
    key, _, spec = text.partition("=")
    if key != "seeds" or not spec:
        raise ValidationError(f"bad sweep {text!r}; expected seeds=a..b")
    try:
        if ".." in spec:
            lo, _, hi = spec.partition("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in spec.split(",")]
    except ValueError as exc:
        raise ValidationError(f"bad sweep {text!r}") from exc
    if not seeds:
        raise ValidationError("empty seed sweep")
    return seeds


def _config(args, extra):
    return load_config(args.config, _split_overrides(extra))


def cmd_pretrain(args, extra) -> int:
    cfg = _config(args, extra)
    net, curve = bench.pretrain(cfg)
    out = bench.output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.output) if args.output else out / "base.bin"
    save_network(net, path)
    (out / "pretrain_log.csv").write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    print(f"saved base network to {path}")
    return EXIT_OK


def _run_one(cfg, checkpoints: bool) -> bench.RunReport:
    report = bench.run(cfg, checkpoints=checkpoints)
    bwt = "n/a" if report.bwt is None else f"{report.bwt:.4f}"
    print(f"{bench.output_dir(cfg)}: ACC={report.acc:.4f} BWT={bwt}")
    return report


def cmd_run(args, extra) -> int:
    cfg = _config(args, extra)
    if not args.sweep:
        _run_one(cfg, args.checkpoints)
        return EXIT_OK
    base_dir = Path(cfg.out_dir)
    summary = []
    for seed in parse_sweep(args.sweep):
        sub = cfg.replace(seed=seed, out_dir=str(base_dir / f"seed{seed}"))
        rep = _run_one(sub, args.checkpoints)
        summary.append({"seed": seed, "acc": rep.acc, "bwt": rep.bwt})
    out = bench.output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_trace(args, extra) -> int:
    cfg = _config(args, extra)
    rows = bench.trace_curvature(cfg)
    out = bench.output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "curvature_trace.csv"
    path.write_text(bench.trace_to_csv(rows))
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_generate(args, extra) -> int:
    if extra:
        raise ValidationError(f"unexpected arguments {extra}")
    rng = derive_rng(args.seed, bench.STREAM_SCENARIO_DATA)
    ds = generate_dataset(args.kind, args.classes, args.samples, args.noise, rng, args.rotation)
    save_dataset_csv(ds, args.output, header=not args.no_header)
    load_dataset_csv(args.output)
    print(f"wrote {len(ds)} samples to {args.output}")
    return EXIT_OK


def format_report(rep: bench.RunReport) -> str:
    lines = [f"dlcft {rep.version}  {rep.timestamp}  ({rep.wall_clock:.1f}s)"]
    cfg = rep.config
    lines.append(
        f"mode={cfg.get('mode')} loss={cfg.get('loss')} curvature={cfg.get('curvature')} "
        f"linearized={cfg.get('linearized')} seed={cfg.get('seed')}"
    )
    lines.append("accuracy matrix (row = after task i, column = task j):")
    for row in rep.metrics.R:
        lines.append("  " + " ".join("   -  " if v != v else f"{v:6.3f}" for v in row))
    bwt = "n/a" if rep.bwt is None else f"{rep.bwt:+.4f}"
    lines.append(f"ACC {rep.acc:.4f}  BWT {bwt}")
    if rep.knn:
        lines.append("k-NN probe: " + " ".join(f"{v:.3f}" for v in rep.knn))
    return "\n".join(lines)


def cmd_report(args, extra) -> int:
    if extra:
        raise ValidationError(f"unexpected arguments {extra}")
    path = Path(args.path)
    if path.is_dir():
        path = path / "report.json"
    rep = bench.load_report(path)
    print(format_report(rep))
    return EXIT_OK


def cmd_show_config(args, extra) -> int:
    sys.stdout.write(dump_config(_config(args, extra)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlcft", description="Linearised continual fine-tuning benchmark.", allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    add = lambda name, **kw: sub.add_parser(name, allow_abbrev=False, **kw)  # noqa: E731

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file; further --key value pairs override it")
        return sp

    sp = with_config(add("pretrain", help="train the base network"))
    sp.add_argument("--output", help="checkpoint path (default OUT_DIR/base.bin)")
    sp.set_defaults(func=cmd_pretrain)

    sp = with_config(add("run", help="run one continual-learning scenario"))
    sp.add_argument("--sweep", help="seeds=a..b runs each seed into OUT_DIR/seedN")
    sp.add_argument("--checkpoints", action="store_true", help="save model and curvature after each task")
    sp.set_defaults(func=cmd_run)

    sp = with_config(add("trace-curvature", help="trace the largest Fisher eigenvalue under SCE and MSE"))
    sp.set_defaults(func=cmd_trace)

    sp = add("generate-data", help="write a synthetic dataset as CSV")
    sp.add_argument("--kind", default="spirals", choices=("blobs", "spirals", "rings"))
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--rotation", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-header", action="store_true")
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = add("report", help="pretty-print a run report")
    sp.add_argument("path", help="report.json or a run directory")
    sp.set_defaults(func=cmd_report)

    sp = with_config(add("show-config", help="print the resolved configuration"))
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, extra)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (DLCFTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
