import json

import numpy as np
import pytest

from dlcft import bench, cli
from dlcft.config import RunConfig, dump_config, load_config, parse_arch, parse_config_text
from dlcft.curvature import estimate_curvature
from dlcft.data import class_incremental, data_incremental, generate_dataset, load_dataset_csv, save_dataset_csv
from dlcft.engine import train_task
from dlcft.errors import CapacityError, ValidationError
from dlcft.linearization import LinearizedModel
from dlcft.nn import LayerSpec, Network, OptimizerState, conv2d, dense, flatten, leaky_relu, max_pool
from dlcft.numerics import derive_rng, make_rng
from dlcft.serialization import (
    load_model,
    load_network,
    load_store,
    model_from_bytes,
    model_to_bytes,
    network_from_bytes,
    network_to_bytes,
    store_from_bytes,
    store_to_bytes,
)

FAST = dict(
    pretrain_samples=400, pretrain_epochs=2, tasks=3, samples_per_task=30, test_per_task=30, epochs=2,
    arch="dense:16,leaky_relu,dense:8",
)


def fast_cfg(tmp_path, **kw):
    return RunConfig(out_dir=str(tmp_path / "run"), **{**FAST, **kw})


def fast_args(tmp_path, **kw):
    args = []
    for k, v in {**FAST, "out_dir": str(tmp_path / "run"), **kw}.items():
        args += [f"--{k}", str(v)]
    return args


# -- configuration ----------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nseed = 7\nloss = sce   # trailing\n\nlinearized = false\n")
    cfg = load_config(path, {"lr": "0.5", "buffer-capacity": "3"})
    assert (cfg.seed, cfg.loss, cfg.linearized, cfg.lr, cfg.buffer_capacity) == (7, "sce", False, 0.5, 3)


def test_config_dump_round_trip():
    cfg = RunConfig(seed=3, lam=0.25, task_weights="1,2,3,4,5,6,7,8,9,10")
    assert load_config(overrides=parse_config_text(dump_config(cfg))) == cfg


@pytest.mark.parametrize(
    "pairs",
    [
        {"mode": "online"},
        {"nonsense": "1"},
        {"seed": "abc"},
        {"linearized": "maybe"},
        {"lam": "1.5"},
        {"mode": "class_il", "loss": "sce", "classes": "10", "tasks": "5"},
        {"mode": "class_il", "classes": "4", "tasks": "3"},
        {"arch": "dense:x"},
        {"task_weights": "1,2"},
    ],
)
def test_config_violations(pairs):
    with pytest.raises(ValidationError):
        load_config(overrides=pairs)


def test_class_il_sce_allowed_without_penalty():
    load_config(overrides={"mode": "class_il", "loss": "sce", "classes": "10", "tasks": "5", "curvature": "none"})


def test_parse_arch():
    specs = parse_arch("conv2d:4x3s2,max_pool:2,flatten,dense:8,leaky_relu", slope=0.2)
    assert specs[0] == LayerSpec("conv2d", units=4, kernel=3, stride=2)
    assert specs[1] == LayerSpec("max_pool", kernel=2, stride=2)
    assert specs[-1].slope == 0.2
    with pytest.raises(ValidationError):
        parse_arch(" , ")


def test_exact_curvature_respects_cap():
    net = Network(parse_arch("dense:64,leaky_relu,dense:64"), (2,), rng=make_rng(0))
    with pytest.raises(CapacityError):
        bench.build_model(RunConfig(curvature="exact", exact_cap=1000), net)
    bench.build_model(RunConfig(curvature="kfac", exact_cap=1000), net)


# -- datasets ---------------------------------------------------------------


def test_noise_free_blobs_sit_on_centers(rng):
    ds = generate_dataset("blobs", 5, 50, 0.0, rng)
    ang = 2 * np.pi * ds.y / 5
    assert np.allclose(ds.x, 3 * np.stack([np.cos(ang), np.sin(ang)], 1), atol=1e-15)


@pytest.mark.parametrize("kind", ["blobs", "spirals", "rings"])
def test_datasets_are_deterministic(kind):
    a = generate_dataset(kind, 3, 90, 0.1, make_rng(4), 0.3)
    b = generate_dataset(kind, 3, 90, 0.1, make_rng(4), 0.3)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert np.bincount(a.y).tolist() == [30, 30, 30]


def test_dataset_validation(rng):
    for args in [("moons", 2, 10, 0.1), ("blobs", 1, 10, 0.1), ("blobs", 2, 0, 0.1), ("blobs", 2, 10, -1.0)]:
        with pytest.raises(ValidationError):
            generate_dataset(*args, rng)


@pytest.mark.parametrize("header", [True, False])
def test_dataset_csv_round_trip(tmp_path, rng, header):
    ds = generate_dataset("spirals", 3, 30, 0.05, rng)
    path = tmp_path / "d.csv"
    save_dataset_csv(ds, path, header=header)
    back = load_dataset_csv(path)
    assert back.x.tobytes() == ds.x.tobytes() and np.array_equal(back.y, ds.y)


def test_dataset_csv_rejects_bad_labels(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0.1,0.2,1.5\n")
    with pytest.raises(ValidationError):
        load_dataset_csv(path)
    path.write_text("")
    with pytest.raises(ValidationError):
        load_dataset_csv(path)


def test_separated_blobs_are_learnable():
    rng = make_rng(0)
    ds = generate_dataset("blobs", 4, 200, 0.3, rng)
    m = LinearizedModel(Network([dense(16), leaky_relu(), dense(16), leaky_relu(), dense(4)], (2,), rng=rng), linearized=False)
    m.heads[0] = (np.eye(4), np.zeros(4))
    bench._fit(m, 0, ds.x, ds.y, "sce", 15.0, OptimizerState("adam", lr=1e-2), 200, 32, rng)
    assert np.mean(np.argmax(m(ds.x, 0), axis=1) == ds.y) >= 0.99


def test_scenario_builders(rng):
    ds = generate_dataset("blobs", 4, 400, 0.3, rng)
    sc = data_incremental(ds, 4, 60, 40, rng)
    assert len(sc.tasks) == 4 and all(t.classes == (0, 1, 2, 3) for t in sc.tasks)
    cil = class_incremental(ds, 2, 60, 40, rng)
    assert [t.classes for t in cil.tasks] == [(0, 1), (2, 3)]
    # renumbered labels still name the same underlying generator class
    til = class_incremental(ds, 2, 60, 40, make_rng(9), mode="task_il")
    assert all(t.classes == (0, 1) for t in til.tasks)
    with pytest.raises(ValidationError):
        data_incremental(ds, 5, 60, 40, rng)
    with pytest.raises(ValidationError):
        class_incremental(ds, 3, 10, 10, rng)


# -- pre-training -----------------------------------------------------------


def test_zero_epoch_pretrain_is_initialisation():
    cfg = RunConfig(pretrain_epochs=0)
    net, curve = bench.pretrain(cfg)
    init = Network(parse_arch(cfg.arch, cfg.slope), (2,), rng=derive_rng(cfg.seed, bench.STREAM_INIT))
    assert curve == [] and net.get_vector().data.tobytes() == init.get_vector().data.tobytes()


def test_pretrain_is_deterministic():
    cfg = RunConfig(pretrain_epochs=2, pretrain_samples=300)
    a, ca = bench.pretrain(cfg)
    b, cb = bench.pretrain(cfg)
    assert network_to_bytes(a) == network_to_bytes(b) and ca == cb


def _ridge_probe(net, train, test, classes=4):
    m = LinearizedModel(net)

    def feats(x):
        return np.hstack([m.features(x), np.ones((len(x), 1))])

    F = feats(train.x)
    W = np.linalg.solve(F.T @ F + 1e-3 * np.eye(F.shape[1]), F.T @ np.eye(classes)[train.y])
    return np.mean(np.argmax(feats(test.x) @ W, axis=1) == test.y)


@pytest.mark.slow
def test_pretrained_features_beat_random_features():
    cfg = RunConfig(seed=1)
    net, _ = bench.pretrain(cfg)
    rand = Network(net.specs, net.input_shape, rng=derive_rng(1, bench.STREAM_INIT))
    rng = make_rng(101)
    train = generate_dataset("spirals", 4, 200, 0.02, rng, 0.5)
    test = generate_dataset("spirals", 4, 400, 0.02, rng, 0.5)
    assert _ridge_probe(net, train, test) > _ridge_probe(rand, train, test) + 0.3


# -- serialisation ----------------------------------------------------------


def test_network_round_trip(tmp_path, rng):
    net = Network([conv2d(3, 2), leaky_relu(0.3), max_pool(2), flatten(), dense(4)], (1, 7, 7), rng=rng)
    back = network_from_bytes(network_to_bytes(net))
    x = rng.standard_normal((2, 1, 7, 7))
    assert back.specs == net.specs and back.forward(x)[0].tobytes() == net.forward(x)[0].tobytes()


def test_model_round_trip(tmp_path, rng):
    m = LinearizedModel(Network([dense(4), leaky_relu(), dense(3)], (2,), rng=rng))
    m.add_head(0, 2)
    m.add_head("extra", 5)
    th = m.get_theta([0, "extra"])
    m.set_theta(th.like(rng.standard_normal(th.data.size)))
    back = model_from_bytes(model_to_bytes(m))
    x = rng.standard_normal((3, 2))
    assert back(x, "extra").tobytes() == m(x, "extra").tobytes()
    assert back.get_theta([0]).data.tobytes() == m.get_theta([0]).data.tobytes()


@pytest.mark.parametrize("kind", ["diagonal", "kfac", "tkfac", "exact"])
def test_store_round_trip(kind, rng):
    net = Network([conv2d(2, 2), leaky_relu(), flatten(), dense(3)], (1, 4, 4), rng=rng)
    m = LinearizedModel(net)
    m.add_head(0, 2)
    store = estimate_curvature(kind, m, rng.standard_normal((5, 1, 4, 4)), "mse", rng)
    back = store_from_bytes(store_to_bytes(store))
    assert back.dense_matrix().tobytes() == store.dense_matrix().tobytes()
    assert back.reference.tobytes() == store.reference.tobytes() and back.segments == store.segments


def test_corrupt_containers_are_rejected(rng):
    raw = network_to_bytes(Network([dense(2)], (2,), rng=rng))
    for bad in (b"XXXX" + raw[4:], raw[:4] + b"\x09" + raw[5:], raw[:-3]):
        with pytest.raises(ValidationError):
            network_from_bytes(bad)
    with pytest.raises(ValidationError):
        model_from_bytes(raw)


# -- runs and reports -------------------------------------------------------


def _strip_volatile(text):
    d = json.loads(text)
    d.pop("timestamp")
    d.pop("wall_clock")
    return d


def test_reports_are_reproducible(tmp_path):
    a = bench.run(fast_cfg(tmp_path / "a"))
    b = bench.run(fast_cfg(tmp_path / "b"))
    da, db = (tmp_path / x / "run" for x in "ab")
    for name in ("metrics.csv", "tasks.jsonl"):
        assert (da / name).read_bytes() == (db / name).read_bytes()
    ja, jb = _strip_volatile((da / "report.json").read_text()), _strip_volatile((db / "report.json").read_text())
    ja["config"].pop("out_dir"), jb["config"].pop("out_dir")
    assert ja == jb and a.acc == b.acc


def test_rerun_from_config_echo(tmp_path):
    first = bench.run(fast_cfg(tmp_path))
    rep = bench.load_report(tmp_path / "run" / "report.json")
    again = bench.run(RunConfig(**rep.config), write=False)
    assert again.metrics.R.tobytes() == first.metrics.R.tobytes()
    assert again.records == rep.records and again.config == rep.config


def test_emitted_files_reparse(tmp_path):
    rep = bench.run(fast_cfg(tmp_path, knn_k=3), checkpoints=True)
    out = tmp_path / "run"
    from dlcft.engine import MetricsMatrix

    assert MetricsMatrix.from_csv((out / "metrics.csv").read_text()).R.tobytes() == rep.metrics.R.tobytes()
    lines = [json.loads(ln) for ln in (out / "tasks.jsonl").read_text().splitlines()]
    assert [r["task"] for r in lines] == [1, 2, 3] and all("knn" in r for r in lines)
    load_model(out / "checkpoints" / "model_task3.bin")
    assert load_store(out / "checkpoints" / "curvature_task3.bin").task_count == 3
    back = bench.RunReport.from_dict(json.loads((out / "report.json").read_text()))
    assert back.to_json() == rep.to_json()


def test_single_task_report_is_plain_fine_tuning(tmp_path):
    cfg = fast_cfg(tmp_path, tasks=1, curvature="none")
    base = bench.pretrain(cfg)[0]
    rep = bench.run(cfg, base=base, write=False)
    from dlcft.data import build_scenario

    task = build_scenario(cfg, derive_rng(cfg.seed, bench.STREAM_SCENARIO_DATA)).tasks[0]
    m = LinearizedModel(base)
    m.add_head(0, cfg.classes)
    train_task(m, None, task, 1, None, cfg, derive_rng(cfg.seed, bench.STREAM_TRAIN))
    x, y = task.test_split()
    assert rep.acc == np.mean(np.argmax(m(x, 0), axis=1) == y) and rep.bwt is None


def test_zero_rate_trace_is_constant():
    cfg = RunConfig(dataset="blobs", classes=2, noise=0.3, trace_lr=0.0, trace_steps=20, trace_every=10, trace_samples=30)
    rows = bench.trace_curvature(cfg)
    assert [r[1] for r in rows] == [0, 10, 20] * 2
    for loss in ("sce", "mse"):
        lam = [r[4] for r in rows if r[0] == loss]
        assert lam[0] > 0 and lam.count(lam[0]) == 3
    assert bench.trace_from_csv(bench.trace_to_csv(rows)) == rows


def test_trace_respects_cap():
    with pytest.raises(CapacityError):
        bench.trace_curvature(RunConfig(exact_cap=50, trace_steps=1, trace_samples=10))


# -- command line -----------------------------------------------------------


def test_cli_generate_and_reload(tmp_path, capsys):
    out = tmp_path / "d.csv"
    args = ["generate-data", "--kind", "rings", "--classes", "3", "--samples", "30", "--output", str(out)]
    assert cli.main(args + ["--no-header"]) == 0
    assert len(load_dataset_csv(out)) == 30
    assert "30 samples" in capsys.readouterr().out


def test_cli_pretrain_then_run_from_checkpoint(tmp_path):
    assert cli.main(["pretrain", "--output", str(tmp_path / "b.bin")] + fast_args(tmp_path)) == 0
    net = load_network(tmp_path / "b.bin")
    assert (tmp_path / "run" / "pretrain_log.csv").read_text().startswith("epoch,loss\n")
    assert cli.main(["run", "--checkpoint", str(tmp_path / "b.bin")] + fast_args(tmp_path)) == 0
    rep = bench.load_report(tmp_path / "run" / "report.json")
    direct = bench.run(fast_cfg(tmp_path), base=net, write=False)
    assert rep.metrics.R.tobytes() == direct.metrics.R.tobytes()


def test_cli_report_pretty_print(tmp_path, capsys):
    assert cli.main(["run"] + fast_args(tmp_path)) == 0
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "run")]) == 0
    text = capsys.readouterr().out
    assert "accuracy matrix" in text and "ACC" in text and "BWT" in text


def test_cli_sweep(tmp_path):
    assert cli.main(["run", "--sweep", "seeds=1..2"] + fast_args(tmp_path, tasks=2)) == 0
    summary = json.loads((tmp_path / "run" / "sweep.json").read_text())
    assert [s["seed"] for s in summary] == [1, 2]
    for s in (1, 2):
        assert bench.load_report(tmp_path / "run" / f"seed{s}" / "report.json").config["seed"] == s


def test_parse_sweep():
    assert cli.parse_sweep("seeds=3..5") == [3, 4, 5]
    assert cli.parse_sweep("seeds=1,4") == [1, 4]
    for bad in ("seed=1..2", "seeds=", "seeds=a..b", "seeds=5..3"):
        with pytest.raises(ValidationError):
            cli.parse_sweep(bad)


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(bench.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["run", "--out_dir", "rel"] + fast_args(tmp_path)[:-2] + ["--tasks", "1"]) == 0
    assert (tmp_path / "rel" / "report.json").exists()


def test_cli_show_config(tmp_path, capsys):
    assert cli.main(["show-config", "--seed", "9", "--lam=0.3"]) == 0
    cfg = load_config(overrides=parse_config_text(capsys.readouterr().out))
    assert cfg.seed == 9 and cfg.lam == 0.3


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--mode", "bogus"],
        ["run", "--not_a_key", "1"],
        ["show-config", "--seed"],
        ["report", "missing.json", "--extra", "1"],
        ["run", "--mode", "class_il", "--loss", "sce", "--classes", "4", "--tasks", "2"],
    ],
)
def test_cli_config_errors_exit_2(argv, capsys):
    assert cli.main(argv) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_divergence_exits_3(tmp_path, capsys):
    argv = ["pretrain", "--pretrain_lr", "1e9", "--pretrain_epochs", "3", "--out_dir", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_NUMERIC
    assert "diverged" in capsys.readouterr().err


def test_cli_capacity_exits_4(tmp_path):
    argv = ["run", "--curvature", "exact", "--pretrain_epochs", "0", "--out_dir", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_CAPACITY
    assert cli.main(["trace-curvature", "--exact_cap", "10", "--out_dir", str(tmp_path)]) == cli.EXIT_CAPACITY


def test_cli_missing_report_exits_1(tmp_path):
    assert cli.main(["report", str(tmp_path / "nothing.json")]) == cli.EXIT_ERROR


def test_cli_trace_writes_csv(tmp_path):
    argv = ["trace-curvature", "--dataset", "blobs", "--classes", "2", "--trace_steps", "4", "--trace_every", "2",
            "--trace_samples", "20", "--out_dir", str(tmp_path)]
    assert cli.main(argv) == 0
    rows = bench.trace_from_csv((tmp_path / "curvature_trace.csv").read_text())
    assert len(rows) == 6 and {r[0] for r in rows} == {"sce", "mse"}
