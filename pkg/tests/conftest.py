import numpy as np
import pytest

from dlcft.linearization import LinearizedModel
from dlcft.nn import Network, dense, leaky_relu
from dlcft.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def small_mlp(rng, widths=(8, 6), in_dim=3, slope=0.1):
    specs = []
    for i, w in enumerate(widths):
        specs.append(dense(w))
        if i < len(widths) - 1:
            specs.append(leaky_relu(slope))
    return Network(specs, (in_dim,), rng=rng)


def random_delta(model: LinearizedModel, rng, scale=0.1):
    theta = model.get_theta()
    theta.data[:] = scale * rng.standard_normal(theta.data.size)
    model.set_theta(theta)
    return theta


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict = {}


def record(criterion: int, title: str, ok: bool, detail: str = "") -> bool:
    prev = ACCEPTANCE.get(criterion)
    if prev is not None:
        ok = ok and prev[1]
        detail = f"{prev[2]}; {detail}" if detail else prev[2]
    ACCEPTANCE[criterion] = (title, ok, detail)
    print(f"criterion {criterion} {title}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
