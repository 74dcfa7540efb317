import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from trendlab import cli
from trendlab.data import Dataset

CACHE = Path(os.environ.get("TRENDLAB_TEST_CACHE", Path(__file__).resolve().parent.parent / ".desk-cache"))


VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line, then hand the outcome back for asserting."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def desk_dir():
    """Digits IDX files plus a desk config, shared by every desk-scale test."""
    pytest.importorskip("sklearn")
    data_dir = CACHE / "data"
    if not (data_dir / "digits-labels.idx").exists():
        from trendlab.data import export_digits

        export_digits(data_dir)
    cfg = cli.desk_config(data_dir.resolve(), output=str((CACHE / "out").resolve()))
    path = CACHE / "desk.json"
    text = json.dumps(cfg, indent=1, sort_keys=True)
    if not path.exists() or path.read_text() != text:
        path.write_text(text)
    return CACHE


@pytest.fixture(scope="session")
def desk(desk_dir):
    """Trained desk catalog (cached on disk between runs)."""
    ctx = cli.Context(cli.load_config(desk_dir / "desk.json"))
    ctx.all_models()
    return ctx


@pytest.fixture(scope="session")
def desk_matrix(desk):
    """Confusion matrix for the desk's configured PGD attack, with its wall time in seconds."""
    t = time.perf_counter()
    cm = cli.compute_matrix(desk, desk.cfg.attacks[0])
    return cm, time.perf_counter() - t


@pytest.fixture(scope="session")
def desk_seed2(desk_dir):
    """A second plain FP/SGD model differing only in its seeds."""
    d = json.loads((desk_dir / "desk.json").read_text())
    d["catalog"] = [{**e, "id": "plain-sgd-FP-s2", "seed": 2} for e in d["catalog"] if e["id"] == "plain-sgd-FP"]
    d["fit"], d["trend"] = {}, {}
    ctx = cli.Context(cli.ExperimentConfig.from_dict(d))
    return ctx.model(ctx.cfg.catalog[0])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def blobs(n=60, seed=0, sep=4.0):
    """Two well separated 2-D Gaussian blobs."""
    r = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = r.standard_normal((n, 2)) * 0.5 + np.where(y[:, None] == 1, sep / 2, -sep / 2)
    return Dataset(x, y)
