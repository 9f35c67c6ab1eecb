import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

GOLDEN = Path(__file__).parent / "golden"
ACCEPTANCE_RESULTS: dict = {}


def record_acceptance(key, ok, detail):
    ACCEPTANCE_RESULTS[key] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[2:])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Two CLI pipeline runs with seed 42 in separate directories."""
    import time

    from nabqr.cli import cli_main

    root = Path(__file__).parent.parent
    dirs, codes, seconds = [], [], []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        codes.append(cli_main(["pipeline", "--config", str(root / "default.toml"), "--seed", "42", "--output-dir", str(out)]))
        seconds.append(time.perf_counter() - t0)
        dirs.append(out)
    return {"dirs": dirs, "codes": codes, "seconds": seconds}
