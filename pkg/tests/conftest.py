import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def numgrad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def reproduce_run(tmp_path_factory):
    """One full ``reproduce --seed 0`` with default settings, shared by every test that needs it."""
    import json

    from nqde.cli import main

    out = tmp_path_factory.mktemp("reproduce") / "summary.csv"
    code = main(["reproduce", "--seed", "0", "--out", str(out)])
    return {"code": code, "csv": out, "sidecar": json.loads(out.with_suffix(".json").read_text())}
