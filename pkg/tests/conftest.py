import numpy as np
import pytest

from advmultvae import data as dp
from advmultvae.synthetic import SyntheticSpec, generate, write_dataset


def central_diff(f, arrays, index, step=1e-5):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. ``arrays[index]``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    out = np.zeros_like(target)
    for i in np.ndindex(target.shape):
        orig = target[i]
        target[i] = orig + step
        hi = f(arrays)
        target[i] = orig - step
        lo = f(arrays)
        target[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture(scope="session")
def synthetic_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("synthetic")
    return write_dataset(d, SyntheticSpec())


@pytest.fixture(scope="session")
def synthetic_matrix(synthetic_files):
    inter, labels = dp.ingest(synthetic_files[0], dp.FORMATS["ml-1m"], synthetic_files[1])
    return dp.preprocess(inter, labels)


@pytest.fixture
def small_matrix():
    """40 users x 12 items, both classes, everyone above the degree limits."""
    X, y = generate(SyntheticSpec(users=40, items=12, p_own=0.8, p_other=0.3, p_shared=0.6, seed=3))
    inter = [dp.RawInteraction(str(u), str(i), 1.0) for u, i in zip(*np.nonzero(X))]
    labels = {str(u): "MF"[c] for u, c in enumerate(y)}
    return dp.preprocess(inter, labels)


# acceptance verdicts, one line per criterion, echoed at the end of the session
ACCEPTANCE: list[str] = []


def record(criterion, ok, detail=""):
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    ACCEPTANCE.append(f"{status}  {criterion}" + (f"  ({detail})" if detail else ""))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
