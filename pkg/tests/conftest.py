import numpy as np
import pytest

from emgpose import hand_model as hm


@pytest.fixture(scope="session")
def model():
    return hm.load_model()


def random_safe_poses(model, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        q = rng.uniform(model.lower, model.upper)
        if hm.collision_free(model, q)[0]:
            out.append(q)
    return np.array(out)


ACCEPTANCE_LINES = []


def record_acceptance(number, title, ok, detail=""):
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    line = f"ACCEPTANCE {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
