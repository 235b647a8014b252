import numpy as np
import pytest

from mtclip.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the recorded measurements."""
    lines = []
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            if rep.when == "setup" and status == "passed":
                continue
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            verdict = {"passed": "PASS", "skipped": "SKIP"}.get(status, "FAIL")
            detail = "; ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            lines.append((name, f"criterion {int(name[:2]):2d} {name[3:]:<28} {verdict}" + (f"  [{detail}]" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
