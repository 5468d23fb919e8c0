import numpy as np
import pytest

from carleman_phaseless.forward import scenario_medium, measure
from carleman_phaseless.grid import build_grid, slab_index

X0 = (0.0, 0.0, -4.0)


@pytest.fixture(scope="session")
def x0():
    return X0


@pytest.fixture(scope="session")
def test1_small():
    """Noiseless Test-1 volume data on an 11^3 grid with 21 wavenumbers."""
    g = build_grid(1.0, 11)
    s = slab_index(g, 0.45)
    m = scenario_medium("test1", g.refine(2))
    ks = np.linspace(np.pi, 2 * np.pi, 21)
    data, u_slab, u_vol = measure(m, X0, ks, s, volume=True)
    return {"grid": g, "slab": s, "ks": ks, "f": data.values, "u_slab": u_slab, "u_vol": u_vol}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one result line per acceptance criterion for the terminal summary."""

    def report(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
