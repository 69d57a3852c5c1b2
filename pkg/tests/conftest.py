import numpy as np
import pytest

from lanemesh.mesh import Mesh, normalize, synth_shape


@pytest.fixture
def cube():
    return normalize(synth_shape("cube", 1))


@pytest.fixture
def unit_cube():
    """The cube scaled to [0, 1]^3 (not inset)."""
    m = synth_shape("cube", 1)
    return Mesh((m.vertices + 1.0) / 2.0, m.faces)


def random_closed_mesh(rng: np.random.Generator) -> Mesh:
    """A jittered synthetic closed mesh with a random kind and resolution."""
    kind = rng.choice(["cube", "uv_sphere", "torus"])
    res = int(rng.integers(1, 4)) if kind == "cube" else int(rng.integers(3, 8))
    return normalize(synth_shape(str(kind), res, seed=int(rng.integers(1 << 30)), jitter=0.2))


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one result line for an acceptance criterion."""
    def record(n: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
