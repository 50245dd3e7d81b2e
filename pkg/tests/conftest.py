from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from pseudolabel.geometry import BBox, BinaryMask, Instance

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: list[str] = []


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion still decides the test outcome."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _criteria.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria):
            terminalreporter.write_line(line)


def random_box(rng: np.random.Generator, min_side: float = 1e-3) -> BBox:
    w, h = rng.uniform(min_side, 0.6, 2)
    x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    return BBox(x, y, x + w, y + h)


def jittered(rng: np.random.Generator, b: BBox, sigma: float = 0.03) -> BBox:
    c = np.array([(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2]) + rng.normal(0, sigma, 2)
    w = np.clip(b.width * rng.uniform(0.8, 1.25), 1e-3, 1.0)
    h = np.clip(b.height * rng.uniform(0.8, 1.25), 1e-3, 1.0)
    x1 = float(np.clip(c[0] - w / 2, 0, 1 - w))
    y1 = float(np.clip(c[1] - h / 2, 0, 1 - h))
    return BBox(x1, y1, x1 + w, y1 + h)


@st.composite
def boxes(draw, min_side: float = 1e-3):
    xs = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    ys = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    if xs[1] - xs[0] < min_side:
        xs = [min(xs[0], 1 - min_side), min(xs[0], 1 - min_side) + min_side]
    if ys[1] - ys[0] < min_side:
        ys = [min(ys[0], 1 - min_side), min(ys[0], 1 - min_side) + min_side]
    return BBox(xs[0], ys[0], xs[1], ys[1])


@st.composite
def instances(draw, labels=("spacecraft",)):
    return Instance(draw(boxes()), draw(st.floats(0, 1)), draw(st.sampled_from(labels)))


@st.composite
def masks(draw, max_side: int = 16):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    bits = draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    return BinaryMask(np.array(bits, dtype=bool).reshape(h, w))
