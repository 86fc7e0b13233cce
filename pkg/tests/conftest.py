import numpy as np
import pytest

from supbench.dataset import SceneRecord, PolygonAnnotation, build_splits, prepare_tiles
from supbench.pipeline import TileDataset
from supbench.synthetic import SyntheticSpec, generate_synthetic_dataset


def rect(x0, y0, x1, y1, pid="p"):
    return PolygonAnnotation(((x0, y0), (x1, y0), (x1, y1), (x0, y1)), pid)


def blank_scene(scene_id="s0", size=400, polygons=()):
    return SceneRecord(scene_id, np.zeros((size, size, 3), dtype=np.uint8), list(polygons))


@pytest.fixture(scope="session")
def small_dataset():
    """200 synthetic tiles with a seeded 80/10/10 split."""
    scenes, _ = generate_synthetic_dataset(SyntheticSpec(n_scenes=8, panel_density=12, rng_seed=3))
    tiles = prepare_tiles(scenes)
    return TileDataset.from_tiles(tiles, build_splits(tiles, 0))


# ------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc is not None:
            detail = f"{detail}; {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".lstrip("; ")
        _CRITERIA[self.number] = (status, f"{self.title}" + (f" ({detail})" if detail else ""))
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text = _CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n}: {text}")
