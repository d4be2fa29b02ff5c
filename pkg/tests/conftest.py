from pathlib import Path

import numpy as np
import pytest

from bincell.toolkit.interface import AnnotationSet, CellClass, CircleAnnotation, Point
from bincell.toolkit.synth import SynthSpec, generate_wsi


def _make_cell(cx, cy, r, cell_class=CellClass.NORMAL, spread=0.45):
    return CircleAnnotation(
        cell_class,
        float(cx),
        float(cy),
        float(r),
        (Point(cx - spread * r, cy), Point(cx + spread * r, cy)),
    )


@pytest.fixture()
def data_dir(request):
    yield Path(request.fspath).parent / "data"


@pytest.fixture()
def rng():
    yield np.random.Generator(np.random.PCG64(1234))


@pytest.fixture()
def make_cell():
    return _make_cell


@pytest.fixture()
def one_cell():
    yield AnnotationSet(512, 512, (_make_cell(100, 100, 20),))


@pytest.fixture(scope="session")
def synth_scenes():
    """Annotation sets of 50 seeded synthetic images."""
    return [
        generate_wsi(SynthSpec(cell_count=15, seed=seed)).annotations
        for seed in range(50)
    ]
