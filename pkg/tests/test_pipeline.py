import json

import pytest

from bincell.toolkit.config import PipelineConfig, apply_overrides
from bincell.toolkit.heatmap_codec import load_targets
from bincell.toolkit.interface import AnnotationSet
from bincell.toolkit.io import read_annotations
from bincell.toolkit.pipeline import run_pipeline, tile_annotations
from bincell.toolkit.tiling import plan_grid


def _config(**overrides):
    return apply_overrides(PipelineConfig(), overrides)


def test_noiseless_pipeline_is_exact():
    result = run_pipeline(_config(seed=7, **{"synth.cell_count": 40}))
    assert len(result.synth.annotations.cells) == 40
    assert len(result.detections) == 40
    assert result.report.ap == 1.0
    assert result.report.f1 == 1.0


def test_tiled_pipeline_is_exact():
    config = _config(
        seed=3,
        workers=2,
        **{
            "synth.wsi_width": 1200,
            "synth.wsi_height": 900,
            "synth.cell_count": 60,
        },
    )
    result = run_pipeline(config)
    assert len(result.grid) == 9
    assert result.report.ap == 1.0


def test_noisy_pipeline():
    result = run_pipeline(
        _config(seed=7, **{"synth.cell_count": 40, "oracle.drop_rate": 0.5})
    )
    assert result.report.ap < 1.0
    assert len(result.detections) < 40


def test_artifacts(tmp_path):
    result = run_pipeline(_config(seed=7, out_dir=tmp_path, **{"synth.cell_count": 5}))
    names = {path.name for path in tmp_path.iterdir()}
    assert {
        "wsi.ppm",
        "wsi.json",
        "wsi.layers.btnsr",
        "grid.json",
        "wsi.targets.obj_hm.btnsr",
        "wsi.targets.obj_mask.btnsr",
        "wsi.detections.json",
        "pr.csv",
        "report.json",
        "config.json",
    } <= names
    assert read_annotations(tmp_path / "wsi.json") == result.synth.annotations
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["ap"] == result.report.ap
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 7
    targets = load_targets(tmp_path / "wsi.targets")
    assert targets.obj_heatmap.shape == (1, 128, 128)
    assert targets.obj_heatmap.max() == 1.0


def test_artifacts_are_reproducible(tmp_path):
    config = _config(seed=7, out_dir=tmp_path, **{"synth.cell_count": 10})
    run_pipeline(config)
    first = {path.name: path.read_bytes() for path in tmp_path.iterdir()}
    run_pipeline(config)
    second = {path.name: path.read_bytes() for path in tmp_path.iterdir()}
    assert first == second


def test_tile_annotations(make_cell):
    inside, border = make_cell(100, 100, 20), make_cell(450, 100, 20)
    annotations = AnnotationSet(1000, 800, (inside, border))
    grid = plan_grid(1000, 800, 512, 128)
    first = tile_annotations(annotations, grid, 0)
    assert (first.image_width, first.image_height) == (512, 512)
    assert first.cells == (inside, border)
    second = tile_annotations(annotations, grid, 1)
    assert len(second.cells) == 1
    cell = second.cells[0]
    x0 = grid.origins[1][0]
    assert cell.cx == pytest.approx(450 - x0)
    assert cell.nuclei[0].x == pytest.approx(border.nuclei[0].x - x0)
    assert cell.cy == 100
