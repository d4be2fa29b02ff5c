import numpy as np
import pytest

from bincell.toolkit.config import PipelineConfig
from bincell.toolkit.exceptions import ValidationError
from bincell.toolkit.geometry import circle_iou_matrix
from bincell.toolkit.interface import Circle, Detection, Point, ScoredCircle
from bincell.toolkit.pipeline import detect_whole_image, oracle_tile_predictor
from bincell.toolkit.synth import SynthSpec, generate_wsi
from bincell.toolkit.tiling import (
    TileDetection,
    TileGrid,
    detect_tiles,
    extract_cell_patch,
    extract_tile,
    grid_from_dict,
    grid_to_dict,
    merge_cross_tile,
    plan_grid,
    read_grid,
    remap_to_wsi,
    write_grid,
)


def _detection(cx, cy, r=20.0, score=0.9, class_id=0):
    return Detection(
        ScoredCircle(Circle(cx, cy, r), score, class_id),
        (Point(cx - 5, cy), Point(cx + 5, cy)),
    )


def _circles(detections):
    return [d.circle.circle for d in detections]


def test_plan_grid_origins():
    grid = plan_grid(1000, 800, 512, 128)
    assert grid.origins == (
        (0, 0),
        (384, 0),
        (768, 0),
        (0, 384),
        (384, 384),
        (768, 384),
    )
    assert grid.stride == 384
    assert grid.padding(2) == (280, 0)
    assert grid.padding(5) == (280, 96)
    assert grid.padding(0) == (0, 0)


def test_plan_grid_small_wsi():
    grid = plan_grid(300, 200, 512, 128)
    assert grid.origins == ((0, 0),)
    assert grid.padding(0) == (212, 312)


def test_plan_grid_exact_fit():
    grid = plan_grid(512, 512, 512, 0)
    assert grid.origins == ((0, 0),)
    assert grid.padding(0) == (0, 0)


def test_plan_grid_validation():
    with pytest.raises(ValidationError):
        plan_grid(1000, 800, 128, 128)
    with pytest.raises(ValidationError):
        TileGrid(10, 10, 64, -1)


def test_extract_tiles():
    wsi = np.random.Generator(np.random.PCG64(5)).integers(
        0, 100, (800, 1000, 3), dtype=np.uint8
    )
    grid = plan_grid(1000, 800)
    interior = extract_tile(wsi, grid, 0)
    np.testing.assert_array_equal(interior, wsi[:512, :512])
    corner = extract_tile(wsi, grid, 5)
    assert corner.shape == (512, 512, 3)
    np.testing.assert_array_equal(corner[:416, :232], wsi[384:, 768:])
    assert (corner[:, 232:] == 128).all()
    assert (corner[416:, :] == 128).all()
    with pytest.raises(IndexError):
        extract_tile(wsi, grid, 6)


def test_extract_gray_tile():
    wsi = np.zeros((10, 10), dtype=np.uint8)
    tile = extract_tile(wsi, plan_grid(10, 10, 16, 4, (50, 60, 70)), 0)
    assert tile.shape == (16, 16)
    assert (tile[10:, :] == 50).all()


def test_extract_cell_patch():
    wsi = np.zeros((200, 200, 3), dtype=np.uint8)
    patch = extract_cell_patch(wsi, _detection(10.0, 100.0), size=128)
    assert patch.shape == (128, 128, 3)
    assert (patch[:, :54] == 128).all()
    assert (patch[:, 54:] == 0).all()


def test_remap():
    grid = plan_grid(1000, 800)
    result = remap_to_wsi(
        [TileDetection(1, _detection(100.0, 50.0)), TileDetection(2, _detection(250, 10))],
        grid,
    )
    assert _circles(result.detections) == [Circle(484.0, 50.0, 20.0)]
    assert result.detections[0].nuclei == (Point(479.0, 50.0), Point(489.0, 50.0))
    assert result.dropped == 1


def test_merge_duplicates():
    first = _detection(100.0, 100.0, score=0.85)
    second = _detection(101.0, 100.0, score=0.9)
    merged = merge_cross_tile([first, second], 0.5)
    assert [d.score for d in merged] == [0.9]


def test_merge_keeps_disjoint_and_classes():
    first = _detection(100.0, 100.0)
    second = _detection(300.0, 100.0, score=0.5)
    other_class = _detection(100.0, 100.0, score=0.7, class_id=1)
    assert merge_cross_tile([first, second]) == [first, second]
    assert merge_cross_tile([first, other_class]) == [first, other_class]
    assert merge_cross_tile([first, other_class], per_class=False) == [first]
    assert merge_cross_tile([]) == []


def test_detect_tiles_order():
    wsi = np.zeros((800, 1000, 3), dtype=np.uint8)
    grid = plan_grid(1000, 800)

    def predictor(tile, index):
        assert tile.shape == (512, 512, 3)
        return [_detection(10.0, 10.0, score=0.1 * (index + 1))] * (index % 2 + 1)

    result = detect_tiles(wsi, grid, predictor, workers=3)
    assert [d.tile_index for d in result] == [0, 1, 1, 2, 3, 3, 4, 5, 5]


def test_grid_roundtrip(tmp_path):
    grid = plan_grid(1000, 800, pad_value=(1, 2, 3))
    write_grid(grid, tmp_path / "grid.json")
    assert read_grid(tmp_path / "grid.json") == grid
    data = grid_to_dict(grid)
    del data["pad_value"]
    assert grid_from_dict(data).pad_value == (128, 128, 128)
    data["origins"] = []
    with pytest.raises(ValidationError):
        grid_from_dict(data)


@pytest.mark.parametrize("seed", range(10))
def test_tiled_detection_matches_whole_image(seed):
    config = PipelineConfig(
        seed=seed, synth=SynthSpec(wsi_width=2048, wsi_height=1536, cell_count=60)
    )
    synth = generate_wsi(config.synth_spec())
    annotations = synth.annotations
    whole = detect_whole_image(annotations, config)
    grid = config.plan_grid(2048, 1536)
    remapped = remap_to_wsi(
        detect_tiles(
            synth.image, grid, oracle_tile_predictor(annotations, grid, config), 2
        ),
        grid,
    )
    merged = merge_cross_tile(remapped.detections, 0.5)
    assert remapped.dropped == 0
    assert len(whole) == len(merged) == 60
    iou = circle_iou_matrix(_circles(whole), _circles(merged))
    assert (iou.max(axis=1) >= 0.99).all()
    assert (iou.max(axis=0) >= 0.99).all()
    assert sorted(iou.argmax(axis=1)) == list(range(60))
