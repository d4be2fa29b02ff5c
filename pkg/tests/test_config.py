import json
from pathlib import Path

import pytest

from bincell.toolkit.config import (
    PipelineConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
)
from bincell.toolkit.exceptions import ValidationError


def test_defaults(caplog):
    config = PipelineConfig()
    assert config.seed == 0
    assert config.workers is None
    assert config.codec.stride == 4
    assert config.tiling.tile_size == 512
    assert config.tiling.overlap == 128
    assert config.tiling.merge_iou_threshold == 0.5
    assert config.kmeans.k == 3
    assert (config.focal.alpha, config.focal.beta) == (2.0, 4.0)
    assert config.loss_weights.lambda_radius == 0.1
    assert len(caplog.records) == 0


def test_derived_configs():
    config = PipelineConfig(seed=5)
    codec = config.codec_for(1000, 801)
    assert (codec.input_width, codec.input_height) == (1000, 804)
    assert config.tile_codec().input_width == 512
    assert config.oracle_config(3).seed == 5 ^ 3
    assert config.synth_spec().seed == 5
    grid = config.plan_grid(1000, 800)
    assert grid.tile_size == 512


def test_apply_overrides():
    config = PipelineConfig()
    updated = apply_overrides(
        config, {"seed": 3, "tiling.tile_size": 256, "codec.top_k": 10}
    )
    assert updated.seed == 3
    assert updated.tiling.tile_size == 256
    assert updated.tiling.overlap == 128
    assert updated.codec.top_k == 10
    assert config.tiling.tile_size == 512


@pytest.mark.parametrize(
    "key", ["nope", "codec.nope", "nope.value"], ids=["top", "field", "section"]
)
def test_unknown_override(key):
    with pytest.raises(ValidationError):
        apply_overrides(PipelineConfig(), {key: 1})


def test_sanitizers(caplog):
    config = apply_overrides(
        PipelineConfig(), {"workers": 0, "codec.score_threshold": 1.5}
    )
    assert config.workers == 1
    assert config.codec.score_threshold == 1.0
    assert len(caplog.records) == 2
    assert apply_overrides(PipelineConfig(), {"workers": None}).workers is None


def test_tile_size_not_divisible_by_stride():
    with pytest.raises(ValidationError):
        apply_overrides(PipelineConfig(), {"tiling.tile_size": 510})
    with pytest.raises(ValidationError):
        apply_overrides(PipelineConfig(), {"tiling.overlap": 512})


def test_small_overlap_warns(caplog):
    config = apply_overrides(PipelineConfig(), {"tiling.overlap": 40})
    assert config.tiling.overlap == 40
    assert len(caplog.records) == 1
    assert "overlap" in caplog.records[0].getMessage()


def test_from_dict():
    config = config_from_dict(
        {
            "seed": 5,
            "out_dir": "results",
            "tiling": {"overlap": 64, "pad_value": [0, 0, 0]},
            "loss": {"alpha": 3, "lambda_radius": 0.2},
            "synth": {"class_mix": {"normal": 1.0}, "radius_range": [10, 20]},
            "oracle": {"drop_rate": 0.1},
        }
    )
    assert config.seed == 5
    assert config.out_dir == Path("results")
    assert config.tiling.overlap == 64
    assert config.tiling.pad_value == (0, 0, 0)
    assert config.focal.alpha == 3
    assert config.focal.beta == 4.0
    assert config.loss_weights.lambda_radius == 0.2
    assert config.synth.class_mix == (1.0, 0.0, 0.0, 0.0)
    assert config.synth.radius_range == (10, 20)
    assert config.oracle.drop_rate == 0.1


def test_from_dict_keeps_base():
    base = PipelineConfig(seed=9)
    config = config_from_dict({"kmeans": {"k": 4}}, base)
    assert config.seed == 9
    assert config.kmeans.k == 4


@pytest.mark.parametrize(
    "data",
    [
        {"codec": {"bogus": 1}},
        {"seed": -1},
        {"codec": {"num_classes": 2}},
        {"tiling": {"merge_iou_threshold": 1.0}},
        {"synth": {"class_mix": {"normal": 2.0}}},
        {"unknown": True},
        [],
    ],
)
def test_schema_violation(data):
    with pytest.raises(ValidationError):
        config_from_dict(data)


def test_dict_roundtrip():
    config = config_from_dict(
        {
            "workers": 2,
            "codec": {"num_classes": 4, "nms_iou_threshold": 0.3},
            "tiling": {"tile_size": 256, "overlap": 64},
            "synth": {"cell_count": 7, "noise_sigma": 2.5},
            "oracle": {"heatmap_noise": 0.05},
        }
    )
    document = json.loads(json.dumps(config_to_dict(config)))
    assert config_from_dict(document) == config


def test_load_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 11, "codec": {"score_threshold": 0.4}}))
    config = load_config(path)
    assert config.seed == 11
    assert config.codec.score_threshold == 0.4
    path.write_text("{not json")
    with pytest.raises(json.JSONDecodeError):
        load_config(path)
