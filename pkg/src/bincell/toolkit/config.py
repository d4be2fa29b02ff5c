"""Configuration of the bincell command line tool.

A :class:`PipelineConfig` groups the parameters of every pipeline stage. It
is built from the defaults, optionally updated from a JSON file (validated
against ``pipeline_config_schema.json``) and finally from command line flags.
Later sources win.
"""
import dataclasses
import json
import logging
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

from bincell.toolkit.exceptions import ValidationError
from bincell.toolkit.geometry import DEFAULT_IOU_THRESHOLD
from bincell.toolkit.heatmap_codec import CodecConfig
from bincell.toolkit.interface import CellClass
from bincell.toolkit.losses import DetectionLossWeights, FocalParams
from bincell.toolkit.parsers import Parse
from bincell.toolkit.schema import load_schema, validate_instance
from bincell.toolkit.synth import OracleConfig, SynthSpec
from bincell.toolkit.tiling import (
    DEFAULT_OVERLAP,
    DEFAULT_PAD_VALUE,
    DEFAULT_TILE_SIZE,
    TileGrid,
    plan_grid,
)

logger = logging.getLogger(__name__)

CONFIG_SCHEMA = "pipeline_config_schema.json"


@dataclass(frozen=True)
class TilingSettings:
    """Sliding window parameters.

    Args:
        tile_size: Edge length of the tiles.
        overlap: Overlap of neighboring tiles.
        merge_iou_threshold: NMS threshold of the cross tile merge.
        pad_value: RGB value of padded pixels.
    """

    tile_size: int = DEFAULT_TILE_SIZE
    overlap: int = DEFAULT_OVERLAP
    merge_iou_threshold: float = DEFAULT_IOU_THRESHOLD
    pad_value: t.Tuple[int, int, int] = DEFAULT_PAD_VALUE

    def __post_init__(self):
        if self.overlap < 0 or self.tile_size <= self.overlap:
            raise ValidationError(
                f"Tile size ({self.tile_size}) must be larger than the overlap "
                f"({self.overlap}) and the overlap must be >= 0."
            )
        if not 0 < self.merge_iou_threshold < 1:
            raise ValidationError(
                f"merge_iou_threshold must be in (0, 1), got "
                f"{self.merge_iou_threshold}."
            )


@dataclass(frozen=True)
class KMeansSettings:
    """Color clustering parameters."""

    k: int = 3
    max_iter: int = 100
    tol: float = 1e-4

    def __post_init__(self):
        if self.k < 1 or self.max_iter < 1:
            raise ValidationError("k and max_iter must be >= 1.")


@dataclass(frozen=True)
class PipelineConfig:
    """All parameters of the pipeline.

    Args:
        seed: Master seed. The synthetic generator, the oracle and k-means
            derive their seeds from it.
        workers: Size of the worker pool (None uses all cores).
        out_dir: Directory for artifacts.
        codec: Heatmap codec parameters. The input size is replaced by the
            tile or image size at use.
        tiling: Sliding window parameters.
        kmeans: Color clustering parameters.
        focal: Focal loss exponents.
        loss_weights: Detection loss weights.
        synth: Synthetic WSI parameters.
        oracle: Oracle perturbations.
    """

    seed: int = 0
    workers: t.Optional[int] = None
    out_dir: t.Optional[Path] = None
    codec: CodecConfig = field(default_factory=CodecConfig)
    tiling: TilingSettings = field(default_factory=TilingSettings)
    kmeans: KMeansSettings = field(default_factory=KMeansSettings)
    focal: FocalParams = field(default_factory=FocalParams)
    loss_weights: DetectionLossWeights = field(default_factory=DetectionLossWeights)
    synth: SynthSpec = field(default_factory=SynthSpec)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.tiling.tile_size % self.codec.stride:
            raise ValidationError(
                f"Tile size {self.tiling.tile_size} is not divisible by the "
                f"stride {self.codec.stride}."
            )
        if self.tiling.overlap < 2 * self.synth.radius_range[1]:
            logger.warning(
                f"The tile overlap ({self.tiling.overlap}) is smaller than the "
                f"largest cell diameter ({2 * self.synth.radius_range[1]}). Cells "
                "on tile borders may be missed."
            )

    def codec_for(self, width: int, height: int) -> CodecConfig:
        """Codec for an input of the given size.

        The input size is rounded up to a multiple of the stride.

        Args:
            width: Image width.
            height: Image height.

        Returns:
            Codec configuration.
        """
        stride = self.codec.stride
        return dataclasses.replace(
            self.codec,
            input_width=-(-width // stride) * stride,
            input_height=-(-height // stride) * stride,
        )

    def tile_codec(self) -> CodecConfig:
        """Codec for one tile."""
        return self.codec_for(self.tiling.tile_size, self.tiling.tile_size)

    def plan_grid(self, width: int, height: int) -> TileGrid:
        """Tile grid of an image of the given size."""
        return plan_grid(
            width,
            height,
            self.tiling.tile_size,
            self.tiling.overlap,
            self.tiling.pad_value,
        )

    def synth_spec(self) -> SynthSpec:
        """Synthetic WSI parameters seeded with the master seed."""
        return dataclasses.replace(
            self.synth, seed=self.seed, tile_size=self.tiling.tile_size
        )

    def oracle_config(self, index: int = 0) -> OracleConfig:
        """Oracle parameters of tile (or image) ``index``, seeded ``seed ^ index``."""
        return dataclasses.replace(self.oracle, seed=self.seed ^ index)


# Sanitizers applied to single values before they enter the configuration.
_SANITIZERS: t.Dict[str, t.Callable[[t.Any], t.Any]] = {
    "workers": lambda value: Parse.greater_equal(value, 1),
    "codec.score_threshold": Parse.unit_interval,
}


def apply_overrides(
    config: PipelineConfig, overrides: t.Mapping[str, t.Any]
) -> PipelineConfig:
    """Return a copy of the configuration with some values replaced.

    Args:
        config: Base configuration.
        overrides: New values by dotted name, e.g. ``"tiling.tile_size"``.

    Returns:
        Updated configuration.

    Raises:
        ValidationError: If a name is unknown or a value is invalid.
    """
    sections: t.Dict[str, t.Dict[str, t.Any]] = {}
    top: t.Dict[str, t.Any] = {}
    for key, value in overrides.items():
        if key in _SANITIZERS and value is not None:
            value = _SANITIZERS[key](value)
        section, _, name = key.rpartition(".")
        if section:
            sections.setdefault(section, {})[name] = value
        else:
            top[name] = value
    try:
        for section, values in sections.items():
            top[section] = dataclasses.replace(getattr(config, section), **values)
        return dataclasses.replace(config, **top)
    except (TypeError, AttributeError) as e:
        raise ValidationError(f"Invalid configuration key: {e}") from None


def _flatten(data: t.Mapping[str, t.Any]) -> t.Dict[str, t.Any]:
    flat: t.Dict[str, t.Any] = {}
    for key, value in data.items():
        if key == "loss":
            for name, item in value.items():
                section = "focal" if name in ("alpha", "beta") else "loss_weights"
                flat[f"{section}.{name}"] = item
        elif isinstance(value, dict):
            for name, item in value.items():
                flat[f"{key}.{name}"] = item
        else:
            flat[key] = value
    if "synth.class_mix" in flat:
        mix = flat["synth.class_mix"]
        flat["synth.class_mix"] = tuple(
            float(mix.get(cell_class.value, 0.0)) for cell_class in CellClass
        )
    for key in ("synth.radius_range", "tiling.pad_value"):
        if key in flat:
            flat[key] = tuple(flat[key])
    if flat.get("out_dir") is not None:
        flat["out_dir"] = Path(flat["out_dir"])
    return flat


def config_from_dict(
    data: t.Any, base: t.Optional[PipelineConfig] = None
) -> PipelineConfig:
    """Build a configuration from its JSON representation.

    Args:
        data: Parsed JSON document.
        base: Configuration providing the values missing in ``data``.

    Returns:
        Configuration.

    Raises:
        ValidationError: If the document does not follow the schema.
    """
    validate_instance(data, load_schema(CONFIG_SCHEMA))
    return apply_overrides(base or PipelineConfig(), _flatten(data))


def config_to_dict(config: PipelineConfig) -> t.Dict[str, t.Any]:
    """JSON representation of a configuration (the seed derived fields omitted)."""
    codec = dataclasses.asdict(config.codec)
    del codec["input_width"], codec["input_height"]
    synth = dataclasses.asdict(config.synth)
    for key in ("seed", "tile_size", "max_overlap", "min_nucleus_gap", "max_retries"):
        del synth[key]
    synth["class_mix"] = dict(
        zip((cell_class.value for cell_class in CellClass), config.synth.class_mix)
    )
    synth["radius_range"] = list(config.synth.radius_range)
    oracle = dataclasses.asdict(config.oracle)
    del oracle["seed"]
    tiling = dataclasses.asdict(config.tiling)
    tiling["pad_value"] = list(config.tiling.pad_value)
    return {
        "seed": config.seed,
        "workers": config.workers,
        "out_dir": None if config.out_dir is None else str(config.out_dir),
        "codec": codec,
        "tiling": tiling,
        "kmeans": dataclasses.asdict(config.kmeans),
        "loss": {
            **dataclasses.asdict(config.focal),
            **dataclasses.asdict(config.loss_weights),
        },
        "synth": synth,
        "oracle": oracle,
    }


def load_config(
    path: t.Union[str, Path], base: t.Optional[PipelineConfig] = None
) -> PipelineConfig:
    """Read a configuration file.

    Args:
        path: Path of the JSON file.
        base: Configuration providing the values missing in the file.

    Returns:
        Configuration.
    """
    with Path(path).open("r", encoding="utf-8") as file:
        return config_from_dict(json.load(file), base)
