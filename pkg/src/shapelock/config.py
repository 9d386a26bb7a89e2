"""Pipeline configuration: scale presets, TOML files, and flag overrides.

Precedence (lowest to highest): scale preset defaults, values from the
--config TOML file, then explicit command-line flags. The single global
seed feeds every module unless a section pins its own.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cropping import CropConfig
from .cyclegan import GanModelSpec, GanTrainConfig
from .errors import ConfigError
from .losses import LossWeights
from .phantom import PhantomSpec
from .segmentation import SegTrainConfig, UNetSpec

SCALES = ("desk", "full")


@dataclass
class PhantomSection:
    n_patients: int = 10
    slices_per_patient: int = 15
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    nonlung_fraction: float = 0.05
    image_size: int = 128

    def build_spec(self, overrides: dict | None = None) -> PhantomSpec:
        return PhantomSpec.default(self.image_size, **(overrides or {}))


@dataclass
class CropSection:
    out_size: int = 256
    body_threshold: float = -200.0
    rib_threshold: float = 200.0
    opening_radius: int = 2
    connectivity: int = 8
    margin: int = 2

    def to_crop_config(self) -> CropConfig:
        return CropConfig(
            body_threshold=self.body_threshold,
            rib_threshold=self.rib_threshold,
            opening_radius=self.opening_radius,
            connectivity=self.connectivity,
            margin=self.margin,
        )


@dataclass
class EvaluationSection:
    threshold: float = 0.5
    dataset_name: str = "phantom-test"


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: Path = Path("out")
    scale: str = "desk"
    phantom: PhantomSection = field(default_factory=PhantomSection)
    phantom_spec_overrides: dict = field(default_factory=dict)
    crop: CropSection = field(default_factory=CropSection)
    gan_model: GanModelSpec = field(default_factory=GanModelSpec)
    gan_train: GanTrainConfig = field(default_factory=GanTrainConfig)
    unet: UNetSpec = field(default_factory=UNetSpec)
    seg_train: SegTrainConfig = field(default_factory=SegTrainConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)


def preset(scale: str) -> PipelineConfig:
    """Defaults per scale: 'desk' fits a CPU, 'full' mirrors the reference recipe."""
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    if scale == "desk":
        return PipelineConfig(
            scale="desk",
            crop=CropSection(out_size=64),
            gan_model=GanModelSpec.desk(),
            gan_train=GanTrainConfig(epochs=20),
            unet=UNetSpec.desk(),
            seg_train=SegTrainConfig(epochs=20),
        )
    return PipelineConfig(
        scale="full",
        phantom=PhantomSection(image_size=512, n_patients=40, slices_per_patient=40),
        crop=CropSection(out_size=256),
        gan_model=GanModelSpec(),
        gan_train=GanTrainConfig(epochs=100),
        unet=UNetSpec(),
        seg_train=SegTrainConfig(epochs=100),
    )


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, list) else x


def _coerce(current, incoming):
    """TOML arrays arrive as lists; tuple-typed fields want tuples."""
    if isinstance(current, tuple) and isinstance(incoming, list):
        return _tuplify(incoming)
    return incoming


def _apply_section(obj, section_name: str, data: dict):
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section_name}]: {', '.join(unknown)}")
    updates = {k: _coerce(getattr(obj, k), v) for k, v in data.items()}
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in [{section_name}]: {exc}") from exc


def _read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}")


def load_config(
    config_path: str | Path | None = None,
    scale: str | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> PipelineConfig:
    doc = _read_toml(Path(config_path)) if config_path else {}
    chosen_scale = scale or doc.get("scale", "desk")
    cfg = preset(chosen_scale)

    top_known = {"seed", "out", "scale", "phantom", "crop", "cyclegan", "segmentation", "evaluation"}
    unknown = sorted(set(doc) - top_known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    if "seed" in doc:
        cfg.seed = int(doc["seed"])
    if "out" in doc:
        cfg.out_dir = Path(doc["out"])

    if "phantom" in doc:
        section = dict(doc["phantom"])
        spec_overrides = section.pop("spec", {})
        spec_known = {f.name for f in fields(PhantomSpec)}
        bad = sorted(set(spec_overrides) - spec_known)
        if bad:
            raise ConfigError(f"unknown key(s) in [phantom.spec]: {', '.join(bad)}")
        cfg.phantom_spec_overrides = {k: _tuplify(v) for k, v in spec_overrides.items()}
        cfg.phantom = _apply_section(cfg.phantom, "phantom", section)
    if "crop" in doc:
        cfg.crop = _apply_section(cfg.crop, "crop", doc["crop"])
    if "cyclegan" in doc:
        section = dict(doc["cyclegan"])
        weight_keys = {f.name for f in fields(LossWeights)}
        weight_data = {k: section.pop(k) for k in list(section) if k in weight_keys}
        model_keys = {f.name for f in fields(GanModelSpec)}
        model_data = {k: section.pop(k) for k in list(section) if k in model_keys}
        if model_data:
            cfg.gan_model = _apply_section(cfg.gan_model, "cyclegan", model_data)
        cfg.gan_train = _apply_section(cfg.gan_train, "cyclegan", section)
        if weight_data:
            cfg.gan_train.weights = _apply_section(cfg.gan_train.weights, "cyclegan", weight_data)
    if "segmentation" in doc:
        section = dict(doc["segmentation"])
        unet_keys = {f.name for f in fields(UNetSpec)}
        unet_data = {k: section.pop(k) for k in list(section) if k in unet_keys}
        if unet_data:
            cfg.unet = _apply_section(cfg.unet, "segmentation", unet_data)
        cfg.seg_train = _apply_section(cfg.seg_train, "segmentation", section)
    if "evaluation" in doc:
        cfg.evaluation = _apply_section(cfg.evaluation, "evaluation", doc["evaluation"])

    # command-line flags win
    if scale is not None:
        cfg.scale = scale
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = Path(out_dir)

    # one global seed feeds every module unless a section pinned its own
    if "cyclegan" not in doc or "seed" not in doc.get("cyclegan", {}):
        cfg.gan_train.seed = cfg.seed
    if "segmentation" not in doc or "seed" not in doc.get("segmentation", {}):
        cfg.seg_train.seed = cfg.seed
    return cfg
