"""Experiment configuration: a single versioned JSON document.

Unknown keys are rejected at every level so hyperparameter typos fail fast.
Defaults carry the reference hyperparameters (Adam 1e-4 / weight decay 4e-5,
batch 48, dropout 0.2, seed 2020, momenta 0.999 / 0.9, temperature 0.07,
1 mm similarity radius) with desk-scale dataset sizes.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields

from .augment import AugConfig
from .slidegen import NOISE_MODES, NoiseSpec, SlideConfig
from .trainer import PRESETS, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _take(raw: dict, allowed, where: str) -> None:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


@dataclass
class DatasetBlock:
    slide_count: int = 60
    grid: tuple = (16, 16)
    lesion_count_range: tuple = (1, 3)
    lesion_radius_range: tuple = (1.0, 4.0)
    spacing_mm: float = 0.2178
    noise_mode: str = "k_rand"
    noise_k: int = 1
    split_fractions: dict = field(
        default_factory=lambda: {"train": 0.667, "val": 0.083, "test": 0.25}
    )
    texture: dict = field(default_factory=dict)

    def slide_config(self) -> SlideConfig:
        allowed = {f.name for f in fields(SlideConfig)}
        _take(self.texture, allowed - {"grid_shape", "lesion_count_range",
                                       "lesion_radius_range",
                                       "pixel_spacing_mm"},
              "dataset.texture")
        kwargs = dict(self.texture)
        for key in ("benign_color", "cancer_color", "tissue_axis_range",
                    "speckle_density_range", "background_intensity"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return SlideConfig(
            grid_shape=tuple(self.grid),
            lesion_count_range=tuple(self.lesion_count_range),
            lesion_radius_range=tuple(self.lesion_radius_range),
            pixel_spacing_mm=self.spacing_mm,
            **kwargs,
        )

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.noise_mode, self.noise_k)


@dataclass
class EvalBlock:
    mask_threshold: float = 0.5
    candidate_threshold: float = 0.5


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    master_seed: int = 2020
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "selfsim"
    eval: EvalBlock = field(default_factory=EvalBlock)


_AUG_KEYS = {
    "contrast_range", "brightness_range", "hue_range", "saturation_range",
    "flip_probability", "resize_range", "crop_size", "rotation_range",
    "translation_range", "dropout_rate",
}


def _parse_aug(raw: dict, where: str) -> AugConfig:
    _take(raw, _AUG_KEYS, where)
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return AugConfig(**kwargs)


def parse_config(doc: dict) -> ExperimentConfig:
    _take(doc, {"version", "master_seed", "dataset", "train", "preset",
                "eval"}, "config")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, "
                          f"got {version!r}")

    ds_raw = dict(doc.get("dataset", {}))
    _take(ds_raw, {f.name for f in fields(DatasetBlock)}, "dataset")
    for key in ("grid", "lesion_count_range", "lesion_radius_range"):
        if key in ds_raw:
            ds_raw[key] = tuple(ds_raw[key])
    dataset = DatasetBlock(**ds_raw)
    if dataset.noise_mode not in NOISE_MODES:
        raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")
    _take(dataset.split_fractions, {"train", "val", "test"},
          "dataset.split_fractions")
    total = sum(dataset.split_fractions.get(k, 0.0)
                for k in ("train", "val", "test"))
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {total}")

    tr_raw = dict(doc.get("train", {}))
    allowed = {f.name for f in fields(TrainConfig)}
    _take(tr_raw, allowed, "train")
    for key in ("student_augment", "teacher_augment"):
        if key in tr_raw:
            tr_raw[key] = _parse_aug(tr_raw[key], f"train.{key}")
    train = TrainConfig(**tr_raw)

    preset = doc.get("preset", "selfsim")
    if preset != "selfsim" and preset not in PRESETS:
        raise ConfigError(
            f"preset must be 'selfsim' or one of {sorted(PRESETS)}"
        )

    ev_raw = dict(doc.get("eval", {}))
    _take(ev_raw, {f.name for f in fields(EvalBlock)}, "eval")
    ev = EvalBlock(**ev_raw)

    try:
        dataset.slide_config()
        dataset.noise_spec()
    except ValueError as exc:
        raise ConfigError(str(exc))
    return ExperimentConfig(version=version,
                            master_seed=doc.get("master_seed", 2020),
                            dataset=dataset, train=train, preset=preset,
                            eval=ev)


def load_config(path) -> tuple:
    """Parse a config file; returns (ExperimentConfig, raw document)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(doc), doc


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def default_config_doc() -> dict:
    """A complete default config document (paper hyperparameters,
    desk-scale dataset)."""
    return {
        "version": CONFIG_VERSION,
        "master_seed": 2020,
        "dataset": {
            "slide_count": 60,
            "grid": [16, 16],
            "lesion_count_range": [1, 3],
            "lesion_radius_range": [1.0, 4.0],
            "spacing_mm": 0.2178,
            "noise_mode": "k_rand",
            "noise_k": 1,
            "split_fractions": {"train": 0.667, "val": 0.083, "test": 0.25},
        },
        "train": {
            "epochs": 30,
            "batch_size": 48,
            "base_lr": 1e-4,
            "weight_decay": 4e-5,
            "dropout": 0.2,
            "seed": 2020,
            "teacher_momentum": 0.999,
            "prediction_momentum": 0.9,
            "temperature": 0.07,
            "similar_radius_mm": 1.0,
            "arch": "conv",
        },
        "preset": "selfsim",
        "eval": {"mask_threshold": 0.5, "candidate_threshold": 0.5},
    }
