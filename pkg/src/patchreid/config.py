"""Run configuration: one JSON document mirroring the dataclass tree.

CLI flags override file values via dotted ``--set`` paths; the effective
config is echoed into the output directory so every run is reproducible
from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import EraseParams, RoaParams
from .blending import BlendConfig
from .encoder import EncoderConfig
from .selection import SelectionConfig

AUGMENTATIONS = ("roa", "re", "cutpaste", "none")
FUSIONS = ("fbm", "add")


@dataclass
class DataConfig:
    kind: str = "synthetic"        # "synthetic" | "folder"
    num_ids: int = 20
    imgs_per_id: int = 8
    cams: int = 3
    folder: str | None = None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    blend: BlendConfig = field(default_factory=BlendConfig)
    roa: RoaParams = field(default_factory=RoaParams)
    erase: EraseParams = field(default_factory=EraseParams)
    data: DataConfig = field(default_factory=DataConfig)
    tau: float = 0.05
    bank_momentum: float = 0.2
    aug_contrastive_weight: float = 0.3
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 120
    k_id: int = 16
    k_img: int = 4
    seed: int = 0
    augmentation: str = "roa"
    aug_prob: float = 0.5
    fusion: str = "fbm"
    normalize_fq: bool = True
    normalize_eval: bool = True
    contrastive_after_fbm: bool = False
    eval_pre_dpsm: bool = False
    mask_bank: str = "synthetic:200"

    def __post_init__(self):
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.blend.dim != self.encoder.dim:
            raise ValueError("blend dim must match encoder dim")
        if self.encoder.num_patches < self.selection.parts:
            raise ValueError("token count must be at least the part count")
        if self.k_id < 1 or self.k_img < 1:
            raise ValueError("batch factors must be positive")

    @property
    def batch_size(self) -> int:
        return self.k_id * self.k_img

    @property
    def parts(self) -> int:
        return self.selection.parts

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    nested = {
        "encoder": EncoderConfig,
        "selection": SelectionConfig,
        "blend": BlendConfig,
        "roa": RoaParams,
        "erase": EraseParams,
        "data": DataConfig,
    }
    kwargs = {}
    for key, cls in nested.items():
        if key in doc:
            kwargs[key] = _build(cls, doc.pop(key))
    kwargs.update(doc)
    return _build(RunConfig, kwargs)


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.field=value` (or `field=value`) strings over a config."""
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        target = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise ValueError(f"unknown config section '{p}' in '{key}'")
            target = target[p]
        leaf = parts[-1]
        if leaf not in target:
            raise ValueError(f"unknown config field '{key}'")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target[leaf] = value
    return config_from_dict(doc)


def toy_config(seed: int = 0) -> RunConfig:
    """Desk-scale defaults: trains in well under a minute per run on CPU."""
    return RunConfig(
        encoder=EncoderConfig(image_h=64, image_w=32, patch=8, dim=64, depth=2, heads=4),
        selection=SelectionConfig(strategy="dynamic", k_min=12, parts=4),
        blend=BlendConfig(dim=64, sub_size=16, heads=1),
        lr=8e-4,
        epochs=30,
        k_id=8,
        k_img=4,
        seed=seed,
    )


def paper_scale_run_config() -> RunConfig:
    """Full-scale preset (shape checks only; far too heavy to train here)."""
    return RunConfig(
        encoder=EncoderConfig(image_h=256, image_w=128, patch=16, dim=768, depth=12, heads=12),
        selection=SelectionConfig(strategy="dynamic", k_min=48, parts=4),
        blend=BlendConfig(dim=768, sub_size=16, heads=1),
        data=DataConfig(num_ids=702, imgs_per_id=8, cams=8),
        lr=1e-4,
        epochs=120,
        k_id=16,
        k_img=4,
    )
