"""Run configuration: a nested key-value document mirroring the dataclass
tree one-to-one. Unknown keys are hard errors so typos cannot silently
fall back to defaults. The canonical JSON serialization (sorted keys)
feeds the config hash stored in checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .data import AugmentConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import AblationToggles, ModelConfig
from .optim import OptimConfig


@dataclass
class ModelSection:
    image_size: int = 64
    patch: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_targets: tuple = ("query", "value")
    num_classes: int = 4
    decoder_heads: int = 4
    decoder_depth: int = 2
    fresh_stage2_queries: bool = False
    use_original_mask_attention: bool = False
    noise_sigma0: float = 0.05
    noise_var_max: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 8
    checkpoint_every: int = 0      # 0: only at the end
    eval_every: int = 1
    stop_at_dice: float = 0.0      # 0: never stop early
    augment_enabled: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    ablation: AblationToggles = field(default_factory=AblationToggles)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)

    # ---- model construction ------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(
            image_size=m.image_size, patch=m.patch, depth=m.depth, dim=m.dim,
            heads=m.heads, in_channels=1, mlp_ratio=m.mlp_ratio,
            lora_rank=m.lora_rank, lora_targets=tuple(m.lora_targets),
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            encoder=self.encoder_config(),
            num_classes=m.num_classes,
            decoder_heads=m.decoder_heads,
            decoder_depth=m.decoder_depth,
            toggles=self.ablation,
            use_original_mask_attention=m.use_original_mask_attention,
            fresh_stage2_queries=m.fresh_stage2_queries,
            noise_sigma0=m.noise_sigma0,
            noise_var_max=m.noise_var_max,
        )


_DATACLASS_FIELDS = {
    "model": ModelSection,
    "ablation": AblationToggles,
    "loss": LossConfig,
    "optim": OptimConfig,
    "train": TrainSection,
    "augment": AugmentConfig,
}


def _from_mapping(cls, mapping, path: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(mapping).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} under {path or 'top level'}")
    kwargs = {}
    for name, value in mapping.items():
        sub_cls = _DATACLASS_FIELDS.get(name)
        if sub_cls is not None:
            kwargs[name] = _from_mapping(sub_cls, value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    return _from_mapping(RunConfig, doc, "")


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return convert(cfg)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
