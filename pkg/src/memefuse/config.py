"""Run configuration: model sizes, training schedule, input flags.

Defaults are desk scale (d=64, 2 layers, 2000 steps); the production sizes
quoted in the literature (d=768, 10k steps, lr 5e-5) remain reachable by
overriding fields.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import WorldConfig
from .errors import InputError

VARIANT_ONE_STREAM = "one-stream"
VARIANT_TWO_STREAM = "two-stream"


@dataclass
class ModelConfig:
    d: int = 64                 # shared hidden size for text and visual rows
    d_o: int = 32               # raw region feature size
    heads: int = 4
    layers: int = 2             # one-stream stack depth
    text_layers: int = 2        # two-stream: text encoder depth
    visual_layers: int = 2      # two-stream: visual encoder depth
    co_layers: int = 1          # two-stream: co-attention depth
    vocab_size: int = 0         # filled in once the vocabulary exists
    n_regions: int = 10         # visual slots per sample (N_v)
    max_ocr_len: int = 32       # N_O
    max_caption_len: int = 24   # N_C
    max_label_len: int = 12     # object-label words
    max_seq_len: int = 96       # hard cap on the joint sequence
    max_positions: int = 64     # position table rows
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    variant: str = VARIANT_ONE_STREAM
    decoder_layers: int = 2
    decoder_max_len: int = 16

    def __post_init__(self):
        if self.variant not in (VARIANT_ONE_STREAM, VARIANT_TWO_STREAM):
            raise InputError(f"unknown variant '{self.variant}'")
        if self.d % self.heads != 0:
            raise InputError(f"d={self.d} must be divisible by heads={self.heads}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    lr_end: float | None = None
    seed: int = 0
    eval_every: int = 250
    # captioner schedule
    xe_epochs: int = 200
    xe_batch_size: int = 16
    xe_lr: float = 1e-4
    xe_lr_end: float = 4e-5
    scst_steps: int = 100
    scst_lr: float = 1e-5
    scst_eval_every: int = 25


@dataclass
class InputFlags:
    """Which inputs the detector sees (the ablation axes plus unimodal cuts)."""

    use_ocr: bool = True
    use_caption: bool = False
    use_object_labels: bool = False
    use_regions: bool = True
    use_augmentation: bool = False
    augment_diversity: int = 2


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    flags: InputFlags = field(default_factory=InputFlags)
    vocab_target_size: int = 400


def _from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InputError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    converted = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name in ("text_len_range",) and isinstance(value, list):
            value = tuple(value)
        converted[f.name] = value
    return cls(**converted)


def run_config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    if "model" in data:
        cfg.model = _from_dict(ModelConfig, data["model"])
    if "train" in data:
        cfg.train = _from_dict(TrainConfig, data["train"])
    if "world" in data:
        cfg.world = _from_dict(WorldConfig, data["world"])
    if "flags" in data:
        cfg.flags = _from_dict(InputFlags, data["flags"])
    if "vocab_target_size" in data:
        cfg.vocab_target_size = data["vocab_target_size"]
    unknown = set(data) - {"model", "train", "world", "flags", "vocab_target_size"}
    if unknown:
        raise InputError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def run_config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["world"]["text_len_range"] = list(out["world"]["text_len_range"])
    return out


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)


def save_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(run_config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
