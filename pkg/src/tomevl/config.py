"""Run configuration: nested dataclass sections loaded from JSON plus overrides.

A config document looks like ``{"connector": {"r": 16}, "train": {"seed": 3}}``.
Missing keys take defaults; unknown sections or keys raise ``ConfigKeyError``.
Overrides use dotted paths, e.g. ``connector.r=16`` or ``temporal.blocks=[1]``;
values are parsed as JSON when possible, otherwise kept as strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .captioner import DecoderConfig, PretrainConfig, TrainConfig
from .connector import TomeFormerConfig
from .temporal import EncoderConfig, TemporalConfig


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


def tiny_connector() -> TomeFormerConfig:
    """Desk-scale connector used by default for training runs."""
    return TomeFormerConfig(num_layers=2, model_dim=64, num_heads=4, r=16, max_tokens=256, video_r_multiplier=8.0)


def tiny_train() -> TrainConfig:
    return TrainConfig(max_lr=3e-3, min_lr=1e-4, start_lr=1e-5, warmup_steps=100, total_steps=3000, mirror=True)


@dataclass
class DataConfig:
    num_frames: int = 4  # frames per clip when the corpus holds video
    pretrain_images: int = 512
    pretrain_captions: int = 4000
    seed: int = 50_000  # stand-in pre-training data is drawn from seeds disjoint from the corpus


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    connector: TomeFormerConfig = field(default_factory=tiny_connector)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=tiny_train)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0  # model initialization

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {g.name: getattr(v, g.name) for g in fields(v)} if hasattr(v, "__dataclass_fields__") else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        if not isinstance(doc, dict):
            raise ConfigKeyError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key, value in doc.items():
            if key not in known:
                raise ConfigKeyError(f"unknown config section {key!r}")
            current = getattr(cfg, key)
            if not hasattr(current, "__dataclass_fields__"):
                setattr(cfg, key, value)
                continue
            if not isinstance(value, dict):
                raise ConfigKeyError(f"section {key!r} must be an object")
            allowed = {f.name for f in fields(current)}
            bad = sorted(set(value) - allowed)
            if bad:
                raise ConfigKeyError(f"unknown key(s) in {key!r}: {', '.join(bad)}")
            setattr(cfg, key, replace(current, **value))
        return cfg

    def with_overrides(self, overrides) -> "RunConfig":
        doc = self.to_dict()
        for item in overrides or []:
            path, sep, raw = item.partition("=")
            if not sep:
                raise ConfigKeyError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = path.split(".")
            node = doc
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigKeyError(f"unknown config path {path!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigKeyError(f"unknown config path {path!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(doc)


def load_config(path=None, overrides=None) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    return RunConfig.from_dict(doc).with_overrides(overrides)
