"""Run configuration: network, training, loss weights and dataset settings."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .dataset import config_hash
from .nets import NetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    count: int = 200
    dim: int = 16
    seed: int = 0
    annotated_frac: float = 0.24
    test_frac: float = 0.2
    hard: bool = False


def _desk_net() -> NetConfig:
    return NetConfig(grid_dim=16, latent_dim=16)


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=_desk_net)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "train": self.train.to_dict(), "data": asdict(self.data)}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def net_hash(self) -> str:
        return config_hash(self.net.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        base = cls().to_dict()
        _merge(base, doc, "")
        try:
            net = NetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in base["net"].items()})
            return cls(net, TrainConfig(**base["train"]), DataConfig(**base["data"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            doc.pop("config_hash", None)
            doc.pop("net_hash", None)
        for ov in overrides or []:
            _apply_override(doc, ov)
        return cls.from_dict(doc)

    def save(self, path, extra: dict | None = None) -> None:
        doc = self.to_dict()
        doc["config_hash"] = self.hash
        doc["net_hash"] = self.net_hash
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _merge(base: dict, new: dict, where: str):
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be an object")
            _merge(base[k], v, where + k + ".")
        else:
            base[k] = v


def _apply_override(doc: dict, text: str):
    """``section.key=value`` with a JSON value (bare strings allowed)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    parts = key.split(".")
    cur = doc
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    cur[parts[-1]] = val


def describe_defaults() -> str:
    """Flattened ``key = default`` lines for help output."""
    lines = []

    def walk(prefix, obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if is_dataclass(v):
                walk(prefix + f.name + ".", v)
            else:
                lines.append(f"{prefix}{f.name} = {json.dumps(v if not isinstance(v, tuple) else list(v))}")

    walk("", RunConfig())
    return "\n".join(lines)
