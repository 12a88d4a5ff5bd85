"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints


@dataclass(frozen=True)
class TrainConfig:
    # data
    dataset: str = "glyphs"  # glyphs | idx | mnist
    data_path: str = ""
    train_count: int = 2000
    test_count: int = 200
    data_seed: int = 1
    height: int = 16
    width: int = 16
    # protocol
    timesteps: int = 5
    glimpse: int = 6
    n_eval: int = 100
    repeats: int = 10
    # model
    latent_dim: int = 16
    feature_dim: int = 128
    embed_dim: int = 128
    encoder_hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (128, 256)
    flow_multiplier: int = 8
    flow_layers: int = 3
    route_gradients: bool = True
    # optimisation
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    clip_norm: float = 10.0
    probe_epochs: int = 20
    probe_hidden: int = 64

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or f.name in ("dataset", "data_path", "seed", "data_seed"):
                continue
            values = v if isinstance(v, tuple) else (v,)
            if any(x <= 0 for x in values):
                raise ValueError(f"config {f.name} must be positive, got {v}")
        if self.timesteps * self.glimpse**2 > 4 * self.height * self.width:
            raise ValueError("timesteps * glimpse^2 exceeds 4 * scene area")
        if self.glimpse > min(self.height, self.width):
            raise ValueError("glimpse larger than scene")
        if self.dataset not in ("glyphs", "idx", "mnist"):
            raise ValueError(f"unknown dataset {self.dataset!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        hints = get_type_hints(cls)
        kwargs = {}
        for f in fields(cls):
            if f.name in data:
                v = data[f.name]
                kwargs[f.name] = tuple(v) if hints[f.name] == tuple[int, ...] else v
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# reduced-scale MNIST protocol: 14x14 after 2x2 pooling, 4x4 glimpses, 7 steps
MNIST_REDUCED = dict(dataset="mnist", height=14, width=14, glimpse=4, timesteps=7)


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == tuple[int, ...]:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return kind(raw)


def parse_config_text(text: str) -> TrainConfig:
    hints = get_type_hints(TrainConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, hints[key])
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def format_config(config: TrainConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
