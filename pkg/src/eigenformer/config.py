"""Run configuration and the input feature schema shared by model and trainer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

__all__ = [
    "TASKS",
    "TrainConfig",
    "FeatureSchema",
    "ConfigError",
    "PRESETS",
    "load_config",
    "fnv1a64",
    "config_digest",
]

TASKS = (
    "graph-regression",
    "graph-classification",
    "multilabel-classification",
    "node-classification",
)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class TrainConfig:
    task: str = "graph-regression"
    layers: int = 3
    heads: int = 8
    hidden_dim: int = 64
    phi_hidden_dim: int = 64
    dropout: float = 0.0
    attention_dropout: float = 0.1
    pooling: str = "sum"
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 100
    warmup_epochs: int = 5
    weight_decay: float = 1e-5
    seed: int = 0
    head_mode: str = "shared"
    edge_dim: int | None = None
    grad_clip: float | None = None

    def validate(self) -> list[str]:
        """Every problem with this config, not just the first."""
        problems = []
        if self.task not in TASKS:
            problems.append(f"task must be one of {', '.join(TASKS)}; got {self.task!r}")
        for name in ("layers", "heads", "hidden_dim", "phi_hidden_dim", "batch_size", "max_epochs"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                problems.append(f"{name} must be a positive integer; got {v!r}")
        if isinstance(self.hidden_dim, int) and isinstance(self.heads, int) and self.heads > 0:
            if self.hidden_dim % self.heads:
                problems.append(
                    f"hidden_dim ({self.hidden_dim}) must be divisible by heads ({self.heads})"
                )
        if not isinstance(self.warmup_epochs, int) or self.warmup_epochs < 0:
            problems.append(f"warmup_epochs must be a nonnegative integer; got {self.warmup_epochs!r}")
        elif isinstance(self.max_epochs, int) and self.warmup_epochs > self.max_epochs:
            problems.append("warmup_epochs cannot exceed max_epochs")
        for name in ("dropout", "attention_dropout"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0.0 <= v < 1.0:
                problems.append(f"{name} must lie in [0, 1); got {v!r}")
        if not isinstance(self.lr, (int, float)) or self.lr <= 0:
            problems.append(f"lr must be positive; got {self.lr!r}")
        if not isinstance(self.weight_decay, (int, float)) or self.weight_decay < 0:
            problems.append(f"weight_decay must be nonnegative; got {self.weight_decay!r}")
        if self.pooling not in ("sum", "mean"):
            problems.append(f"pooling must be 'sum' or 'mean'; got {self.pooling!r}")
        if self.head_mode not in ("shared", "per-head"):
            problems.append(f"head_mode must be 'shared' or 'per-head'; got {self.head_mode!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            problems.append(f"seed must be a nonnegative integer; got {self.seed!r}")
        if self.edge_dim is not None and (not isinstance(self.edge_dim, int) or self.edge_dim < 1):
            problems.append(f"edge_dim must be a positive integer or null; got {self.edge_dim!r}")
        if self.grad_clip is not None and (
            not isinstance(self.grad_clip, (int, float)) or self.grad_clip <= 0
        ):
            problems.append(f"grad_clip must be positive or null; got {self.grad_clip!r}")
        return problems

    def check(self) -> "TrainConfig":
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config field {k!r}" for k in unknown])
        return cls(**data)


def load_config(path: str | Path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: expected a JSON object"])
    return TrainConfig.from_dict(data)


@dataclass(frozen=True)
class FeatureSchema:
    """Input/output widths the model is built against.

    ``node_kind``/``edge_kind`` are ``"categorical"`` (size = vocabulary) or
    ``"dense"`` (size = vector width). ``edge_kind`` is ``None`` when the
    dataset carries no edge features.
    """

    node_kind: str
    node_size: int
    edge_kind: str | None
    edge_size: int
    num_outputs: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSchema":
        return cls(**data)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def config_digest(config: TrainConfig, schema: FeatureSchema) -> int:
    payload = json.dumps(
        {"config": config.to_dict(), "schema": schema.to_dict()}, sort_keys=True
    ).encode()
    return fnv1a64(payload)


def _preset(**kw) -> TrainConfig:
    return TrainConfig(**kw)


# Best configurations reported for the public benchmarks.
PRESETS: dict[str, TrainConfig] = {
    "zinc": _preset(
        task="graph-regression", layers=12, heads=8, hidden_dim=96, phi_hidden_dim=96,
        dropout=0.0, attention_dropout=0.1, pooling="sum", batch_size=128, lr=0.001,
        max_epochs=300, warmup_epochs=50, weight_decay=1e-5, edge_dim=128,
    ),
    "mnist": _preset(
        task="graph-classification", layers=3, heads=8, hidden_dim=96, phi_hidden_dim=96,
        dropout=0.0, attention_dropout=0.1, pooling="mean", batch_size=512, lr=0.001,
        max_epochs=100, warmup_epochs=5, weight_decay=1e-5,
    ),
    "pattern": _preset(
        task="node-classification", layers=10, heads=8, hidden_dim=128, phi_hidden_dim=128,
        dropout=0.0, attention_dropout=0.1, batch_size=128, lr=0.0005,
        max_epochs=100, warmup_epochs=5, weight_decay=1e-5,
    ),
    "cluster": _preset(
        task="node-classification", layers=20, heads=8, hidden_dim=88, phi_hidden_dim=88,
        dropout=0.0, attention_dropout=0.1, batch_size=128, lr=0.0005,
        max_epochs=100, warmup_epochs=5, weight_decay=1e-5,
    ),
    "peptides-func": _preset(
        task="multilabel-classification", layers=10, heads=8, hidden_dim=104,
        phi_hidden_dim=104, dropout=0.0, attention_dropout=0.1, pooling="mean",
        batch_size=16, lr=0.0003, max_epochs=100, warmup_epochs=5, weight_decay=1e-5,
    ),
    "peptides-struct": _preset(
        task="graph-regression", layers=10, heads=8, hidden_dim=104, phi_hidden_dim=104,
        dropout=0.0, attention_dropout=0.0, pooling="mean", batch_size=14, lr=0.0002,
        max_epochs=60, warmup_epochs=5, weight_decay=1e-5,
    ),
}
