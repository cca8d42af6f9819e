"""Run configuration: one JSON document, overridable key by key."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .dataset import N_CONDITIONS, SUBSETS, subset_paths
from .errors import ConfigError
from .graph import MEASURES
from .model import ModelConfig
from .normalization import MODES
from .training import TrainConfig


@dataclass
class RunConfig:
    subset: str = "FD001"
    data_dir: str = "data/CMAPSSData"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    rul_path: Optional[str] = None
    # keep only units with id <= max_units in both splits
    max_units: Optional[int] = None
    normalization: str = "unified"
    # None picks the sub-dataset's number of operating conditions
    n_clusters: Optional[int] = None
    graph_threshold: float = 0.5
    graph_measure: str = "pearson"
    window: int = 50
    stride: int = 1
    r_max: int = 125
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    jobs: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.subset not in SUBSETS:
            raise ConfigError(f"sub-dataset must be one of {SUBSETS}, got {self.subset!r}")
        if self.normalization not in MODES:
            raise ConfigError(f"normalization must be one of {MODES}")
        if self.graph_measure not in MEASURES:
            raise ConfigError(f"graph_measure must be one of {MEASURES}")
        if not 0.0 <= self.graph_threshold <= 1.0:
            raise ConfigError("graph_threshold must lie in [0, 1]")
        if self.window < 1 or self.stride < 1 or self.r_max < 0:
            raise ConfigError("window and stride must be >= 1, r_max >= 0")
        if self.n_clusters is not None and self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        # the window length and the base seed live here; nested copies follow
        self.model = replace(self.model, window=self.window)
        self.train = replace(self.train, seed=self.seed)

    @property
    def k(self) -> int:
        if self.normalization == "unified":
            return 1
        return N_CONDITIONS[self.subset] if self.n_clusters is None else self.n_clusters

    @property
    def paths(self) -> tuple[Path, Path, Path]:
        default = subset_paths(self.data_dir, self.subset)
        given = (self.train_path, self.test_path, self.rul_path)
        return tuple(Path(g) if g else d for g, d in zip(given, default))

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(d.pop("model", {}))
            train = TrainConfig.from_dict(d.pop("train", {}))
            return cls(model=model, train=train, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "RunConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        return cls.from_dict(apply_overrides(d, overrides or {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def apply_overrides(d: dict, overrides: dict) -> dict:
    """Set dotted keys (``"train.epochs"``) on a nested config dict."""
    d = json.loads(json.dumps(d))
    for key, value in overrides.items():
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return d


def flag_names() -> list[str]:
    """Every overridable key, mirroring the config layout one-to-one."""
    names = []
    for f in fields(RunConfig):
        if f.name == "model":
            names += [f"model.{g.name}" for g in fields(ModelConfig) if g.name not in ("window", "seed")]
        elif f.name == "train":
            names += [f"train.{g.name}" for g in fields(TrainConfig) if g.name != "seed"]
        else:
            names.append(f.name)
    return names


def parse_value(text: str):
    """JSON literal when it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
