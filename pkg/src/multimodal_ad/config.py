"""One declarative run configuration driving every CLI subcommand.

Files may be YAML or JSON. Unknown keys anywhere in the tree are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adversarial import AttackConfig, DefenseConfig
from .anglenet import AngleNetConfig, FinetuneConfig, TrainConfig
from .data.synthetic import SyntheticCorpusConfig
from .ensemble import EnsembleWeights
from .imu import ImuConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    work_dir: str = "runs/default"

    @property
    def root(self) -> Path:
        return Path(self.work_dir)

    @property
    def train_corpus(self) -> Path:
        return self.root / "corpus" / "train"

    @property
    def eval_corpus(self) -> Path:
        return self.root / "corpus" / "eval"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


@dataclass
class DataConfig:
    # normal-only recording for training; the size mirrors the 987 normal IMU timestamps
    train: SyntheticCorpusConfig = field(default_factory=lambda: SyntheticCorpusConfig(
        n_frames=987, anomaly_fraction=0.0, seed=1))
    eval: SyntheticCorpusConfig = field(default_factory=lambda: SyntheticCorpusConfig(
        n_frames=669, anomaly_fraction=0.37, start_time=200.0, seed=2))
    alignment_tolerance: float = 0.05


@dataclass
class PretrainConfig:
    n_pairs: int = 5000
    pair_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=4))


@dataclass
class EnsembleSection:
    weights: EnsembleWeights = field(default_factory=EnsembleWeights)
    threshold: float = 1.0
    lenient: bool = False


@dataclass
class AttackSection:
    attack: AttackConfig = field(default_factory=AttackConfig)
    n_eval_pairs: int = 300
    eval_seed: int = 12345
    uap_images: int = 100
    uap_passes: int = 3
    patch_seed: int = 7


@dataclass
class DefenseSection:
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    n_train_pairs: int = 4000
    train_seed: int = 54321


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    anglenet: AngleNetConfig = field(default_factory=AngleNetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)


def _build(cls, data, where: str, base=None):
    """Build `cls` from a partial mapping; missing keys come from `base` (or the class defaults)."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    base = base if base is not None else cls()
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{where}.{key}" if where else key, getattr(base, key))
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _coerce(hint, value, where: str, base=None):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where, base if dataclasses.is_dataclass(base) else None)
    origin = typing.get_origin(hint)
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        if len(args) == 1:
            return _coerce(args[0], value, where, base)
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def config_to_dict(cfg) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, list):
            return [plain(x) for x in v]
        return v

    return plain(dataclasses.asdict(cfg))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    return config_from_dict(data or {})


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    data = config_to_dict(cfg)
    if path.suffix == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(data, sort_keys=True))
    return path
