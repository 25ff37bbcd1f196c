"""JSON run configuration shared by all CLI commands.

Unknown keys are rejected with their dotted path. Every stage seed is
derived from ``seeds.master`` through :func:`derive_seed`, so any stage can
be rerun on its own with identical results.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .exceptions import ConfigurationError
from .forge import KBSpec
from .model import ModelConfig, TrainConfig
from .seeding import derive_seed


@dataclass
class ModelSection:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 128
    steps: int = 4000
    batch_size: int = 32
    learning_rate: float = 3e-3
    warmup: int = 100
    min_lr_ratio: float = 0.1


@dataclass
class ForgeSection:
    n_types: int = 4
    entities_per_type: int = 64
    n_relations: int = 8
    n_facts: int = 400
    n_instances: int = 500
    conflict_ratio: float = 0.5
    n_distractors: int = 3
    noise_ratio: float = 0.0
    predictor_instances: int = 600
    open_book_per_fact: int = 2
    reading_variants: int = 30
    update_fraction: float = 0.0


@dataclass
class PredictorSection:
    hidden_dim: int = 64
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-2
    threshold: float = 0.5
    holdout: float = 0.2
    feature_source: str = "fidelity"
    hidden_layer: int = -1
    constant_features: bool = False


@dataclass
class DecodeSection:
    strategy: str = "dcrd"
    alpha: float = 1.0
    lambda_: float = 1.0
    max_new: int = 32
    draft_len: typing.Optional[int] = None
    seed_first_fidelity: bool = False


@dataclass
class EvalSection:
    strategies: typing.List[str] = field(default_factory=lambda: ["greedy", "cad", "adacad", "dcd", "dcrd"])
    sweeps: typing.Dict[str, typing.List[float]] = field(default_factory=lambda: {
        "conflict_ratio": [0.1, 0.5, 0.9],
        "alpha": [0.5, 1.0, 1.5],
        "lambda": [1.0, 2.0, 3.0],
        "noise_ratio": [0.0, 0.3],
    })
    sweep_instances: int = 300
    timing_instances: int = 50


@dataclass
class SeedSection:
    master: int = 0


@dataclass
class PathSection:
    artifacts: str = "artifacts"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    forge: ForgeSection = field(default_factory=ForgeSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    paths: PathSection = field(default_factory=PathSection)

    # JSON spells the decay key "lambda"; the dataclass field is ``lambda_``
    _ALIASES = {"lambda": "lambda_"}

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "")

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        data = dataclasses.asdict(self)
        data["decode"]["lambda"] = data["decode"].pop("lambda_")
        return data

    def hash(self):
        """Digest of everything that affects results; the artifact location does not."""
        data = self.to_dict()
        data.pop("paths", None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def seed(self, label):
        return derive_seed(self.seeds.master, label)

    def kb_spec(self):
        f = self.forge
        return KBSpec(f.n_types, f.entities_per_type, f.n_relations, f.n_facts, self.seed("kb"))

    def model_config(self):
        m = self.model
        return ModelConfig(m.vocab_size, m.d_model, m.n_layers, m.n_heads, m.d_ff, m.max_seq, self.seed("model-init"))

    def train_config(self):
        m = self.model
        return TrainConfig(m.steps, m.batch_size, m.learning_rate, self.seed("model-train"), m.warmup, m.min_lr_ratio)

    def validate(self):
        f, p, d = self.forge, self.predictor, self.decode
        if not 0.0 <= f.conflict_ratio <= 1.0:
            raise ConfigurationError("forge.conflict_ratio must lie in [0, 1]")
        if not 0.0 <= f.update_fraction <= 1.0:
            raise ConfigurationError("forge.update_fraction must lie in [0, 1]")
        if not 0.0 <= f.noise_ratio <= 1.0:
            raise ConfigurationError("forge.noise_ratio must lie in [0, 1]")
        if f.n_instances < 1 or f.predictor_instances < 2:
            raise ConfigurationError("forge.n_instances must be >= 1 and forge.predictor_instances >= 2")
        if not 0.0 < p.holdout < 1.0:
            raise ConfigurationError("predictor.holdout must lie in (0, 1)")
        if p.feature_source not in ("fidelity", "hidden"):
            raise ConfigurationError("predictor.feature_source must be 'fidelity' or 'hidden'")
        if d.alpha < 0 or d.lambda_ < 0:
            raise ConfigurationError("decode.alpha and decode.lambda must be >= 0")
        if self.model.steps < 0:
            raise ConfigurationError("model.steps must be >= 0")
        self.kb_spec().validate()
        self.model_config()
        return self


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or '<root>'}: expected an object")
    aliases = getattr(cls, "_ALIASES", {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = {"lambda": "lambda_"}.get(key, aliases.get(key, key))
        where = f"{path}.{key}" if path else key
        if name not in names:
            raise ConfigurationError(f"unknown config key {where!r}")
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, where)
        else:
            kwargs[name] = _coerce(hint, value, where)
    return cls(**kwargs)


def _coerce(hint, value, where):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        return _coerce(inner, value, where)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list")
        return list(value)
    if origin in (dict, typing.Dict):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected an object")
        return {k: list(v) for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string")
        return value
    return value
