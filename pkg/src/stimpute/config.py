"""Run configuration: model, training, inference and metric options in one JSON."""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .inference import WEIGHTINGS
from .network import CdcinConfig
from .training import TrainConfig


@dataclass
class InferConfig:
    window: int = 64
    window_stride: int = 32
    weighting: str = "uniform"
    batch_size: int = 16

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"infer.weighting must be one of {WEIGHTINGS}")
        if self.window < 1 or self.window_stride < 1 or self.batch_size < 1:
            raise ConfigError("infer.window, infer.window_stride and infer.batch_size must be >= 1")


@dataclass
class MetricConfig:
    exclude_sampled: bool = False


@dataclass
class RunConfig:
    model: CdcinConfig = field(default_factory=CdcinConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "infer": asdict(self.infer),
            "metrics": asdict(self.metrics),
            "paths": dict(self.paths),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"model", "train", "infer", "metrics", "paths", "config_hash"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=CdcinConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            infer=_build(InferConfig, d.get("infer", {}), "infer"),
            metrics=_build(MetricConfig, d.get("metrics", {}), "metrics"),
            paths=dict(d.get("paths", {})),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        d = self.to_dict()
        d["config_hash"] = self.hash()
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
        return path

    def with_delta(self, delta):
        return RunConfig.from_dict(merge(self.to_dict(), delta))


def _build(cls, d, section):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")
    return cls(**d)


def merge(base, delta):
    """Recursive dict merge; ``delta`` may also use dotted keys like ``"model.use_dc"``."""
    out = copy.deepcopy(base)
    for key, value in delta.items():
        if "." in key:
            head, rest = key.split(".", 1)
            out[head] = merge(out.get(head, {}), {rest: value})
        elif isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


ABLATIONS = {
    "no-gni": {"train.gni_cotraining": False},
    "no-dc": {"model.use_dc": False, "model.final_dc_at_inference": False},
    "no-hab": {"model.use_hab": False},
}


def desk_config(epochs=300, **overrides):
    """The desk-scale setup used by the synthetic acceptance task."""
    delta = {
        "model": {"num_cascades": 2, "num_rdhab": 2, "channels": 16, "rdb_growth": 16,
                  "num_heads": 2, "window_size": 8},
        "train": {"epochs": epochs, "checkpoint_every": max(1, epochs)},
    }
    return RunConfig().with_delta(merge(delta, overrides))
