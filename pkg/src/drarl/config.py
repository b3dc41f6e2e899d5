"""Pipeline configuration: one nested dataclass, JSON on disk.

Every CLI entry point accepts --config pointing at a JSON document whose keys
mirror the dataclass fields below; unknown keys are rejected so typos fail
loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .agent import SacConfig
from .imagine import ImagineConfig, RewardConfig
from .ood import ReasonConfig
from .predictor import PredictorConfig


class ConfigError(Exception):
    pass


@dataclass
class SuiteConfig:
    """How many cases to record and evaluate, and where seeds start.

    Train and test seed ranges are disjoint by construction: training cases
    use [seed0, seed0 + n_train) and held-out cases use
    [seed0 + 1000, seed0 + 1000 + n_test).
    """

    n_train: int = 10
    n_test: int = 50
    seed0: int = 100
    test_offset: int = 1000

    def train_seeds(self) -> range:
        return range(self.seed0, self.seed0 + self.n_train)

    def test_seeds(self) -> range:
        return range(self.seed0 + self.test_offset,
                     self.seed0 + self.test_offset + self.n_test)


@dataclass
class PipelineConfig:
    seed: int = 0
    pretrain_episodes: int = 4000
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    reason: ReasonConfig = field(default_factory=ReasonConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    imagine: ImagineConfig = field(default_factory=ImagineConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)


_NESTED = {
    "predictor": PredictorConfig,
    "reason": ReasonConfig,
    "sac": SacConfig,
    "imagine": ImagineConfig,
    "suite": SuiteConfig,
    "reward": RewardConfig,
    "ego": None,  # EgoTransition built from plain floats below
}


def _build(cls, doc: dict):
    from .sim import EgoTransition

    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        if isinstance(value, dict):
            sub = _NESTED.get(key)
            if key == "ego":
                kwargs[key] = _build(EgoTransition, value)
            elif sub is None:
                raise ConfigError(f"{key!r} does not take a table")
            else:
                kwargs[key] = _build(sub, value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> PipelineConfig:
    if hasattr(path, "read"):
        doc = json.load(path)
    else:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    return _build(PipelineConfig, doc)


def save_config(cfg: PipelineConfig, path) -> None:
    doc = dataclasses.asdict(cfg)
    if hasattr(path, "write"):
        json.dump(doc, path, indent=2)
        return
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
