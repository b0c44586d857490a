"""One JSON document holding every tunable; unknown keys are rejected."""

import dataclasses
import json
from dataclasses import dataclass, field

from ..agent import AgentConfig
from ..mind import MindConfig
from ..rewards import RewardConfig
from ..trainer import BCConfig, ImageryTrainConfig, QATrainConfig, RLConfig, VAETrainConfig
from .checkpoint import config_hash


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_houses: int = 40
    n_rooms: int = 4
    size: int = 15
    episodes_per_house: int = 10
    spawn_ks: tuple = (10, 20, 30)
    split_ratios: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.spawn_ks = tuple(self.spawn_ks)
        self.split_ratios = tuple(self.split_ratios)


@dataclass
class EvalConfig:
    tiers: tuple = (10, 30, 50)
    split: str = "test"
    workers: int = 1
    max_episodes: int = 0  # 0 = all

    def __post_init__(self):
        self.tiers = tuple(self.tiers)
        if not self.tiers or any(t < 1 for t in self.tiers):
            raise ValueError("tiers must be positive action counts")


_SECTIONS = {
    "world": WorldConfig,
    "mind": MindConfig,
    "vae": VAETrainConfig,
    "imagery": ImageryTrainConfig,
    "qa": QATrainConfig,
    "agent": AgentConfig,
    "bc": BCConfig,
    "rl": RLConfig,
    "rewards": RewardConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    mind: MindConfig = field(default_factory=MindConfig)
    vae: VAETrainConfig = field(default_factory=VAETrainConfig)
    imagery: ImageryTrainConfig = field(default_factory=ImageryTrainConfig)
    qa: QATrainConfig = field(default_factory=QATrainConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        if "seed" in d:
            kwargs["seed"] = _seed(d["seed"])
        for name, kind in _SECTIONS.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(kind)}
            bad = set(sub) - known
            if bad:
                raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(bad))}")
            try:
                kwargs[name] = kind(**sub)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name} section: {e}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def to_json(self):
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in dataclasses.asdict(getattr(self, name)).items()}
        return out

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @property
    def fingerprint(self):
        return config_hash(self.to_json())

    def with_seed(self, seed):
        d = self.to_json()
        d["seed"] = seed
        return RunConfig.from_dict(d)


def _seed(v):
    if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {v!r}")
    return v
