"""Experiment configuration: nested dataclasses stored as one JSON document."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .exceptions import DomainError
from .rl import RlConfig
from .tasks import TaskSpec
from .training import METHOD_FIELDS, PretrainConfig, SFTConfig


@dataclass
class ModelConfig:
    width: int = 32
    n_heads: int = 2
    n_layers: int = 2
    context_length: int = 64
    mlp_ratio: int = 4


@dataclass
class BaseConfig:
    """How the frozen base policy is produced.

    The base depends only on ``seed`` here (not on the run seed), so every
    run of a sweep shares one pre-trained base.
    """

    seed: int = 0
    families: tuple[str, ...] = ("mod-addition", "digit-sort", "parenthesis-balance")
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        self.families = tuple(self.families)
        if isinstance(self.pretrain, dict):
            self.pretrain = PretrainConfig(**self.pretrain)


@dataclass
class EvalConfig:
    temperature: float = 0.6
    n_samples: int = 16
    ks: tuple[int, ...] = (1, 2, 4, 8)
    topk: tuple[int, ...] = (1, 5, 10, 50, 100)
    kl_direction: str = "forward"
    split: str = "validation"

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        self.topk = tuple(int(k) for k in self.topk)
        if max(self.ks) > self.n_samples:
            raise DomainError("every pass@k k must be <= n_samples")
        if self.kl_direction not in ("forward", "reverse"):
            raise DomainError("kl_direction must be 'forward' or 'reverse'")


@dataclass
class ExperimentConfig:
    seed: int
    task: TaskSpec = field(default_factory=lambda: TaskSpec("mod-addition", 10, 2, 4, "with-scratchpad"))
    sizes: tuple[int, int, int] = (2000, 2000, 200)
    data_seed: int = 0
    sft_splits: tuple[str, ...] = ("sft",)
    model: ModelConfig = field(default_factory=ModelConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_checkpoint: str | None = None
    out: str = "runs/default"

    def __post_init__(self):
        if self.seed is None:
            raise DomainError("seed is mandatory")
        self.sizes = tuple(int(s) for s in self.sizes)
        self.sft_splits = tuple(self.sft_splits)
        if not set(self.sft_splits) <= {"sft", "rl"} or not self.sft_splits:
            raise DomainError("sft_splits must be a nonempty subset of ('sft', 'rl')")

    # -- serialisation ---------------------------------------------------------------

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["task"] = self.task.to_dict()
        d["model"] = asdict(self.model)
        d["base"] = asdict(self.base)
        d["sft"] = self.sft.to_dict()
        d["rl"] = self.rl.to_dict()
        d["eval"] = asdict(self.eval)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise DomainError("seed is mandatory")
        nested = {
            "task": TaskSpec, "model": ModelConfig, "base": BaseConfig,
            "rl": RlConfig, "eval": EvalConfig,
        }
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if "sft" in d and isinstance(d["sft"], dict):
            d["sft"] = SFTConfig.from_dict(d["sft"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def config_hash(self) -> str:
        """Hash of every setting that can influence results (the output path is excluded)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key=value`` strings with dotted keys; values are parsed as JSON when possible.

    Switching ``sft.method`` drops hyperparameters that belong to other methods.
    """
    d = config.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise DomainError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        node = d
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise DomainError(f"unknown config section {key!r}")
            node = node[part]
        leaf = path[-1]
        if leaf not in node and not (path[0] == "sft" and leaf in SFTConfig.__dataclass_fields__):
            raise DomainError(f"unknown config key {key!r}")
        node[leaf] = _parse_value(raw)
    sft = d.get("sft", {})
    method = sft.get("method")
    for m, fields in METHOD_FIELDS.items():
        if m != method:
            for f in fields:
                sft.pop(f, None)
    return ExperimentConfig.from_dict(d)
