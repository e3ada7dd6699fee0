"""Run configuration: generator, model and training settings resolved into one document."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import GeneratorSpec
from .errors import ConfigError
from .metrics import MetricWeights
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "CECS_SEED"

ABLATIONS = {
    "none": {"use_cei": True, "use_ces": True},
    "no-cei": {"use_cei": False, "use_ces": True},
    "no-ces": {"use_cei": True, "use_ces": False},
    "both": {"use_cei": False, "use_ces": False},
}

# model fields a run config may set; vocabularies and k come from the generator
MODEL_KEYS = ("d_dim", "use_cei", "use_ces", "glimpse", "context_pool")

# Benchmark defaults layered over the class defaults.  Fewer users than the
# 2,000-user desk scale so per-user preferences are learnable from 200k
# impressions; a shared 20-element catalog so elements recur across shops.
BENCH_GENERATOR = {"num_users": 250, "catalog_size": 20, "user_affinity": 0.75, "base_logit": -1.0}
BENCH_TRAIN = {"lr": 0.01, "epochs": 15, "weight_decay": 0.003, "uncertainty": "off"}


@dataclass(frozen=True)
class ModelSettings:
    d_dim: int = 16
    use_cei: bool = True
    use_ces: bool = True
    glimpse: str = "hard"
    context_pool: bool = False


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorSpec = field(default_factory=lambda: GeneratorSpec(**BENCH_GENERATOR))
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**BENCH_TRAIN))
    weights: tuple[float, ...] | None = None
    seed: int = 0

    def model_config(self, arch: str = "cecs", ablate: str | None = None) -> ModelConfig:
        g = self.generator
        m = self.model
        flags = {"use_cei": m.use_cei, "use_ces": m.use_ces}
        if ablate is not None:
            if ablate not in ABLATIONS:
                raise ConfigError(f"ablate must be one of {sorted(ABLATIONS)}, got {ablate!r}")
            flags = ABLATIONS[ablate]
        return ModelConfig(
            vocab_sizes=(g.vocab_size,) * g.k,
            num_users=g.num_users,
            num_shops=g.num_shops,
            d_dim=m.d_dim,
            max_candidates=g.slate_size,
            glimpse=m.glimpse,
            context_pool=m.context_pool,
            arch=arch,
            **flags,
        )

    def metric_weights(self) -> MetricWeights:
        return MetricWeights.default(self.generator.k) if self.weights is None else MetricWeights(self.weights)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "generator": self.generator.to_dict(),
            "model": {f.name: getattr(self.model, f.name) for f in fields(ModelSettings)},
            "train": self.train.to_dict(),
            "weights": None if self.weights is None else list(self.weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        extra = set(d) - {"seed", "generator", "model", "train", "weights"}
        if extra:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(extra))}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed: expected an integer, got {seed!r}")
        for part in ("generator", "model", "train"):
            if not isinstance(d.get(part, {}), dict):
                raise ConfigError(f"{part}: expected a JSON object")
        model = d.get("model", {})
        bad = set(model) - set(MODEL_KEYS)
        if bad:
            raise ConfigError(f"unknown model field(s): {', '.join(sorted(bad))}")
        weights = d.get("weights")
        if weights is not None:
            MetricWeights(tuple(weights))
            weights = tuple(float(x) for x in weights)
        gen = {**BENCH_GENERATOR, "seed": seed, **d.get("generator", {})}
        tr = {**BENCH_TRAIN, "seed": seed, **d.get("train", {})}
        try:
            settings = ModelSettings(**model)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        return cls(GeneratorSpec.from_dict(gen), settings, TrainConfig.from_dict(tr), weights, seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """Set the run seed everywhere it is used."""
        return replace(self, seed=seed, generator=replace(self.generator, seed=seed),
                       train=replace(self.train, seed=seed))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return RunConfig.from_dict(doc)


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
