"""Experiment configuration schema: parsing, validation, defense registry.

Config files are JSON with a mandatory `schema_version`. Exactly one defense
is selected per experiment; unknown defense names and unknown keys are
rejected at parse time, not mid-run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataio import DESK_SPLIT
from .distill import DistillConfig
from .dpsgd import DpConfig
from .errors import ConfigError
from .nets import GeneratorArch
from .train_cgan import TrainConfig

SCHEMA_VERSION = 1
DEFENSES = ("none", "gauss", "dp_sgd", "dmp", "akd")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    n_train: int = DESK_SPLIT[0]
    n_proxy: int = DESK_SPLIT[1]
    n_test: int = DESK_SPLIT[2]
    height: int = 32
    width: int = 32
    seed: int = 0
    n_samples: int | None = None  # defaults to n_train + n_proxy + n_test
    folder: str | None = None

    def validate(self) -> "DatasetConfig":
        if self.kind not in ("synthetic", "folder"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not self.folder:
            raise ConfigError("dataset kind 'folder' requires a folder path")
        if self.kind == "synthetic":
            total = self.n_train + self.n_proxy + self.n_test
            if self.n_samples is not None and self.n_samples < total:
                raise ConfigError(
                    f"n_samples={self.n_samples} smaller than split total {total}"
                )
            if min(self.n_train, self.n_test) < 1:
                raise ConfigError("synthetic dataset needs n_train >= 1 and n_test >= 1")
        return self


@dataclass
class MetricsConfig:
    fx_seed: int = 0
    feature_dim: int = 64
    n_bins: int = 20
    attack_draws: int = 1

    def validate(self) -> "MetricsConfig":
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.attack_draws < 1:
            raise ConfigError(f"attack_draws must be >= 1, got {self.attack_draws}")
        return self


@dataclass
class DefenseConfig:
    name: str = "none"
    sigma: float | None = None  # gauss
    dp: DpConfig | None = None  # dp_sgd
    distill: DistillConfig | None = None  # akd / dmp

    def validate(self) -> "DefenseConfig":
        if self.name not in DEFENSES:
            raise ConfigError(f"unknown defense {self.name!r}; known: {', '.join(DEFENSES)}")
        if self.name == "gauss":
            if self.sigma is None or self.sigma < 0:
                raise ConfigError("gauss defense needs sigma >= 0")
        if self.name == "dp_sgd":
            if self.dp is None:
                raise ConfigError("dp_sgd defense needs clip_norm/sigma settings")
            self.dp.validate()
        if self.name in ("akd", "dmp"):
            if self.distill is None:
                raise ConfigError(f"{self.name} defense needs distillation settings")
            self.distill.validate()
            if self.distill.mode != self.name:
                raise ConfigError(
                    f"distillation mode {self.distill.mode!r} does not match defense {self.name!r}"
                )
        return self


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: GeneratorArch = field(default_factory=GeneratorArch)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    n_seeds: int = 5
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        self.dataset.validate()
        self.arch.validate()
        if (self.arch.height, self.arch.width) != (self.dataset.height, self.dataset.width):
            raise ConfigError(
                f"arch image size {self.arch.height}x{self.arch.width} does not match "
                f"dataset {self.dataset.height}x{self.dataset.width}"
            )
        self.teacher.validate()
        self.defense.validate()
        self.metrics.validate()
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["defense"] = {k: v for k, v in out["defense"].items() if v is not None}
        if self.defense.distill is not None:
            block = out["defense"].pop("distill")
            block["lambda"] = block.pop("lam")
            out["defense"].update(block)
        if self.defense.dp is not None:
            out["defense"].update(out["defense"].pop("dp"))
        return out


def _take(block: dict, context: str, known: set[str]) -> dict:
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")
    return block


def _parse_defense(block: dict) -> DefenseConfig:
    if "name" not in block:
        raise ConfigError("defense block needs a 'name'")
    name = block["name"]
    if name not in DEFENSES:
        raise ConfigError(f"unknown defense {name!r}; known: {', '.join(DEFENSES)}")
    rest = {k: v for k, v in block.items() if k != "name"}
    if name == "none":
        _take(rest, "defense 'none'", set())
        return DefenseConfig(name="none")
    if name == "gauss":
        _take(rest, "defense 'gauss'", {"sigma"})
        return DefenseConfig(name="gauss", sigma=float(rest.get("sigma", 0.0)))
    if name == "dp_sgd":
        _take(rest, "defense 'dp_sgd'", {"clip_norm", "sigma", "applies_to"})
        return DefenseConfig(name="dp_sgd", dp=DpConfig(**rest))
    _take(
        rest,
        f"defense {name!r}",
        {"epochs", "lambda", "lr", "seed", "batch_size", "beta1", "beta2", "adversarial_form", "log_every"},
    )
    if "lambda" in rest:
        rest["lam"] = rest.pop("lambda")
    return DefenseConfig(name=name, distill=DistillConfig(mode=name, **rest))


def parse_config(raw: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a JSON-shaped dict."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if "schema_version" not in raw:
        raise ConfigError("config is missing the mandatory schema_version field")
    known = {"schema_version", "dataset", "arch", "teacher", "defense", "metrics", "n_seeds"}
    _take(raw, "config root", known)

    def sub(key, cls, extra=None):
        block = raw.get(key, {})
        if not isinstance(block, dict):
            raise ConfigError(f"{key} block must be an object")
        block = dict(block)
        if extra:
            for k, v in extra.items():
                block.setdefault(k, v)
        valid = {f.name for f in cls.__dataclass_fields__.values()}
        _take(block, f"{key} block", valid)
        return cls(**block)

    dataset = sub("dataset", DatasetConfig)
    cfg = ExperimentConfig(
        schema_version=raw["schema_version"],
        dataset=dataset,
        arch=sub("arch", GeneratorArch, extra={"height": dataset.height, "width": dataset.width}),
        teacher=sub("teacher", TrainConfig),
        defense=_parse_defense(raw.get("defense", {"name": "none"})),
        metrics=sub("metrics", MetricsConfig),
        n_seeds=int(raw.get("n_seeds", 5)),
    )
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    return parse_config(raw)
