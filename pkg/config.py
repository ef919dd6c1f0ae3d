"""Run configuration: defaults < TOML/JSON file < environment (.env) < CLI flags."""
import hashlib
import json
import logging
import os
import pathlib
import tomllib
from dataclasses import asdict, dataclass, field, fields

from dotenv import load_dotenv

from cgp import CgpSettings
from errors import ConfigurationError, ContractViolation
from moo import NsgaConfig
from tnn import TrainParams
from varsim import VariationConfig

logger = logging.getLogger(__name__)

ENV_OVERRIDES = {
    "TNN_SEED": ("seed", int),
    "TNN_JOBS": ("jobs", int),
    "TNN_OUT": ("out", str),
    "TNN_TECH": ("tech", str),
    "TNN_INTERFACE_TABLE": ("interface_table", str),
}
# do not change results, so they stay out of the stage fingerprint
NON_SEMANTIC = ("jobs", "workspace")


@dataclass
class DatasetConfig:
    path: str | None = None
    label_column: str | int = -1
    test_fraction: float = 0.3
    eval_fraction: float = 0.2


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    k: list[int] = field(default_factory=lambda: [1, 2, 4])
    hidden: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 10, 15, 20, 30, 40, 50])
    hidden_tolerance: float = 0.005
    train: TrainParams = field(default_factory=TrainParams)
    cgp: CgpSettings = field(default_factory=CgpSettings)
    ltg_metrics: list[str] = field(default_factory=lambda: ["mde", "wcde"])
    ltg_style: str = "two_tree"
    nsga: NsgaConfig = field(default_factory=NsgaConfig)
    library_mode: str = "pareto"
    variation: VariationConfig = field(default_factory=VariationConfig)
    converter: str = "Flash"
    tech: str | None = None
    interface_table: str | None = None
    out: str = "runs/default"
    workspace: str = "workspaces"
    seed: int = 0
    jobs: int = 1

    def validate(self) -> "RunConfig":
        if not self.k or not set(self.k) <= {1, 2, 3, 4}:
            raise ConfigurationError(f"k must be a non-empty subset of {{1, 2, 3, 4}}, got {self.k}")
        if any(not 1 <= m <= 50 for m in self.hidden):
            raise ConfigurationError(f"hidden sizes must lie in 1..50, got {self.hidden}")
        for label, path in (("dataset", self.dataset.path), ("technology file", self.tech),
                            ("interface table", self.interface_table)):
            if path is not None and not pathlib.Path(path).exists():
                raise ConfigurationError(f"{label} not found: {path}")
        if self.ltg_style not in ("one_tree", "two_tree"):
            raise ConfigurationError(f"unknown LTG style '{self.ltg_style}'")
        if self.library_mode not in ("pareto", "all", "mde", "wcde"):
            raise ConfigurationError(f"unknown library mode '{self.library_mode}'")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        data = {k: v for k, v in self.to_dict().items() if k not in NON_SEMANTIC}
        return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


_SECTIONS = {
    "dataset": DatasetConfig,
    "train": TrainParams,
    "cgp": CgpSettings,
    "nsga": NsgaConfig,
    "variation": VariationConfig,
}


def _section(cls, values: dict, current):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} option(s): {sorted(unknown)}")
    merged = asdict(current)
    merged.update(values)
    try:
        return cls(**merged)
    except (TypeError, ContractViolation) as e:
        raise ConfigurationError(str(e)) from e


def _apply(cfg: RunConfig, values: dict) -> RunConfig:
    top = {f.name for f in fields(RunConfig)}
    for key, value in values.items():
        if key not in top:
            raise ConfigurationError(f"unknown config option '{key}'")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{key}' must be a table")
            setattr(cfg, key, _section(_SECTIONS[key], value, getattr(cfg, key)))
        else:
            setattr(cfg, key, value)
    return cfg


def read_config_file(path: str | pathlib.Path) -> dict:
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with path.open("rb") as f:
                return tomllib.load(f)
        return json.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e


def env_overrides() -> dict:
    load_dotenv()
    values = {}
    for var, (key, cast) in ENV_OVERRIDES.items():
        raw = os.getenv(var)
        if raw:
            try:
                values[key] = cast(raw)
            except ValueError:
                raise ConfigurationError(f"{var}={raw!r} is not a valid {cast.__name__}") from None
    return values


def load_config(path: str | pathlib.Path | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        _apply(cfg, read_config_file(path))
    env = env_overrides()
    if env:
        logger.debug("[Config] environment overrides: %s", sorted(env))
        _apply(cfg, env)
    _apply(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    return cfg.validate()
