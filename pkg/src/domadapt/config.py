"""Run configuration: one JSON file, sectioned, with dotted-key overrides.

Precedence is command line (``--set section.key=value``) over file over
defaults. Unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adaptation import TrainConfig
from .data import SyntheticConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    """Input matrices; all four paths empty means "use the synthetic generator"."""

    source_matrix: str | None = None
    source_labels: str | None = None
    target_matrix: str | None = None
    target_labels: str | None = None
    # None: log2(x+1) for user files, off for synthetic data (which has negative values)
    log_transform: bool | None = None
    split_fractions: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0


@dataclass
class SweepSection:
    kind: str = "full"  # full | target | source
    methods: list[str] = field(
        default_factory=lambda: [
            "target_only",
            "no_adaptation",
            "combat",
            "limma",
            "dann_unsup",
            "dann_sup",
            "wass_unsup",
            "wass_sup",
        ]
    )
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    master_seed: int = 0
    grid: list[float] | None = None  # None: the experiment's default grid
    grid_preset: str = "default"  # source sweep only: default | extended
    fixed_p: float = 0.01
    jobs: int = 1
    diagnostics: bool = True
    record_seconds: bool = False


@dataclass
class RunSection:
    """Single-model training (the ``train`` command)."""

    method: str = "dann_sup"
    target_fraction: float = 1.0


SECTIONS = {
    "train": TrainConfig,
    "synthetic": SyntheticConfig,
    "data": DataSection,
    "sweep": SweepSection,
    "run": RunSection,
}


def _section_keys(cls) -> list[str]:
    names = [f.name for f in fields(cls)]
    return ["lambda" if n == "lambda_" else n for n in names]


def _section_to_dict(obj) -> dict:
    return obj.to_dict() if isinstance(obj, TrainConfig) else asdict(obj)


def _section_from_dict(cls, d: dict):
    if cls is TrainConfig:
        return TrainConfig.from_dict(d)
    return cls(**d)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    data: DataSection = field(default_factory=DataSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return {name: _section_to_dict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object of sections")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}; valid: {', '.join(SECTIONS)}")
        kwargs = {}
        for name, sec_cls in SECTIONS.items():
            raw = d.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be an object")
            bad = sorted(set(raw) - set(_section_keys(sec_cls)))
            if bad:
                raise ConfigError(f"unknown config key(s): {', '.join(f'{name}.{k}' for k in bad)}")
            merged = {**_section_to_dict(sec_cls()), **raw}
            try:
                kwargs[name] = _section_from_dict(sec_cls, merged)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} section: {exc}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.sweep.kind not in ("full", "target", "source"):
            raise ConfigError(f"sweep.kind must be full, target or source, got {self.sweep.kind!r}")
        if self.sweep.jobs < 1:
            raise ConfigError("sweep.jobs must be >= 1")
        if not 0 < self.run.target_fraction <= 1:
            raise ConfigError("run.target_fraction must lie in (0, 1]")
        paths = [self.data.source_matrix, self.data.source_labels, self.data.target_matrix, self.data.target_labels]
        if any(paths) and not all(paths):
            raise ConfigError("data: give all four of source_matrix, source_labels, target_matrix, target_labels")

    @property
    def uses_synthetic(self) -> bool:
        return not self.data.source_matrix

    def with_overrides(self, assignments) -> RunConfig:
        d = copy.deepcopy(self.to_dict())
        for item in assignments:
            key, value = parse_assignment(item)
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"override key must look like section.key, got {key!r}")
            if name not in _section_keys(SECTIONS[section]):
                raise ConfigError(f"unknown config key: {key}")
            d[section][name] = value
        return RunConfig.from_dict(d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path


def parse_assignment(item: str) -> tuple[str, object]:
    """``key=value`` with the value read as JSON when possible, else as a string."""
    if "=" not in item:
        raise ConfigError(f"override must be key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then overrides.

    A sweep manifest is accepted as a config: its embedded ``run_config``
    object is used.
    """
    d: dict = {}
    if path is not None:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if isinstance(d, dict) and "run_config" in d:
            d = d["run_config"]
    return RunConfig.from_dict(d).with_overrides(overrides)


def describe_defaults() -> list[tuple[str, object]]:
    """Every config key with its default, as (dotted key, value)."""
    d = RunConfig().to_dict()
    return [(f"{s}.{k}", v) for s in SECTIONS for k, v in d[s].items()]
