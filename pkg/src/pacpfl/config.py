"""Experiment configuration: YAML in, validated dataclasses out, and back."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from .data import ModeConfig, TaskDistributionConfig, default_polynomial_config
from .fed import DpConfig, RoundConfig

MODES = ("pacpfl", "pacpfl_dp", "vanilla", "pfedgp_mode", "pooled")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


@dataclass
class DataSection:
    source: str = "synthetic"           # "synthetic" or "csv"
    n_clients: int = 24
    m_train: int = 10
    m_test: int = 200
    n_new: int = 24
    m_new: int = 10
    m_personal: int = 0                 # extra personalization samples per existing client
    feature_scaling: str = "client"     # "client" or "range"
    manifest: str | None = None         # csv source only
    task: TaskDistributionConfig = field(default_factory=default_polynomial_config)


@dataclass
class ModelSection:
    input_dim: int = 1
    hidden_layers: int = 2
    hidden_width: int = 8
    feature_dim: int = 2


@dataclass
class HyperPriorSection:
    variance: float = 1.0
    noise_std_mean: float = 0.4


@dataclass
class BoundsSection:
    lam: float = 1.0
    upsilon: float = 1e-4
    delta: float = 0.05
    a: float = 0.0
    b: float = 5.0


@dataclass
class ExperimentConfig:
    mode: str = "pacpfl"
    seed: int = 0
    output_dir: str = "runs"
    oracle: bool = False
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    fed: RoundConfig = field(default_factory=RoundConfig)
    hyper_prior: HyperPriorSection = field(default_factory=HyperPriorSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    dp: DpConfig = field(default_factory=DpConfig)

    def with_seed(self, seed) -> "ExperimentConfig":
        """Copy with the run seed driving both data generation and training."""
        out = copy.deepcopy(self)
        out.seed = int(seed)
        out.fed.seed = int(seed)
        out.data.task.seed = int(seed)
        return out

    def validate(self) -> "ExperimentConfig":
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode: must be one of {', '.join(MODES)}")
        d = self.data
        if d.source not in ("synthetic", "csv"):
            errs.append("data.source: must be 'synthetic' or 'csv'")
        if d.source == "csv" and not d.manifest:
            errs.append("data.manifest: required when data.source is 'csv'")
        if d.source == "synthetic":
            for name in ("n_clients", "m_train", "m_test"):
                if getattr(d, name) < (2 if name != "n_clients" else 1):
                    errs.append(f"data.{name}: too small")
            if d.n_new < 0:
                errs.append("data.n_new: must be >= 0")
            if d.m_personal < 0:
                errs.append("data.m_personal: must be >= 0")
            if d.feature_scaling not in ("range", "client"):
                errs.append("data.feature_scaling: must be 'range' or 'client'")
            if d.n_new > 0 and d.m_new < 2:
                errs.append("data.m_new: need at least 2 samples per new client")
            try:
                d.task.validate()
            except ValueError as err:
                errs.extend(f"data.task.{e}" for e in str(err).split("; "))
        m = self.model
        if m.input_dim < 1 or m.feature_dim < 1 or m.hidden_layers < 0 or m.hidden_width < 1:
            errs.append("model: dimensions must be positive")
        f = self.fed
        n = d.n_clients if d.source == "synthetic" else None
        try:
            f.validate(n)
        except ValueError as err:
            errs.extend(f"fed.{e}" for e in str(err).split("; "))
        if not self.hyper_prior.variance > 0:
            errs.append("hyper_prior.variance: must be positive")
        if not self.hyper_prior.noise_std_mean > 0:
            errs.append("hyper_prior.noise_std_mean: must be positive")
        bd = self.bounds
        if not bd.a < bd.b:
            errs.append("bounds.b: need a < b")
        if not 0 < bd.delta <= 1:
            errs.append("bounds.delta: must lie in (0, 1]")
        if not bd.upsilon > 0:
            errs.append("bounds.upsilon: must be positive")
        if not bd.lam > 0:
            errs.append("bounds.lam: must be positive")
        if self.mode == "pacpfl_dp":
            if not self.dp.epsilon > 0:
                errs.append("dp.epsilon: must be positive")
            if not self.dp.clip_norm > 0:
                errs.append("dp.clip_norm: must be positive")
        if errs:
            raise ConfigError("; ".join(errs))
        return self


# ---------------------------------------------------------------------------
# (de)serialization

_SECTIONS = {
    "model": ModelSection,
    "fed": RoundConfig,
    "hyper_prior": HyperPriorSection,
    "bounds": BoundsSection,
    "dp": DpConfig,
}


def _build(cls, raw, path):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


def _task_from_dict(raw, path="data.task") -> TaskDistributionConfig:
    raw = dict(raw)
    modes = []
    for i, mode in enumerate(raw.pop("modes", []) or []):
        modes.append(_build(ModeConfig, mode, f"{path}.modes[{i}]"))
    cfg = _build(TaskDistributionConfig, raw, path)
    cfg.modes = modes
    cfg.x_range = tuple(float(v) for v in cfg.x_range)
    return cfg


def from_dict(raw) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    kwargs = {k: raw[k] for k in ("mode", "seed", "output_dir", "oracle") if k in raw}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, raw.get(name), name)
    data_raw = dict(raw.get("data") or {})
    task_raw = data_raw.pop("task", None)
    data = _build(DataSection, data_raw, "data")
    if task_raw is not None:
        data.task = _task_from_dict(task_raw)
    kwargs["data"] = data
    return ExperimentConfig(**kwargs)


def to_dict(cfg: ExperimentConfig) -> dict:
    out = asdict(cfg)
    out["data"]["task"]["x_range"] = list(cfg.data.task.x_range)
    return out


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw)


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
