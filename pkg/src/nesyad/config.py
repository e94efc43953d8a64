"""Pipeline configuration: an INI file with one section per stage."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "generator"  # or a CSV path
    tags: str = ""
    channels: int = 6
    stream_length: int = 40_000
    window: int = 64
    stride: int = 16
    sinusoids: int = 3
    noise: float = 0.02
    anomaly_rate: float = 0.05
    train_fraction: float = 0.75
    seed: int = 7


@dataclass
class DdpmSection:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.06
    hidden: int = 256
    time_dim: int = 32
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float = 1e-5
    levels: str = "auto"
    aggregation: str = "mean-z"
    percentile: float = 95.0
    chain: bool = False
    seed: int = 0


@dataclass
class NesySection:
    kb: str = ""
    lam: float = 0.0
    cutoff: float = 0.5
    quantifier: str = "mean"


@dataclass
class RffSection:
    D: int = 256
    sigma: str = "median"
    ridge: float = 1e-3
    metric: str = "whiten"
    whiten_floor: float = 1.0
    max_iter: int = 100
    class_weight: bool = True
    features: str = "raw"
    seed: int = 0


@dataclass
class BenchSection:
    iterations: int = 10_000
    warmup: int = 1_000


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    ddpm: DdpmSection = field(default_factory=DdpmSection)
    nesy: NesySection = field(default_factory=NesySection)
    rff: RffSection = field(default_factory=RffSection)
    bench: BenchSection = field(default_factory=BenchSection)
    base_dir: Path = Path(".")

    SECTIONS = ("data", "ddpm", "nesy", "rff", "bench")
    # INI spelling of fields whose Python names differ
    ALIASES = {("nesy", "lambda"): "lam"}

    def with_seed(self, seed: int) -> "PipelineConfig":
        cfg = dataclasses.replace(self)
        cfg.data = dataclasses.replace(self.data, seed=seed)
        cfg.ddpm = dataclasses.replace(self.ddpm, seed=seed)
        cfg.rff = dataclasses.replace(self.rff, seed=seed)
        return cfg

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def kb_path(self) -> Path | None:
        return self.resolve(self.nesy.kb) if self.nesy.kb else None

    def validate(self) -> None:
        d, m, n, r = self.data, self.ddpm, self.nesy, self.rff
        checks = [
            (d.channels >= 1, "data.channels must be >= 1"),
            (d.window >= 2, "data.window must be >= 2"),
            (d.stride >= 1, "data.stride must be >= 1"),
            (0.0 <= d.anomaly_rate <= 0.5, "data.anomaly_rate must lie in [0, 0.5]"),
            (d.noise >= 0.0, "data.noise must be >= 0"),
            (0.0 < d.train_fraction <= 1.0, "data.train_fraction must lie in (0, 1]"),
            (m.T >= 2, "ddpm.T must be >= 2"),
            (0.0 < m.beta_start <= m.beta_end < 1.0, "ddpm betas must satisfy 0 < start <= end < 1"),
            (m.epochs >= 0 and m.batch_size >= 1, "ddpm.epochs/batch_size out of range"),
            (0.0 < m.percentile <= 100.0, "ddpm.percentile must lie in (0, 100]"),
            (m.aggregation in ("mean-z", "max-z"), "ddpm.aggregation must be mean-z or max-z"),
            (n.lam >= 0.0, "nesy.lambda must be >= 0"),
            (0.0 < n.cutoff <= 1.0, "nesy.cutoff must lie in (0, 1]"),
            (n.quantifier in ("mean", "min"), "nesy.quantifier must be mean or min"),
            (r.D >= 1, "rff.D must be >= 1"),
            (r.ridge >= 0.0, "rff.ridge must be >= 0"),
            (r.features in ("raw", "profile"), "rff.features must be raw or profile"),
            (r.metric in ("whiten", "isotropic"), "rff.metric must be whiten or isotropic"),
            (r.whiten_floor > 0.0, "rff.whiten_floor must be > 0"),
            (m.lr > 0 and m.lr_final >= 0, "ddpm.lr must be > 0 and lr_final >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if r.sigma != "median":
            try:
                if float(r.sigma) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("rff.sigma must be 'median' or a positive number") from None
        if d.source != "generator" and not self.resolve(d.source).exists():
            raise ConfigError(f"data source {d.source!r} does not exist")
        if d.tags and not self.resolve(d.tags).exists():
            raise ConfigError(f"tag file {d.tags!r} does not exist")
        if n.kb and not self.resolve(n.kb).exists():
            raise ConfigError(f"knowledge base {n.kb!r} does not exist")
        if n.lam > 0 and not n.kb:
            raise ConfigError("nesy.lambda > 0 requires nesy.kb")
        self.levels()

    def levels(self) -> list[int]:
        from .ddpm import default_levels
        if self.ddpm.levels.strip() == "auto":
            return default_levels(self.ddpm.T)
        try:
            levels = [int(v) for v in self.ddpm.levels.split(",")]
        except ValueError:
            raise ConfigError(f"ddpm.levels must be 'auto' or integers, got {self.ddpm.levels!r}") from None
        if len(levels) < 2 or len(set(levels)) != len(levels) or not all(1 <= t <= self.ddpm.T for t in levels):
            raise ConfigError("ddpm.levels must hold at least two distinct steps in [1, T]")
        return levels

    def to_ini(self) -> str:
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                value = getattr(getattr(self, name), f.name)
                if isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f"{_ini_key(name, f.name, self.ALIASES)} = {value}")
            lines.append("")
        return "\n".join(lines)


def _ini_key(section: str, field_name: str, aliases: dict) -> str:
    for (sec, key), target in aliases.items():
        if sec == section and target == field_name:
            return key
    return field_name


def _coerce(raw: str, kind, where: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None


def load_config(path: str | Path | None = None, text: str | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
        cfg.base_dir = path.parent
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in PipelineConfig.SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        for key, raw in parser.items(section):
            name = PipelineConfig.ALIASES.get((section, key), key)
            if name not in types:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(obj, name, _coerce(raw, types[name], f"[{section}] {key}"))
    return cfg
