"""Experiment configuration: an INI file with a fixed set of sections and keys.

Sections (unknown sections or keys are rejected)::

    [experiment]  seed, output, threads, calibrate_noise
    [dataset]     kind = synthetic | directory, components, count, width,
                  height, channels, contrast, texture, path, prior,
                  fit_iterations, export (write clamped 8-bit copies
                  to <output>/dataset)
    [watermark]   k, beta (number or "auto" = 0.02*sqrt(N)), mode, key_seed
    [diffusion]   schedule = linear | cosine, steps
    [metrics]     psnr, ssim, mi
    [sweep]       strengths, sampler, substeps, guided, eta (number or
                  "auto"), window_fraction, calibration
    [attack.<name>]  kind plus kind-specific parameters (see attacks.DEFAULTS);
                  sections are applied in file order

Every ``[attack.*]`` section becomes one AttackConfig; its seed defaults to
the experiment seed.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field, replace

from ..attacks import DEFAULTS, AttackConfig, parse_param


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    components: int = 4
    count: int = 100
    width: int = 64
    height: int = 64
    channels: int = 1
    contrast: float = 0.1
    texture: float = 0.1
    path: str = ""
    prior: str = ""
    fit_iterations: int = 50
    export: bool = False

    @property
    def n(self) -> int:
        return self.width * self.height * self.channels


@dataclass(frozen=True)
class WatermarkConfig:
    k: int = 32
    beta: float | None = None
    mode: str = "informed"
    key_seed: int = 1

    def resolved_beta(self, n: int) -> float:
        return self.beta if self.beta is not None else 0.02 * math.sqrt(n)


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: str = "linear"
    steps: int = 1000


@dataclass(frozen=True)
class MetricsConfig:
    psnr: bool = True
    ssim: bool = True
    mi: bool = True


@dataclass(frozen=True)
class SweepConfig:
    strengths: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0)
    sampler: str = "ddim"
    substeps: int = 50
    guided: bool = True
    eta: float | None = None
    window_fraction: float = 0.2
    calibration: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output: str = "out"
    threads: int = 1
    calibrate_noise: bool = False
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    attacks: tuple[AttackConfig, ...] = ()

    def validate(self, require_attacks: bool = True) -> "ExperimentConfig":
        d = self.dataset
        if d.kind not in ("synthetic", "directory"):
            raise ConfigError(f"dataset.kind must be synthetic or directory, got {d.kind!r}")
        if d.kind == "synthetic":
            if d.count < 1:
                raise ConfigError("dataset.count must be >= 1")
            if d.components < 1:
                raise ConfigError("dataset.components must be >= 1")
            if min(d.width, d.height) < 1 or d.channels not in (1, 3):
                raise ConfigError("dataset dimensions invalid")
        else:
            if not d.path or not os.path.isdir(d.path):
                raise ConfigError(f"dataset.path {d.path!r} is not a directory")
        if d.prior and not os.path.isfile(d.prior):
            raise ConfigError(f"dataset.prior {d.prior!r} does not exist")
        if self.watermark.k < 1:
            raise ConfigError("watermark.k must be >= 1")
        if self.watermark.mode not in ("plain", "informed"):
            raise ConfigError(f"watermark.mode must be plain or informed, got {self.watermark.mode!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if require_attacks and not self.attacks:
            raise ConfigError("at least one [attack.*] section is required")
        if any(not 0.0 <= s <= 1.0 for s in self.sweep.strengths):
            raise ConfigError("sweep strengths must lie in [0, 1]")
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate attack names: {names}")
        return self

    def with_overrides(self, seed=None, output=None, threads=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            # attacks that inherited the experiment seed follow the override
            cfg = replace(cfg, seed=seed, attacks=tuple(
                AttackConfig(a.kind, a.params, seed if a.seed == self.seed else a.seed, a.name)
                for a in cfg.attacks
            ))
        if output is not None:
            cfg = replace(cfg, output=output)
        if threads is not None:
            cfg = replace(cfg, threads=threads)
        return cfg


_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _coerce(section: str, key: str, text: str, proto):
    text = text.strip()
    try:
        if isinstance(proto, bool):
            if text.lower() not in _BOOL:
                raise ValueError(text)
            return _BOOL[text.lower()]
        if isinstance(proto, int):
            return int(text, 0)
        if isinstance(proto, float) or proto is None:
            if text.lower() == "auto":
                return None
            return float(text)
        if isinstance(proto, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None


def _section(parser, name: str, proto):
    if not parser.has_section(name):
        return proto
    values = {}
    allowed = proto.__dataclass_fields__
    for key, text in parser.items(name):
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        values[key] = _coerce(name, key, text, getattr(proto, key))
    return replace(proto, **values)


_TOP = {"seed", "output", "threads", "calibrate_noise"}
_SECTIONS = {"experiment", "dataset", "watermark", "diffusion", "metrics", "sweep"}


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None

    for name in parser.sections():
        if name not in _SECTIONS and not name.startswith("attack."):
            raise ConfigError(f"unknown section [{name}]")

    cfg = ExperimentConfig()
    if parser.has_section("experiment"):
        top = {}
        for key, text in parser.items("experiment"):
            if key not in _TOP:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
            top[key] = _coerce("experiment", key, text, getattr(cfg, key))
        cfg = replace(cfg, **top)

    dataset = _section(parser, "dataset", DatasetConfig())
    for attr in ("path", "prior"):
        val = getattr(dataset, attr)
        if val and not os.path.isabs(val):
            dataset = replace(dataset, **{attr: os.path.join(base_dir, val)})

    attacks = []
    for name in parser.sections():
        if not name.startswith("attack."):
            continue
        items = dict(parser.items(name))
        kind = items.pop("kind", None)
        if kind is None:
            raise ConfigError(f"[{name}] is missing 'kind'")
        if kind not in DEFAULTS:
            raise ConfigError(f"[{name}] unknown attack kind {kind!r}")
        seed = int(items.pop("seed", cfg.seed))
        try:
            params = {k: parse_param(kind, k, v) for k, v in items.items()}
            attacks.append(AttackConfig(kind, params, seed, name[len("attack."):]))
        except ValueError as exc:
            raise ConfigError(f"[{name}] {exc}") from None

    return replace(
        cfg,
        dataset=dataset,
        watermark=_section(parser, "watermark", WatermarkConfig()),
        diffusion=_section(parser, "diffusion", DiffusionConfig()),
        metrics=_section(parser, "metrics", MetricsConfig()),
        sweep=_section(parser, "sweep", SweepConfig()),
        attacks=tuple(attacks),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)))
