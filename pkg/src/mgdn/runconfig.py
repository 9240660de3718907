"""Flat key=value run configuration for the command-line tools."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .config import ConfigError, ModelConfig, format_value, parse_text, parse_value, to_text
from .train import OptimConfig

ABLATIONS = {
    "mgca": "disable_mgca",
    "dynfilter": "disable_dynamic_filter",
    "maskmi": "disable_mask_mi",
}


@dataclass
class RunSettings:
    seed: int = 0
    steps: int = 2000
    data: str = ""
    out: str = "runs"
    checkpoint_every: int = 500
    count: int = 200
    size: int = 64
    motion_px: int = 2
    blur_sigma: float = 2.0
    ev: float = 2.0
    scale: int = 4


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def to_dict(self) -> dict:
        out = {}
        for part in (self.model, self.optim, self.run):
            out.update(dataclasses.asdict(part))
        return out

    def to_text(self) -> str:
        return to_text(self.to_dict())

    @property
    def variant(self) -> str:
        off = [name for name, flag in ABLATIONS.items() if getattr(self.model, flag)]
        return "no-" + "-".join(off) if off else "full"

    def synth_kwargs(self) -> dict:
        r = self.run
        return {"mff": {"blur_sigma": r.blur_sigma}, "mef": {"ev": r.ev},
                "hdr": {"motion_px": r.motion_px}, "gdsr": {"scale": r.scale}}[self.model.task]


def _defaults_for(task: str) -> dict:
    return {**ModelConfig.for_task(task).to_dict(), **dataclasses.asdict(OptimConfig()),
            **dataclasses.asdict(RunSettings())}


def resolve(raw: dict[str, str], overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from text values plus already-typed overrides.

    The task is resolved first because it sets the arity and channel defaults.
    """
    overrides = dict(overrides or {})
    task = overrides.get("task", raw.get("task", "mff"))
    try:
        defaults = _defaults_for(task)
    except ConfigError as exc:
        raise ConfigError(f"task: {exc}") from None
    unknown = sorted((set(raw) | set(overrides)) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = dict(defaults)
    for k, v in raw.items():
        values[k] = parse_value(v, defaults[k])
    values.update(overrides)

    def pick(cls):
        return cls(**{f.name: values[f.name] for f in dataclasses.fields(cls)})

    cfg = RunConfig(pick(ModelConfig), pick(OptimConfig), pick(RunSettings))
    cfg.model.validate()
    if cfg.run.steps < 0 or cfg.run.count < 0:
        raise ConfigError("steps and count must be >= 0")
    if cfg.run.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    return cfg


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_text(fh.read())
    return resolve(raw, overrides)


__all__ = ["ABLATIONS", "RunConfig", "RunSettings", "format_value", "load_run_config", "resolve"]
