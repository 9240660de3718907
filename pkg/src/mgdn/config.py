"""Model configuration shared by every block."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

TASKS = ("mef", "mff", "hdr", "gdsr")
# tasks whose output is display-referred or peak-normalised to [0, 1]
BOUNDED_TASKS = ("mef", "mff", "hdr")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    stages: int = 3
    channels: int = 32
    kernel_size: int = 3
    heads: int = 2
    window: int = 4
    shift: int = 2
    lam: float = 0.1
    arity: int = 2
    in_channels: tuple[int, ...] = (3, 3)
    out_channels: int = 3
    task: str = "mff"
    disable_mgca: bool = False
    disable_dynamic_filter: bool = False
    disable_mask_mi: bool = False
    share_streams: bool = False
    qk_normalize: bool = True
    kernel_softmax: bool = False
    ffn_ratio: int = 2
    squeeze: int = 4
    mask_hidden: int = 8
    hist_bins: int = 32
    hist_sigma: float = 1.5
    mu: float = 5000.0
    # weight bound multiplier for the un-normalised 1x1/3x3 path from the
    # input embedding through PFF merge/out and recombination; sqrt(3) keeps
    # activation variance roughly constant along it
    trunk_gain: float = 1.7320508075688772

    def __post_init__(self):
        self.in_channels = tuple(int(c) for c in self.in_channels)

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.disable_mask_mi else self.lam

    @property
    def reference(self) -> int:
        """Index of the reference stream for 3-input models."""
        return 1

    def errors(self) -> list[str]:
        errs = []
        if self.stages < 1:
            errs.append(f"stages must be >= 1 (got {self.stages})")
        if self.heads < 1 or self.channels % self.heads:
            errs.append(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            errs.append(f"kernel_size must be odd (got {self.kernel_size})")
        if self.arity not in (2, 3):
            errs.append(f"arity must be 2 or 3 (got {self.arity})")
        if len(self.in_channels) != self.arity:
            errs.append(f"in_channels has {len(self.in_channels)} entries for arity {self.arity}")
        if self.task not in TASKS:
            errs.append(f"task must be one of {TASKS} (got {self.task!r})")
        if self.task == "hdr" and self.arity != 3:
            errs.append("task hdr requires arity 3")
        if self.window < 1:
            errs.append(f"window must be >= 1 (got {self.window})")
        if not 0 <= self.shift < max(self.window, 1):
            errs.append(f"shift must lie in [0, window) (got {self.shift})")
        if self.hist_bins < 2:
            errs.append(f"hist_bins must be >= 2 (got {self.hist_bins})")
        if self.hist_sigma <= 0:
            errs.append(f"hist_sigma must be > 0 (got {self.hist_sigma})")
        if self.squeeze < 1 or self.channels // self.squeeze < 1:
            errs.append(f"squeeze {self.squeeze} too large for {self.channels} channels")
        if not self.trunk_gain > 0:
            errs.append(f"trunk_gain must be > 0 (got {self.trunk_gain})")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("invalid ModelConfig: " + "; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_task(cls, task: str, **kw) -> "ModelConfig":
        defaults = {
            "mff": dict(arity=2, in_channels=(3, 3), out_channels=3),
            "mef": dict(arity=2, in_channels=(3, 3), out_channels=3),
            "hdr": dict(arity=3, in_channels=(3, 3, 3), out_channels=3),
            "gdsr": dict(arity=2, in_channels=(1, 3), out_channels=1),
        }
        if task not in defaults:
            raise ConfigError(f"unknown task {task!r}")
        base = dict(defaults[task], task=task)
        base.update(kw)
        return cls(**base)


# ------------------------------------------------------------ key=value text


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, like):
    """Parse ``text`` into the type of the default value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from exc
    return text


def to_text(d: dict) -> str:
    """Canonical key-sorted key=value block."""
    return "".join(f"{k}={format_value(d[k])}\n" for k in sorted(d))


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def model_config_from_text(text: str) -> ModelConfig:
    raw = parse_text(text)
    defaults = ModelConfig()
    unknown = set(raw) - set(defaults.to_dict())
    if unknown:
        raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
    return ModelConfig(**{k: parse_value(v, getattr(defaults, k)) for k, v in raw.items()})
