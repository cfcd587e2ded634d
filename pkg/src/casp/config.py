"""Pipeline configuration: defaults, flat ``key = value`` files and flag overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .cascade import DEFAULT_THETA, MIN_PRIORS, Mode
from .refine import DEFAULT_WINDOW
from .supervision import DEFAULT_LAMBDAS

VARIANTS = ("full", "lite")
PAD_POLICIES = ("zero", "edge")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "full"
    k: int = 8
    theta: float = DEFAULT_THETA
    n16_blocks: int = 2
    n8_blocks: int = 2
    w: int = DEFAULT_WINDOW
    lambdas: tuple[float, float, float, float] = DEFAULT_LAMBDAS
    mode: str = Mode.INFERENCE.value
    pad: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.k < MIN_PRIORS:
            raise ConfigError(f"k must be >= {MIN_PRIORS} (a 1/16 token covers up to 4 tokens at 1/8), got {self.k}")
        if not 0.0 <= self.theta:
            raise ConfigError(f"theta must be non-negative, got {self.theta}")
        if self.n16_blocks < 0 or self.n8_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if self.w < 3 or self.w % 2 == 0:
            raise ConfigError(f"window w must be odd and >= 3, got {self.w}")
        if len(self.lambdas) != 4 or any(v < 0 for v in self.lambdas):
            raise ConfigError(f"lambdas must be four non-negative weights, got {self.lambdas}")
        if self.mode not in {m.value for m in Mode}:
            raise ConfigError(f"mode must be 'inference' or 'train-math', got {self.mode!r}")
        if self.pad not in PAD_POLICIES:
            raise ConfigError(f"pad must be one of {PAD_POLICIES}, got {self.pad!r}")

    @property
    def mode_enum(self) -> Mode:
        return Mode(self.mode)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """Apply ``overrides`` (values already typed or raw strings); ``None`` values are skipped."""
        clean = {k: _coerce(k, v) for k, v in overrides.items() if v is not None}
        return replace(self, **clean)


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, value):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return tuple(float(v) for v in value) if key == "lambdas" else value
    try:
        if key in ("k", "n16_blocks", "n8_blocks", "w", "seed"):
            return int(value)
        if key == "theta":
            return float(value)
        if key == "lambdas":
            parts = value.replace(",", " ").split()
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (usually command-line flags)."""
    cfg = PipelineConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
