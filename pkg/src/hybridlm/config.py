"""Model configuration and its flat ``key = value`` text format.

One assignment per line, ``#`` starts a comment, unknown keys are
rejected. The same keys are accepted by the CLI's ``--set`` overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .sparse_attn import AttnConfig

_INT_KEYS = ("n_layers", "d_model", "d_k", "d_v", "vocab_size", "seed",
             "chunk_size", "top_k", "window")
_KEYS = _INT_KEYS + ("attn_ratio", "budget", "precision")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    d_k: int = 64
    d_v: int = 64
    vocab_size: int = 258  # 256 byte tokens + BOS + EOS
    attn_ratio: float = 0.25
    attn: AttnConfig = field(default_factory=AttnConfig)
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_k", "d_v", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.attn_ratio <= 1.0:
            raise ConfigError("attn_ratio must lie in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double'")
        if self.attn.d_k != self.d_k or self.attn.d_v != self.d_v:
            raise ConfigError("attention dims must match model d_k/d_v")


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}") from None
    if key == "attn_ratio":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"attn_ratio expects a number, got {raw!r}") from None
    if key == "budget":
        if raw.lower() in ("inf", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"budget expects an integer or 'inf', got {raw!r}") from None
    if key == "precision":
        return raw
    raise ConfigError(f"unknown config key {key!r}")


def _build(values: dict) -> ModelConfig:
    attn_kwargs = {}
    model_kwargs = {}
    for key, val in values.items():
        if key in ("chunk_size", "top_k", "budget", "window"):
            attn_kwargs[key] = val
        else:
            model_kwargs[key] = val
    d_k = model_kwargs.get("d_k", ModelConfig.d_k)
    d_v = model_kwargs.get("d_v", ModelConfig.d_v)
    attn = AttnConfig(d_k=d_k, d_v=d_v, **attn_kwargs)
    return ModelConfig(attn=attn, **model_kwargs)


def parse_config(text: str) -> ModelConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return _build(values)


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: ModelConfig) -> str:
    budget = "inf" if cfg.attn.budget is None else cfg.attn.budget
    lines = [
        f"n_layers = {cfg.n_layers}",
        f"d_model = {cfg.d_model}",
        f"d_k = {cfg.d_k}",
        f"d_v = {cfg.d_v}",
        f"vocab_size = {cfg.vocab_size}",
        f"attn_ratio = {cfg.attn_ratio}",
        f"chunk_size = {cfg.attn.chunk_size}",
        f"top_k = {cfg.attn.top_k}",
        f"budget = {budget}",
        f"window = {cfg.attn.window}",
        f"seed = {cfg.seed}",
        f"precision = {cfg.precision}",
    ]
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ModelConfig, pairs: list[str]) -> ModelConfig:
    """Apply CLI ``key=value`` overrides on top of an existing config."""
    attn_updates = {}
    model_updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        val = _parse_value(key, raw)
        if key in ("chunk_size", "top_k", "budget", "window"):
            attn_updates[key] = val
        else:
            model_updates[key] = val
    d_k = model_updates.get("d_k", cfg.d_k)
    d_v = model_updates.get("d_v", cfg.d_v)
    attn = replace(cfg.attn, d_k=d_k, d_v=d_v, **attn_updates)
    return replace(cfg, attn=attn, **model_updates)
