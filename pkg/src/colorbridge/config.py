"""Line-oriented experiment configuration.

Config files are plain text: one ``section.key = value`` per line, ``#``
comments, blank lines ignored.  Every key is validated against a schema;
unknown keys and malformed values fail with the offending key named.
``explain_lines`` renders the fully resolved configuration (defaults,
file values, and command-line overrides merged) for ``--explain``.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import desk_encoder_config, full_scale_encoder_config
from .colorizers import ColorizerKind, desk_config, full_scale_config
from .datasets import REFERENCE_DOMAINS, UncertainPolicy
from .training import AugmentConfig, SgdConfig, StrategyConfig, TrainConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config_text",
    "read_config",
    "resolve_config",
    "explain_lines",
]

_N_OUTPUTS = 4


class ConfigError(ValueError):
    """A config line, key, or value is invalid."""


def _as_int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _as_float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _as_str(key, raw):
    return raw


def _as_choice(options):
    def parse(key, raw):
        if raw not in options:
            raise ConfigError(f"{key}: expected one of {sorted(options)}, got {raw!r}")
        return raw

    return parse


def _as_policies(key, raw):
    parts = tuple(p.strip() for p in raw.split(","))
    if len(parts) != _N_OUTPUTS:
        raise ConfigError(f"{key}: expected {_N_OUTPUTS} comma-separated policies, got {raw!r}")
    valid = {p.value for p in UncertainPolicy}
    for p in parts:
        if p not in valid:
            raise ConfigError(f"{key}: unknown policy {p!r}, expected one of {sorted(valid)}")
    return parts


def _as_path(key, raw):
    return raw if raw != "" else None


_COLORIZER_NAMES = {k.value for k in ColorizerKind}

# key -> (parser, default). Defaults are the resolved values used when a
# key is absent from both the file and the command line.
_SCHEMA = {
    "data.domain": (_as_choice(set(REFERENCE_DOMAINS)), "target_a"),
    "data.train_fraction": (_as_float, 1.0),
    "data.policy": (_as_policies, ("u-zeros",) * _N_OUTPUTS),
    "model.colorizer": (_as_choice(_COLORIZER_NAMES), "coloru"),
    "model.scale": (_as_choice({"desk", "full"}), "desk"),
    "train.steps": (_as_int, 400),
    "train.batch_size": (_as_int, 32),
    "train.max_lr": (_as_float, 0.05),
    "train.checkpoint_every": (_as_int, 200),
    "train.momentum": (_as_float, 0.9),
    "train.weight_decay": (_as_float, 1e-4),
    "train.pct_start": (_as_float, 0.3),
    "train.div": (_as_float, 25.0),
    "train.final_div": (_as_float, 1e4),
    "train.seed": (_as_int, 0),
    "augment.rotation_deg": (_as_float, 10.0),
    "augment.zoom_max": (_as_float, 0.10),
    "augment.apply_prob": (_as_float, 0.75),
    "paths.out": (_as_str, "runs/experiment"),
    "paths.encoder_checkpoint": (_as_path, None),
    "paths.colorizer_checkpoint": (_as_path, None),
    "paths.transfer_checkpoint": (_as_path, None),
}


def parse_config_text(text):
    """Parse config text into a raw {key: string} mapping (schema-checked keys)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _SCHEMA:
            hint = difflib.get_close_matches(key, _SCHEMA, n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"line {lineno}: unknown key {key!r}{suffix}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
    return values


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment settings plus their provenance."""

    domain: str
    train_fraction: float
    policies: tuple
    colorizer: str
    scale: str
    steps: int
    batch_size: int
    max_lr: float
    checkpoint_every: int
    momentum: float
    weight_decay: float
    pct_start: float
    div: float
    final_div: float
    seed: int
    rotation_deg: float
    zoom_max: float
    apply_prob: float
    out: str
    encoder_checkpoint: str
    colorizer_checkpoint: str
    transfer_checkpoint: str
    provenance: dict = field(default_factory=dict, compare=False)

    def encoder_config(self):
        return desk_encoder_config() if self.scale == "desk" else full_scale_encoder_config()

    def colorizer_config(self):
        return desk_config() if self.scale == "desk" else full_scale_config()

    def train_config(self, image_size):
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            checkpoint_every=self.checkpoint_every,
            max_lr=self.max_lr,
            sgd=SgdConfig(momentum=self.momentum, weight_decay=self.weight_decay),
            pct_start=self.pct_start,
            div=self.div,
            final_div=self.final_div,
            augment=AugmentConfig(
                target=image_size,
                rotation_deg=self.rotation_deg,
                zoom_max=self.zoom_max,
                apply_prob=self.apply_prob,
            ),
            seed=self.seed,
        )

    def strategy_config(self, strategy, **checkpoints):
        return StrategyConfig(
            strategy=strategy,
            colorizer=ColorizerKind(self.colorizer),
            colorizer_config=self.colorizer_config(),
            encoder_config=self.encoder_config(),
            n_outputs=_N_OUTPUTS,
            encoder_checkpoint=checkpoints.get("encoder", self.encoder_checkpoint),
            colorizer_checkpoint=checkpoints.get("colorizer", self.colorizer_checkpoint),
            transfer_checkpoint=checkpoints.get("transfer", self.transfer_checkpoint),
        )


_FIELD_BY_KEY = {
    "data.domain": "domain",
    "data.train_fraction": "train_fraction",
    "data.policy": "policies",
    "model.colorizer": "colorizer",
    "model.scale": "scale",
    "train.steps": "steps",
    "train.batch_size": "batch_size",
    "train.max_lr": "max_lr",
    "train.checkpoint_every": "checkpoint_every",
    "train.momentum": "momentum",
    "train.weight_decay": "weight_decay",
    "train.pct_start": "pct_start",
    "train.div": "div",
    "train.final_div": "final_div",
    "train.seed": "seed",
    "augment.rotation_deg": "rotation_deg",
    "augment.zoom_max": "zoom_max",
    "augment.apply_prob": "apply_prob",
    "paths.out": "out",
    "paths.encoder_checkpoint": "encoder_checkpoint",
    "paths.colorizer_checkpoint": "colorizer_checkpoint",
    "paths.transfer_checkpoint": "transfer_checkpoint",
}


def resolve_config(file_values=None, overrides=None):
    """Merge defaults <- file <- overrides into an ExperimentConfig.

    ``file_values`` is the raw string mapping from parse_config_text;
    ``overrides`` maps schema keys to already-typed values (CLI flags).
    """
    file_values = file_values or {}
    overrides = overrides or {}
    for key in overrides:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown override key {key!r}")
    fields = {}
    provenance = {}
    for key, (parser, default) in _SCHEMA.items():
        if key in overrides and overrides[key] is not None:
            value = overrides[key]
            source = "override"
        elif key in file_values:
            value = parser(key, file_values[key])
            source = "config"
        else:
            value = default
            source = "default"
        fields[_FIELD_BY_KEY[key]] = value
        provenance[key] = source
    cfg = ExperimentConfig(provenance=provenance, **fields)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not 0.0 < cfg.train_fraction <= 1.0:
        raise ConfigError(f"data.train_fraction: must be in (0, 1], got {cfg.train_fraction}")
    if cfg.steps < 1:
        raise ConfigError(f"train.steps: must be >= 1, got {cfg.steps}")
    if cfg.batch_size < 1:
        raise ConfigError(f"train.batch_size: must be >= 1, got {cfg.batch_size}")
    if cfg.checkpoint_every < 1:
        raise ConfigError(f"train.checkpoint_every: must be >= 1, got {cfg.checkpoint_every}")
    if cfg.max_lr <= 0:
        raise ConfigError(f"train.max_lr: must be positive, got {cfg.max_lr}")
    if not 0.0 < cfg.pct_start < 1.0:
        raise ConfigError(f"train.pct_start: must be in (0, 1), got {cfg.pct_start}")
    if cfg.div <= 1.0 or cfg.final_div <= 1.0:
        raise ConfigError("train.div and train.final_div must exceed 1")
    if not 0.0 <= cfg.momentum < 1.0:
        raise ConfigError(f"train.momentum: must be in [0, 1), got {cfg.momentum}")
    if cfg.weight_decay < 0:
        raise ConfigError(f"train.weight_decay: must be >= 0, got {cfg.weight_decay}")
    if cfg.seed < 0:
        raise ConfigError(f"train.seed: must be >= 0, got {cfg.seed}")
    if cfg.rotation_deg < 0 or cfg.zoom_max < 0:
        raise ConfigError("augment.rotation_deg and augment.zoom_max must be >= 0")
    if not 0.0 <= cfg.apply_prob <= 1.0:
        raise ConfigError(f"augment.apply_prob: must be in [0, 1], got {cfg.apply_prob}")


def read_config(path, overrides=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return resolve_config(parse_config_text(path.read_text()), overrides)


def _render(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def explain_lines(cfg):
    """Resolved ``key = value  # source`` lines, one per schema key."""
    lines = []
    for key in sorted(_SCHEMA):
        value = getattr(cfg, _FIELD_BY_KEY[key])
        lines.append(f"{key} = {_render(value)}  # {cfg.provenance[key]}")
    return lines
