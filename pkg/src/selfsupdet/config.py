"""Flat key=value run configuration shared by every command.

One file drives data generation, training, and evaluation. Lines hold
``key = value`` pairs, ``#`` starts a comment, and blank lines are
skipped. Unknown or repeated keys are rejected with their line number so
typos fail fast instead of silently training with defaults.
"""

from pathlib import Path

from .synth import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration file or override."""


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# Every key a config file may define. Training keys mirror TrainConfig,
# scene keys mirror SceneSpec (scale_range split into min/max, the scene
# seed renamed to avoid clashing with the training seed), and the rest
# control dataset volume, evaluation, and inference.
SCHEMA = {
    "batch_size": int,
    "inpainter_steps": int,
    "detector_steps": int,
    "samples_per_image": int,
    "epsilon": float,
    "lr": float,
    "inpainter_lr": float,
    "seed": int,
    "crop_res": int,
    "grid_size": int,
    "image_size": int,
    "checkpoint_interval": int,
    "snapshot_interval": int,
    "routing_audit_interval": int,
    "width": int,
    "height": int,
    "background": str,
    "camera": str,
    "sprite": str,
    "scale_min": float,
    "scale_max": float,
    "distractor_strength": float,
    "data_seed": int,
    "sequences": int,
    "frames_per_sequence": int,
    "k_draws": int,
    "n_overlays": int,
}

DEFAULTS = {
    "width": 128,
    "height": 128,
    "background": "composite",
    "camera": "static",
    "sprite": "blob",
    "scale_min": 0.15,
    "scale_max": 0.4,
    "distractor_strength": 0.0,
    "data_seed": 0,
    "sequences": 8,
    "frames_per_sequence": 8,
    "k_draws": 16,
    "n_overlays": 8,
}

_TRAIN_KEYS = tuple(TrainConfig.__dataclass_fields__)


def _convert(key: str, value: str, where: str):
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return SCHEMA[key](value)
    except ValueError:
        raise ConfigError(
            f"{where}: invalid value {value!r} for key {key!r} "
            f"(expected {SCHEMA[key].__name__})") from None


def load_config(path) -> dict:
    """Parse a config file into {key: typed value}."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 text ({exc})") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        where = f"{path}:{lineno}"
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _convert(key, value, where)
    return values


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Fold ``key=value`` strings (from CLI flags) over file values."""
    merged = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, value = item.partition("=")
        merged[key.strip()] = _convert(key.strip(), value.strip(),
                                       f"override {item!r}")
    return merged


def effective(values: dict) -> dict:
    """File/override values on top of every default."""
    defaults = TrainConfig()
    merged = {k: getattr(defaults, k) for k in _TRAIN_KEYS}
    merged.update(DEFAULTS)
    merged.update({k: v for k, v in values.items() if v is not None})
    return merged


def train_config(values: dict) -> TrainConfig:
    """Build and validate the training knobs from parsed values."""
    merged = effective(values)
    config = TrainConfig(**{k: merged[k] for k in _TRAIN_KEYS})
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return config


def scene_spec(values: dict) -> SceneSpec:
    """Build and validate the scene recipe from parsed values."""
    merged = effective(values)
    spec = SceneSpec(width=merged["width"], height=merged["height"],
                     background=merged["background"], camera=merged["camera"],
                     sprite=merged["sprite"],
                     scale_range=(merged["scale_min"], merged["scale_max"]),
                     distractor_strength=merged["distractor_strength"],
                     seed=merged["data_seed"])
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec


def format_snapshot(values: dict) -> str:
    """Render the effective configuration as a reloadable key=value file."""
    merged = effective(values)
    lines = [f"{key} = {merged[key]}" for key in sorted(merged)]
    return "\n".join(lines) + "\n"
