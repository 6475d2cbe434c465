"""Layered TOML configuration with a frozen resolved copy per run.

A run config has up to six sections: [model] (encoder geometry plus the
contrastive channel count), [decoder], [train], [augment], [probe], and
[segment].  Every key is optional and falls back to the dataclass
default; unknown sections or keys are rejected rather than ignored so a
typo cannot silently run with defaults.  ``write_run_config`` emits the
fully resolved values, and feeding that file back through
``load_run_config`` reproduces the configuration exactly.
"""

import dataclasses
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SyntheticSpec
from .encoder import EncoderConfig
from .evaluate import ProbeConfig
from .events import SegmentationParams
from .imaging import AugmentPolicy
from .mae import DecoderConfig
from .train import TrainConfig, default_batch_size


class ConfigError(ValueError):
    pass


DEFAULT_CHANNELS = 32


@dataclasses.dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    train: TrainConfig
    augment: AugmentPolicy
    probe: ProbeConfig
    segment: SegmentationParams
    channels: int = DEFAULT_CHANNELS


def _coerce(value, default):
    # TOML has no tuples, and bare ints are fine where floats are expected
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, section: str, raw: dict, extra_allowed=()):
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in defaults:
            allowed = sorted(list(defaults) + list(extra_allowed))
            raise ConfigError(f"unknown key '{key}' in [{section}]; allowed keys: {allowed}")
        kwargs[key] = _coerce(value, defaults[key])
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _read_toml(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


_RUN_SECTIONS = ("model", "decoder", "train", "augment", "probe", "segment")


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve a run configuration from an optional file plus overrides.

    ``overrides`` maps section name to {key: value}; None values are
    skipped so optional CLI flags can be passed through untouched.
    Overrides win over the file, the file wins over defaults.  Two
    resolution rules fill gaps between sections: an absent
    [augment].out_size follows the encoder image size, and an absent
    [train].batch_size follows the branch default (16 for the unmasked
    contrastive baseline, 32 otherwise).
    """
    data = _read_toml(path) if path is not None else {}
    unknown = set(data) - set(_RUN_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown section(s) {sorted(unknown)}; expected {sorted(_RUN_SECTIONS)}"
        )
    merged = {name: dict(data.get(name, {})) for name in _RUN_SECTIONS}
    for section, values in (overrides or {}).items():
        if section not in merged:
            raise ConfigError(f"unknown override section '{section}'")
        merged[section].update({k: v for k, v in values.items() if v is not None})

    model_raw = merged["model"]
    channels = model_raw.pop("channels", DEFAULT_CHANNELS)
    if not isinstance(channels, int) or isinstance(channels, bool) or channels < 1:
        raise ConfigError(f"[model] channels must be a positive integer, got {channels!r}")
    encoder = _build(EncoderConfig, "model", model_raw, extra_allowed=("channels",))

    if "out_size" not in merged["augment"]:
        merged["augment"]["out_size"] = list(encoder.image_size)
    if "batch_size" not in merged["train"]:
        branch = merged["train"].get("branch", "joint")
        merged["train"]["batch_size"] = default_batch_size(branch)

    return RunConfig(
        encoder=encoder,
        decoder=_build(DecoderConfig, "decoder", merged["decoder"]),
        train=_build(TrainConfig, "train", merged["train"]),
        augment=_build(AugmentPolicy, "augment", merged["augment"]),
        probe=_build(ProbeConfig, "probe", merged["probe"]),
        segment=_build(SegmentationParams, "segment", merged["segment"]),
        channels=channels,
    )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        # repr round-trips exactly and is valid TOML for finite values
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


def _emit_section(lines: list, name: str, obj, extras: dict | None = None) -> None:
    lines.append(f"[{name}]")
    for f in dataclasses.fields(obj):
        lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    for key, value in (extras or {}).items():
        lines.append(f"{key} = {_fmt(value)}")
    lines.append("")


def write_run_config(cfg: RunConfig, path) -> None:
    """Freeze the fully resolved configuration as TOML."""
    lines: list = []
    _emit_section(lines, "model", cfg.encoder, {"channels": cfg.channels})
    _emit_section(lines, "decoder", cfg.decoder)
    _emit_section(lines, "train", cfg.train)
    _emit_section(lines, "augment", cfg.augment)
    _emit_section(lines, "probe", cfg.probe)
    _emit_section(lines, "segment", cfg.segment)
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def load_segment_params(path, base: SegmentationParams | None = None) -> SegmentationParams:
    """Read a standalone [segment] section, layered over ``base``."""
    data = _read_toml(path)
    unknown = set(data) - {"segment"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}; expected [segment]")
    base = base if base is not None else SegmentationParams()
    raw = dict(data.get("segment", {}))
    allowed = {f.name for f in dataclasses.fields(SegmentationParams)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [segment]; allowed keys: {sorted(allowed)}")
    merged = {f.name: getattr(base, f.name) for f in dataclasses.fields(SegmentationParams)}
    defaults = {f.name: f.default for f in dataclasses.fields(SegmentationParams)}
    merged.update({k: _coerce(v, defaults[k]) for k, v in raw.items()})
    try:
        return SegmentationParams(**merged)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[segment] {exc}") from None


def load_synthetic_spec(path) -> SyntheticSpec:
    """Read a [synthetic] section describing a procedural stream.

    A [run] section (as written by the generate command's frozen copy)
    is tolerated and ignored, so a frozen copy is itself a valid spec.
    """
    data = _read_toml(path)
    unknown = set(data) - {"synthetic", "run"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}; expected [synthetic]")
    return _build(SyntheticSpec, "synthetic", dict(data.get("synthetic", {})))


def write_synthetic_spec(spec: SyntheticSpec, seed: int, path) -> None:
    """Freeze a generator spec plus the seed that rendered it."""
    lines: list = []
    _emit_section(lines, "synthetic", spec)
    lines.extend(["[run]", f"command = {_fmt('generate')}", f"seed = {seed}", ""])
    Path(path).write_text("\n".join(lines), encoding="utf-8")
