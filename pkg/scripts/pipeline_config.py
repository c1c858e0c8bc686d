"""Pipeline-wide settings: one section per stage, merged from partial JSON."""

from __future__ import annotations

import logging
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from asset_io import load_json
from latent_codec import CodecConfig
from synthesizer import SynthesisConfig
from texture_stitch import StitchConfig
from tracker import TrackerConfig
from viseme_db import TransitionConfig


LOGGER = logging.getLogger(__name__)


class ConfigError(RuntimeError):
    """Signal that a configuration document has unknown keys or ill-typed values."""


@dataclass
class AssetConfig:
    dictionary: Optional[str] = None


@dataclass
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    stitch: StitchConfig = field(default_factory=StitchConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    transitions: TransitionConfig = field(default_factory=TransitionConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    assets: AssetConfig = field(default_factory=AssetConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {section.name: asdict(getattr(self, section.name)) for section in fields(self)}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any], base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        """Overlay ``payload`` on ``base`` (defaults when omitted)."""
        config = base if base is not None else cls()
        if not isinstance(payload, dict):
            raise ConfigError(f"Configuration must be a JSON object, got {type(payload).__name__}")
        sections = {section.name for section in fields(cls)}
        unknown = sorted(set(payload) - sections)
        if unknown:
            raise ConfigError(f"Unknown configuration section(s): {', '.join(unknown)}")
        updates = {}
        for name, values in payload.items():
            updates[name] = _merge_section(name, getattr(config, name), values)
        return replace(config, **updates)


def _merge_section(name: str, current: Any, values: Any) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"Section {name!r} must be a JSON object")
    hints = typing.get_type_hints(type(current))
    known = {item.name for item in fields(current)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in section {name!r}: {', '.join(unknown)}")
    for key, value in values.items():
        if not _matches(value, hints[key]):
            raise ConfigError(f"{name}.{key} has type {type(value).__name__}, expected {hints[key]}")
    try:
        return replace(current, **values)
    except ValueError as error:
        raise ConfigError(f"Section {name!r}: {error}") from error


def _matches(value: Any, expected: Any) -> bool:
    if typing.get_origin(expected) is typing.Union:
        return any(_matches(value, option) for option in typing.get_args(expected))
    if expected is type(None):
        return value is None
    if isinstance(value, bool):
        return expected is bool
    if expected is float:
        return isinstance(value, (int, float))
    return isinstance(value, expected)


def load_config(path: Optional[Path]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    config = PipelineConfig.from_dict(load_json(path))
    LOGGER.info("Loaded configuration from %s", path)
    return config
