"""Key-value run configuration: an INI file whose sections mirror the
module configs ([slices], [crop], [vit], [distill], [finetune]), plus
"section.key=value" overrides from the command line."""

from __future__ import annotations

import dataclasses
import typing
from configparser import ConfigParser

from .augment import CropConfig
from .distill import DistillConfig
from .heads import FinetuneConfig
from .slices import SliceConfig
from .vit import ViTConfig

SECTIONS = {
    "slices": SliceConfig,
    "crop": CropConfig,
    "vit": ViTConfig,
    "distill": DistillConfig,
    "finetune": FinetuneConfig,
}


def load_config(path=None, overrides: list[str] = ()) -> dict[str, dict[str, str]]:
    """Read the INI file (if any) and apply overrides on top."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            raw[section] = dict(parser.items(section))
    for item in overrides or ():
        key, _, value = item.partition("=")
        section, _, name = key.strip().partition(".")
        if not (section and name and _):
            raise ValueError(f"override {item!r} must look like section.key=value")
        raw.setdefault(section, {})[name] = value.strip()
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return raw


def _coerce(hint, raw: str):
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_coerce(a, p.strip()) for a, p in zip(args, parts))
    if hint is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def build_section(section: str, raw: dict[str, dict[str, str]], base=None):
    """Instantiate the section's config dataclass, starting from `base`
    (or the dataclass defaults) and applying any raw values."""
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    values = dataclasses.asdict(base) if base is not None else {}
    for name, raw_value in raw.get(section, {}).items():
        if name not in hints:
            raise ValueError(f"[{section}] has no key {name!r}")
        values[name] = _coerce(hints[name], raw_value)
    return cls(**values)
