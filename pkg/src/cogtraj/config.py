"""Layered run configuration: built-in defaults, user file, profile, flags."""
from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .exceptions import ConfigError

SECTIONS = ("data", "phantom", "folds", "rmsprop", "train", "eval", "network")


def read_yaml(text: str, source: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML ({exc})") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return doc


def default_config() -> dict:
    text = resources.files("cogtraj").joinpath("default_config.yaml").read_text("utf-8")
    return read_yaml(text, "default_config.yaml")


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def profile_names() -> list:
    return sorted(default_config()["profiles"])


def profile_section(name: str, section: str) -> dict:
    profiles = default_config()["profiles"]
    if name not in profiles:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(profiles)}")
    return copy.deepcopy(profiles[name].get(section, {}))


def load_config(path=None, profile: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> dict:
    """Effective configuration tree.

    ``overrides`` uses dotted keys, e.g. ``{"train.seed": 3}``. Profiles
    defined in the user file extend or replace the built-in ones.
    """
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg = deep_merge(cfg, read_yaml(path.read_text("utf-8"), str(path)))
    name = profile or cfg.get("profile", "desk")
    profiles = cfg.pop("profiles", {})
    if name not in profiles:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(profiles)}")
    user_sections = {}
    if path is not None:
        user_doc = read_yaml(Path(path).read_text("utf-8"), str(path))
        user_sections = {k: v for k, v in user_doc.items() if k in SECTIONS}
    # profile values beat built-in defaults but not what the user wrote at top level
    cfg = deep_merge(cfg, profiles[name])
    cfg = deep_merge(cfg, user_sections)
    cfg["profile"] = name
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    unknown = set(cfg) - set(SECTIONS) - {"profile"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)
