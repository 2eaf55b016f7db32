"""Run configuration: packaged defaults, a JSON override file, then
``section.key=value`` overrides from the command line, in that order."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from ..aggregation import AggregationConfig
from ..errors import ConfigurationError
from ..federation import FederationConfig
from ..mdpo import MdpoConfig


def default_config():
    text = resources.files("alignsim").joinpath("assets/default_config.json").read_text()
    return json.loads(text)


def merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigurationError(f"unknown config key '{where}'")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key '{where}' must be an object")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text):
    """``"federation.gamma=0.9"`` -> ``{"federation": {"gamma": 0.9}}``."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigurationError(f"override '{text}' is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=()):
    cfg = default_config()
    if path is not None:
        cfg = merge(cfg, json.loads(Path(path).read_text()))
    for item in overrides:
        cfg = merge(cfg, parse_override(item) if isinstance(item, str) else item)
    return cfg


def federation_config(cfg, **changes):
    f = cfg["federation"]
    params = dict(n_sites=f["N"], quorum=f["M"], gamma=f["gamma"], t_max=f["t_max"],
                  base_score=f["base_score"])
    params.update(changes)
    return FederationConfig(**params)


def mdpo_config(cfg):
    return MdpoConfig.from_dict(cfg["mdpo"])


def aggregation_config(cfg):
    a = cfg["aggregation"]
    return AggregationConfig(a["radius"], a["min_points"], a["supermajority_fraction"],
                             a["encoder_dim"], a["encoder_seed"])
