"""Flat ``key = value`` configuration files for :class:`~dsehs.model.ModelConfig`.

See ``docs/config.md`` for the key reference. Lists are comma- or
whitespace-separated; an explicit channel matrix separates rows with ``;``.
Every problem is reported with the offending line number.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from . import model
from .model import ModelConfig, ModelError

REQUIRED = (
    "buffer_capacity", "battery_capacity", "channel.plr", "channel.kernel",
    "arrival.pmf", "harvest.pmf", "tx_energy", "overflow_penalty", "discount",
)
OPTIONAL = ("channel.labels", "channel.allow_nonstrict_plr", "max_support")
_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


class ConfigError(ValueError):
    def __init__(self, message, line=None, source="<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _numbers(text):
    return [x for x in re.split(r"[,\s]+", text.strip()) if x]


def _parse_floats(text, key, line, source):
    try:
        return [float(x) for x in _numbers(text)]
    except ValueError:
        raise ConfigError(f"{key}: expected a list of numbers, got {text!r}", line, source) from None


def _parse_int(text, key, line, source):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}", line, source) from None


def _parse_float(text, key, line, source):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}", line, source) from None


def _check_pmf(values, key, line, source):
    p = np.array(values)
    if p.size == 0:
        raise ConfigError(f"{key}: empty pmf", line, source)
    if np.any(p < 0):
        raise ConfigError(f"{key}: negative probability", line, source)
    if abs(p.sum() - 1.0) > model.PMF_TOL:
        raise ConfigError(f"{key}: probabilities sum to {p.sum():.15g}, not 1", line, source)
    return p


def parse_config(text: str, source: str = "<config>") -> ModelConfig:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in REQUIRED and key not in OPTIONAL:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in entries:
            raise ConfigError(f"duplicate key {key!r} (first set on line {entries[key][1]})", lineno, source)
        if not value:
            raise ConfigError(f"{key}: empty value", lineno, source)
        entries[key] = (value, lineno)

    missing = [k for k in REQUIRED if k not in entries]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}", None, source)

    def get(key):
        return entries[key]

    kw = {}
    for key in ("buffer_capacity", "battery_capacity", "tx_energy"):
        v, ln = get(key)
        kw[key] = _parse_int(v, key, ln, source)
    for key in ("overflow_penalty", "discount"):
        v, ln = get(key)
        kw[key] = _parse_float(v, key, ln, source)

    v, ln = get("channel.plr")
    kw["plr"] = _parse_floats(v, "channel.plr", ln, source)
    n_h = len(kw["plr"])

    v, ln = get("channel.kernel")
    if v.lower() == "birth_death":
        kw["channel_kernel"] = model.birth_death_kernel(max(n_h, 1))
    else:
        rows = [_parse_floats(r, "channel.kernel", ln, source) for r in v.split(";") if r.strip()]
        if len(rows) == 1 and len(rows[0]) == n_h * n_h:
            rows = [rows[0][i * n_h:(i + 1) * n_h] for i in range(n_h)]
        if len(rows) != n_h or any(len(r) != n_h for r in rows):
            raise ConfigError(f"channel.kernel: need a {n_h}x{n_h} row-major matrix "
                              "or 'birth_death'", ln, source)
        P = np.array(rows)
        if np.any(P < 0):
            raise ConfigError("channel.kernel: negative probability", ln, source)
        bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > model.PMF_TOL)
        if bad.size:
            raise ConfigError(f"channel.kernel: row {bad[0]} sums to {P[bad[0]].sum():.15g}, not 1", ln, source)
        kw["channel_kernel"] = P

    for key, field in (("arrival.pmf", "arrival_pmf"), ("harvest.pmf", "harvest_pmf")):
        v, ln = get(key)
        kw[field] = _check_pmf(_parse_floats(v, key, ln, source), key, ln, source)

    if "channel.labels" in entries:
        v, _ = get("channel.labels")
        kw["channel_labels"] = tuple(_numbers(v))
    if "channel.allow_nonstrict_plr" in entries:
        v, ln = get("channel.allow_nonstrict_plr")
        if v.lower() not in _BOOL:
            raise ConfigError(f"channel.allow_nonstrict_plr: expected true/false, got {v!r}", ln, source)
        kw["allow_nonstrict_plr"] = _BOOL[v.lower()]
    if "max_support" in entries:
        v, ln = get("max_support")
        kw["max_support"] = _parse_int(v, "max_support", ln, source)

    field_keys = {"plr": "channel.plr", "channel_kernel": "channel.kernel", "arrival_pmf": "arrival.pmf",
                  "harvest_pmf": "harvest.pmf", "channel_labels": "channel.labels",
                  "allow_nonstrict_plr": "channel.allow_nonstrict_plr"}
    try:
        return ModelConfig(**kw)
    except ModelError as exc:
        # attribute the model-level complaint to the most likely line
        msg = str(exc)
        line = None
        for field, key in list(field_keys.items()) + [(k, k) for k in REQUIRED + OPTIONAL]:
            if msg.startswith(field) and key in entries:
                line = entries[key][1]
                break
        raise ConfigError(msg, line, source) from None


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return parse_config(text, str(path))


def format_config(config: ModelConfig) -> str:
    """Render a config in the file format; ``parse_config`` reads it back."""
    def nums(xs):
        return ", ".join(repr(float(x)) for x in xs)

    lines = [
        f"buffer_capacity = {config.buffer_capacity}",
        f"battery_capacity = {config.battery_capacity}",
        f"channel.plr = {nums(config.plr)}",
        "channel.kernel = " + "; ".join(nums(r) for r in config.channel_kernel),
        f"arrival.pmf = {nums(config.arrival_pmf)}",
        f"harvest.pmf = {nums(config.harvest_pmf)}",
        f"tx_energy = {config.tx_energy}",
        f"overflow_penalty = {config.overflow_penalty!r}",
        f"discount = {config.discount!r}",
        f"max_support = {config.max_support}",
        f"channel.allow_nonstrict_plr = {str(config.allow_nonstrict_plr).lower()}",
    ]
    if config.channel_labels is not None:
        lines.append("channel.labels = " + ", ".join(config.channel_labels))
    return "\n".join(lines) + "\n"
