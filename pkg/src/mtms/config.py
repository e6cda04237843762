"""Flat ``key = value`` config files and named random substreams."""
from __future__ import annotations

import ast
import zlib
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    """Interpret a config value: number, bool, quoted string, list, or bare string."""
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str, source: str = "<string>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            raise ConfigError(f"{source}:{lineno}: sections are not supported, keys must be flat")
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = parse_value(value)
    return out


def load_config(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def format_config(cfg: dict) -> str:
    """Inverse of ``parse_config`` for str, number, bool and list values."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, (int, float, list, tuple)):
            text = repr(list(v) if isinstance(v, tuple) else v)
        elif v is None:
            continue
        else:
            text = repr(str(v))
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named subsystem ("market", "init", ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])
