"""Plain-text ``key = value`` configuration files.

One assignment per line; ``#`` starts a comment; keys are snake_case.
Values stay strings here, typed by the consuming dataclass.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Union

from .errors import ConfigError


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv_file(path: Union[str, Path]) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text())


def write_kv_file(path: Union[str, Path], values: Mapping[str, object]) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_bool(value: str, key: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")
