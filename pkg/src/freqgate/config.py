"""``key = value`` configuration files."""

from __future__ import annotations


class ConfigError(ValueError):
    pass


def parse_config(text, source="<config>"):
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment.

    Keys are case-sensitive and may use ``-`` or ``_`` interchangeably
    (both are returned with ``_``).  Later lines override earlier ones.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def coerce(value, kind, key="value"):
    """Convert a config string to ``kind`` (bool, int, float or str)."""
    if not isinstance(value, str):
        return kind(value)
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            if "/" in value:
                num, den = value.split("/", 1)
                return float(num) / float(den)
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None
    return value
