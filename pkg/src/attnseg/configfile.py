"""UTF-8 `key = value` config files shared by the CLI and config dataclasses."""

from __future__ import annotations

from pathlib import Path


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse one `key = value` per line; '#' starts a comment, blanks ignored."""
    result: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        result[key.strip()] = value.strip()
    return result
