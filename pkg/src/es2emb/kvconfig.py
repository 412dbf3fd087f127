"""Tiny ``key = value`` config file parser shared by schema and pipeline configs."""

from __future__ import annotations

from pathlib import Path


class KVError(ValueError):
    pass


def parse_kv_text(text: str, source: str = "<string>") -> list[tuple[str, str, int]]:
    """Parse ``key = value`` lines; returns (key, value, line_number) in file order.

    Blank lines and ``#`` comments are skipped. Duplicate keys are an error.
    """
    pairs: list[tuple[str, str, int]] = []
    seen: set[str] = set()
    for line_num, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KVError(f"{source}: line {line_num}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise KVError(f"{source}: line {line_num}: empty key")
        if key in seen:
            raise KVError(f"{source}: line {line_num}: duplicate key {key!r}")
        seen.add(key)
        pairs.append((key, value, line_num))
    return pairs


def parse_kv_file(path: Path | str) -> list[tuple[str, str, int]]:
    path = Path(path)
    return parse_kv_text(path.read_text(encoding="utf-8"), source=str(path))
