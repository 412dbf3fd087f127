"""Text renderings of user histories.

The pipe format is the canonical lossless rendering: line 1 is the field names
joined by ``|``, then one line per event with cells joined by ``", "``. Cells
that contain the separator (descriptions like "Grocery Stores, Supermarkets")
or start with a double quote are wrapped in CSV-style double quotes with inner
quotes doubled. The display variants (json/markdown/html/yaml/plain) are
deterministic templates that carry every field value of every event; values
containing a format's own escape characters (quotes/backslashes in JSON,
&, < or > in HTML, | in Markdown) survive only in escaped form there.
"""

from __future__ import annotations

import csv
import html
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping
from urllib.parse import quote

import yaml

from .core import (
    CodeDictionary,
    EventRecord,
    FieldKind,
    FieldSchema,
    SchemaConfig,
    UserSequence,
    map_code,
)

PIPE_FORMAT = "pipe"
VARIANT_FORMATS = ("json", "markdown", "html", "yaml", "plain")
ALL_FORMATS = (PIPE_FORMAT,) + VARIANT_FORMATS

CELL_SEP = ", "


class FormatError(ValueError):
    """Raised when text does not conform to the pipe document format."""


@dataclass(frozen=True)
class SerializedDoc:
    user_id: str
    format: str
    text: str

    @property
    def char_count(self) -> int:
        return len(self.text)


def render_value(
    value: int | str, field_schema: FieldSchema, dictionaries: Mapping[str, CodeDictionary]
) -> str:
    """Human-readable cell text: timestamps/numerics verbatim, codes mapped."""
    if field_schema.kind is FieldKind.CATEGORICAL:
        dictionary = dictionaries[field_schema.dictionary_ref or ""]
        return map_code(str(value), dictionary)
    return str(value)


def _quote_cell(cell: str) -> str:
    if CELL_SEP in cell or cell.startswith('"'):
        return '"' + cell.replace('"', '""') + '"'
    return cell


def _split_cells(line: str, line_num: int) -> list[str]:
    cells: list[str] = []
    i = 0
    n = len(line)
    while True:
        if i < n and line[i] == '"':
            i += 1
            buf: list[str] = []
            while True:
                if i >= n:
                    raise FormatError(f"line {line_num}: unterminated quoted cell")
                ch = line[i]
                if ch == '"':
                    if i + 1 < n and line[i + 1] == '"':
                        buf.append('"')
                        i += 2
                        continue
                    i += 1
                    break
                buf.append(ch)
                i += 1
            cells.append("".join(buf))
            if i == n:
                return cells
            if line[i : i + 2] != CELL_SEP:
                raise FormatError(f"line {line_num}: expected {CELL_SEP!r} after quoted cell")
            i += 2
        else:
            j = line.find(CELL_SEP, i)
            if j == -1:
                cells.append(line[i:])
                return cells
            cells.append(line[i:j])
            i = j + 2


def serialize_pipe(
    sequence: UserSequence,
    schema: SchemaConfig,
    dictionaries: Mapping[str, CodeDictionary] | None = None,
) -> SerializedDoc:
    """Render one user's history in the pipe format (header + one line per event)."""
    dicts = schema.dictionaries if dictionaries is None else dictionaries
    lines = ["|".join(f.name for f in schema.fields)]
    for event in sequence.events:
        cells = [
            _quote_cell(render_value(v, f, dicts))
            for f, v in zip(schema.fields, event.values)
        ]
        lines.append(CELL_SEP.join(cells))
    return SerializedDoc(sequence.user_id, PIPE_FORMAT, "\n".join(lines))


def _unrender_value(
    cell: str,
    field_schema: FieldSchema,
    reverse_maps: Mapping[str, Mapping[str, list[str]]],
    line_num: int,
) -> int | str:
    from .core import UNKNOWN_PREFIX, canonical_decimal

    if field_schema.kind is FieldKind.TIMESTAMP:
        try:
            ts = int(cell)
        except ValueError:
            raise FormatError(f"line {line_num}: bad timestamp cell {cell!r}") from None
        if ts < 0:
            raise FormatError(f"line {line_num}: negative timestamp {cell!r}")
        return ts
    if field_schema.kind is FieldKind.NUMERIC:
        try:
            return canonical_decimal(cell)
        except ValueError:
            raise FormatError(f"line {line_num}: bad numeric cell {cell!r}") from None
    if field_schema.kind is FieldKind.CATEGORICAL:
        if cell.startswith(UNKNOWN_PREFIX) and cell.endswith(")"):
            return cell[len(UNKNOWN_PREFIX) : -1]
        codes = reverse_maps[field_schema.dictionary_ref or ""].get(cell)
        if not codes:
            raise FormatError(f"line {line_num}: description {cell!r} not in dictionary")
        if len(codes) > 1:
            raise FormatError(f"line {line_num}: description {cell!r} maps to several codes")
        return codes[0]
    return cell


def parse_pipe(
    text: str,
    schema: SchemaConfig,
    dictionaries: Mapping[str, CodeDictionary] | None = None,
    user_id: str = "",
    label: int | float | None = None,
) -> UserSequence:
    """Inverse of serialize_pipe; the user_id is supplied by the caller."""
    dicts = schema.dictionaries if dictionaries is None else dictionaries
    reverse_maps: dict[str, dict[str, list[str]]] = {}
    for ref, dictionary in dicts.items():
        rev: dict[str, list[str]] = {}
        for code, description in dictionary.entries.items():
            rev.setdefault(description, []).append(code)
        reverse_maps[ref] = rev

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty document")
    expected_header = "|".join(f.name for f in schema.fields)
    if lines[0] != expected_header:
        raise FormatError(f"header mismatch: expected {expected_header!r}, got {lines[0]!r}")

    events: list[EventRecord] = []
    for line_num, line in enumerate(lines[1:], start=2):
        cells = _split_cells(line, line_num)
        if len(cells) != len(schema.fields):
            raise FormatError(
                f"line {line_num}: expected {len(schema.fields)} cells, got {len(cells)}"
            )
        values = tuple(
            _unrender_value(cell, f, reverse_maps, line_num)
            for f, cell in zip(schema.fields, cells)
        )
        events.append(EventRecord(values))
    return UserSequence(user_id, tuple(events), label)


def _event_items(
    sequence: UserSequence, schema: SchemaConfig, dicts: Mapping[str, CodeDictionary]
) -> list[list[tuple[str, str]]]:
    return [
        [(f.name, render_value(v, f, dicts)) for f, v in zip(schema.fields, event.values)]
        for event in sequence.events
    ]


def _render_json(items: list[list[tuple[str, str]]], user_id: str) -> str:
    payload = {"user_id": user_id, "events": [dict(event) for event in items]}
    return json.dumps(payload, indent=2, ensure_ascii=False)


def _render_markdown(items: list[list[tuple[str, str]]], names: list[str]) -> str:
    def esc(cell: str) -> str:
        return cell.replace("|", "\\|")

    lines = [
        "| " + " | ".join(esc(n) for n in names) + " |",
        "| " + " | ".join("---" for _ in names) + " |",
    ]
    for event in items:
        lines.append("| " + " | ".join(esc(v) for _, v in event) + " |")
    return "\n".join(lines)


def _render_html(items: list[list[tuple[str, str]]], names: list[str]) -> str:
    def esc(cell: str) -> str:
        return html.escape(cell, quote=False)

    lines = ["<table>", "  <tr>" + "".join(f"<th>{esc(n)}</th>" for n in names) + "</tr>"]
    for event in items:
        lines.append("  <tr>" + "".join(f"<td>{esc(v)}</td>" for _, v in event) + "</tr>")
    lines.append("</table>")
    return "\n".join(lines)


def _render_yaml(items: list[list[tuple[str, str]]], user_id: str) -> str:
    payload = {"user_id": user_id, "events": [dict(event) for event in items]}
    return yaml.safe_dump(payload, sort_keys=False, allow_unicode=True, default_flow_style=False)


def _render_plain(items: list[list[tuple[str, str]]]) -> str:
    lines = []
    for i, event in enumerate(items, start=1):
        parts = "; ".join(f"{name} {value}" for name, value in event)
        lines.append(f"Event {i}: {parts}.")
    return "\n".join(lines) if lines else "No events recorded."


def serialize_variant(
    sequence: UserSequence,
    schema: SchemaConfig,
    dictionaries: Mapping[str, CodeDictionary] | None = None,
    format: str = "json",
) -> SerializedDoc:
    """Deterministic rendering in one of the display variants."""
    if format not in VARIANT_FORMATS:
        raise ValueError(f"unknown variant format {format!r}; pick one of {VARIANT_FORMATS}")
    dicts = schema.dictionaries if dictionaries is None else dictionaries
    items = _event_items(sequence, schema, dicts)
    names = [f.name for f in schema.fields]
    if format == "json":
        text = _render_json(items, sequence.user_id)
    elif format == "markdown":
        text = _render_markdown(items, names)
    elif format == "html":
        text = _render_html(items, names)
    elif format == "yaml":
        text = _render_yaml(items, sequence.user_id)
    else:
        text = _render_plain(items)
    return SerializedDoc(sequence.user_id, format, text)


def serialize_any(
    sequence: UserSequence,
    schema: SchemaConfig,
    dictionaries: Mapping[str, CodeDictionary] | None = None,
    format: str = PIPE_FORMAT,
) -> SerializedDoc:
    if format == PIPE_FORMAT:
        return serialize_pipe(sequence, schema, dictionaries)
    return serialize_variant(sequence, schema, dictionaries, format)


def safe_filename(user_id: str) -> str:
    return quote(user_id, safe="")


def write_corpus(
    sequences: Iterable[UserSequence],
    schema: SchemaConfig,
    formats: Iterable[str],
    out_dir: Path | str,
) -> Path:
    """Write one document per (user, format) plus a manifest CSV; returns its path."""
    out_dir = Path(out_dir)
    rows: list[tuple[str, str, str, int]] = []
    for fmt in formats:
        fmt_dir = out_dir / fmt
        fmt_dir.mkdir(parents=True, exist_ok=True)
        for seq in sequences:
            doc = serialize_any(seq, schema, None, fmt)
            path = fmt_dir / f"{safe_filename(seq.user_id)}.txt"
            path.write_text(doc.text, encoding="utf-8")
            rows.append((seq.user_id, fmt, str(path.relative_to(out_dir)), doc.char_count))
    rows.sort(key=lambda r: (r[0], r[1]))
    manifest_path = out_dir / "manifest.csv"
    with manifest_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["user_id", "format", "path", "char_count"])
        writer.writerows(rows)
    return manifest_path
